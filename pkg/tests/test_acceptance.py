"""End-to-end acceptance checks.

Each test prints a single CRITERION line so the whole gate is auditable
from the pytest -s output.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from cdqag_forge.cli import main as cli_main
from cdqag_forge.losses import (
    DEFAULT_LAMBDAS,
    bce_loss,
    build_synthetic_sample,
    composite_loss,
    contrastive_loss,
    grad_check,
    micro_fit,
    run_standard_grad_checks,
)
from cdqag_forge.metrics import DEFAULT_THRESHOLD, Prediction, evaluate, iou
from cdqag_forge.raster_io import BinaryMask, ClassTaxonomy, rle_decode, rle_encode
from cdqag_forge.rng import SplitMix64
from cdqag_forge.tensor_core import init_array
from cdqag_forge.triplet_engine import (
    QuestionSpec,
    QuestionType,
    Triplet,
    answer_cfw,
    answer_cn,
    answer_cr,
    answer_ctw,
    answer_dn,
    answer_in,
    answer_lc,
    answer_sc,
    generate_triplets,
    split_dataset,
)
from cdqag_forge.vista import (
    ModelConfig,
    build_text_vocab,
    forward,
    init_params,
    qa_select,
)
from oracles import brute_answer, random_pair

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden_dataset.jsonl"


def report(n, ok, detail=""):
    tag = "pass" if ok else "FAIL"
    print(f"CRITERION {n}: {tag} {detail}".rstrip())
    assert ok


def test_criterion_1_oracle_equivalence():
    rng = SplitMix64(1001)
    start = time.monotonic()
    mismatches = 0
    n_checked = 0
    for _ in range(500):
        k = 2 + rng.randrange(5)  # K in 2..6
        w = 1 + rng.randrange(32)
        h = 1 + rng.randrange(32)
        pair = random_pair(rng, w, h, k)
        tax = ClassTaxonomy(tuple(f"c{i}" for i in range(k)))
        rules = {
            "CN": lambda c: answer_cn(pair, c, k),
            "CtW": lambda c: answer_ctw(pair, c, tax),
            "CfW": lambda c: answer_cfw(pair, c, tax),
            "IN": lambda c: answer_in(pair, c, k),
            "DN": lambda c: answer_dn(pair, c, k),
            "LC": lambda c: answer_lc(pair, tax),
            "SC": lambda c: answer_sc(pair, tax),
            "CR": lambda c: answer_cr(pair, c, k),
        }
        for qtype, rule in rules.items():
            subjects = [0] if qtype in ("LC", "SC") else range(k)
            for c in subjects:
                want_ans, want_bits = brute_answer(pair, qtype, c, tax.names)
                got_ans, got_mask = rule(c)
                n_checked += 1
                if got_ans != want_ans or rle_decode(got_mask).tolist() != want_bits:
                    mismatches += 1
    elapsed = time.monotonic() - start
    report(
        1,
        mismatches == 0 and elapsed < 10.0,
        f"({n_checked} rule evaluations, {mismatches} mismatches, {elapsed:.2f}s)",
    )


def test_criterion_2_golden_file_determinism(tmp_path):
    golden = GOLDEN.read_bytes()
    ok = True
    for workers in (1, 8):
        out = tmp_path / f"w{workers}.jsonl"
        rc = cli_main(
            ["generate", str(DATA / "mini_corpus"), "--out", str(out),
             "--seed", "7", "--workers", str(workers)]
        )
        ok = ok and rc == 0 and out.read_bytes() == golden
    report(2, ok, "(workers 1 and 8 byte-identical to committed JSONL)")


def test_criterion_3_metrics_correctness():
    full = BinaryMask(2, 2, (0, 4))
    empty = BinaryMask.empty(2, 2)

    def trip(tid, qtype, answer, mask):
        subject = None if qtype in (QuestionType.LC, QuestionType.SC) else 0
        return Triplet(tid, tid.split("-")[0], "did this area change at all?",
                       QuestionSpec(qtype, 1, subject, 0), answer, mask)

    gts = [
        trip("p0-CN-c0-t1", QuestionType.CN, "yes", full),
        trip("p0-CR-c0-t1", QuestionType.CR, "0", empty),
        trip("p1-CR-c0-t1", QuestionType.CR, "0", empty),
        trip("p2-CR-c0-t1", QuestionType.CR, "0", empty),
    ]
    preds = [
        Prediction("p0-CN-c0-t1", "yes", mask=full),
        Prediction("p0-CR-c0-t1", "10_to_20", mask=empty),
        Prediction("p1-CR-c0-t1", "10_to_20", mask=empty),
        Prediction("p2-CR-c0-t1", "10_to_20", mask=empty),
    ]
    rep = evaluate(preds, gts)
    ok = f"{rep.aa:.6f}" == "0.500000" and f"{rep.oa:.6f}" == "0.250000"
    ok = ok and iou(empty, empty) == 1.0
    # shard invariance on integer accumulators
    rng = SplitMix64(33)
    gts2, preds2 = [], []
    for i in range(60):
        ga = np.array([rng.randrange(2) for _ in range(25)])
        pa = np.array([rng.randrange(2) for _ in range(25)])
        tid = f"q{i}-CN-c0-t1"
        gts2.append(trip(tid, QuestionType.CN, "yes", rle_encode(ga, 5, 5)))
        preds2.append(Prediction(tid, "yes", mask=rle_encode(pa, 5, 5)))
    whole = evaluate(preds2, gts2).oiou
    for cuts in ((0, 20, 60), (0, 7, 31, 60)):
        inter = union = 0
        for lo, hi in zip(cuts, cuts[1:]):
            r = evaluate(preds2[lo:hi], gts2[lo:hi])
            for ts in r.per_type.values():
                inter += ts.inter_sum
                union += ts.union_sum
        ok = ok and inter / union == whole
    ok = ok and DEFAULT_THRESHOLD == 0.35
    report(3, ok, f"(AA={rep.aa:.6f} OA={rep.oa:.6f}, oIoU shard-stable)")


def test_criterion_4_selector_invariants():
    rng = SplitMix64(44)
    worst = 0.0
    for _ in range(1000):
        f_vl = init_array(rng, (6, 8), 1) * 200
        f_w = init_array(rng, (4, 8), 1) * 200
        alpha, beta, _ = qa_select(f_vl, f_w)
        worst = max(worst, float(np.abs(alpha + beta - 1.0).max()))
    x = np.tile(np.arange(8.0), (3, 1))
    _, _, f_sel = qa_select(x, x.copy())
    eq_err = float(np.abs(f_sel - x.mean(axis=0)).max())
    ok = worst < 1e-12 and eq_err < 1e-12
    report(4, ok, f"(max |a+b-1| = {worst:.2e}, equal-input err {eq_err:.2e})")


def test_criterion_5_attention_rows():
    config = ModelConfig(height=32, width=32, channels=16)
    tax = ClassTaxonomy(("background", "building", "water"))
    vocab = build_text_vocab(tax)
    rng = SplitMix64(55)
    worst = 0.0
    neg = False
    for i in range(100):
        params = init_params(
            ModelConfig(height=32, width=32, channels=16, seed=i),
            len(vocab), 10,
        )
        base = np.array(
            [rng.uniform(0, 1) for _ in range(32 * 32)]
        ).reshape(1, 32, 32)
        img1 = np.repeat(base, 3, axis=0)
        img2 = np.repeat(base[::-1], 3, axis=0)
        n_tok = 2 + rng.randrange(8)
        tokens = [2 + rng.randrange(len(vocab) - 2) for _ in range(n_tok)]
        res = forward(img1, img2, tokens, params, config)
        for _, _, w in res.diagnostics["attention"]:
            worst = max(worst, float(np.abs(w.sum(axis=-1) - 1.0).max()))
            neg = neg or bool((w < 0).any())
    ok = worst < 1e-9 and not neg
    report(5, ok, f"(100 forwards, max row-sum err {worst:.2e})")


def test_criterion_6_shape_contract():
    tax = ClassTaxonomy(("background", "building", "water"))
    vocab = build_text_vocab(tax)
    ok = True
    for h, w, c in ((64, 64, 32), (32, 32, 16)):
        config = ModelConfig(height=h, width=w, channels=c)
        params = init_params(config, len(vocab), 10)
        rng = SplitMix64(66)
        img = np.repeat(
            np.array([rng.uniform(0, 1) for _ in range(h * w)]).reshape(1, h, w),
            3, axis=0,
        )
        res = forward(img, img.copy(), [2, 3, 4], params, config)
        n = (h // 16) * (w // 16)
        s = res.diagnostics["shapes"]
        ok = ok and s["F_v"] == (n, c) and s["F_vl"] == (n, c)
        ok = ok and s["M_c"] == (1, h // 16, w // 16)
        ok = ok and s["F_mask"] == (c // 2, h // 4, w // 4)
        ok = ok and res.mask_logits.shape == (1, h, w)
    report(6, ok, "(documented shapes at 64x64 and 32x32)")


def test_criterion_7_gradient_checks():
    reports = run_standard_grad_checks(seed=0, n_instances=50)
    ok = {r.block for r in reports} == {"ce", "bce", "contrastive"}
    worst = max(r.max_rel_err for r in reports)
    ok = ok and all(r.passed for r in reports)
    a = np.array([2.0, -1.0, 0.5])
    x0 = np.array([0.4, 1.2, -0.3])
    control = grad_check(
        lambda x: float(0.5 * (a * x * x).sum()), x0, a * x0 * 1.1, "control"
    )
    ok = ok and not control.passed
    report(7, ok, f"(worst rel err {worst:.2e}, negative control fails)")


def test_criterion_8_contrastive_equals_bce():
    rng = SplitMix64(88)
    worst = 0.0
    for _ in range(50):
        h, w, c = 1 + rng.randrange(6), 1 + rng.randrange(6), 1 + rng.randrange(8)
        gt = rle_encode(
            np.array([rng.randrange(2) for _ in range(h * w)]), w, h
        )
        f_ta = init_array(rng, (c,), 1) * 4
        f_va = init_array(rng, (c, h, w), 1) * 4
        want, _ = bce_loss(np.einsum("c,chw->hw", f_ta, f_va), gt)
        got, _, _ = contrastive_loss(f_ta, f_va, gt)
        worst = max(worst, abs(got - want))
    report(8, worst < 1e-12, f"(max |diff| = {worst:.2e})")


def test_criterion_9_composite_loss():
    ok = DEFAULT_LAMBDAS == (0.2, 1.0, 1.0)
    b = composite_loss(1.3, 7.0, 5.0, lambdas=(0.2, 0.0, 0.0))
    ok = ok and b.total == 0.2 * 1.3
    full = composite_loss(1.0, 2.0, 3.0)
    ok = ok and abs(full.total - (0.2 * 1.0 + 2.0 + 3.0)) < 1e-15
    report(9, ok, "(defaults (0.2, 1, 1); zeroed terms drop out exactly)")


def test_criterion_10_micro_fit():
    tax = ClassTaxonomy(("background", "building", "water"))
    config = ModelConfig(height=32, width=32, channels=16, seed=0)
    start = time.monotonic()
    traces = []
    for _ in range(2):
        features, params, target, gt = build_synthetic_sample(0, tax, config)
        trace = micro_fit(features, params, config, target, gt)
        traces.append([b.total for b in trace])
    elapsed = time.monotonic() - start
    halved = traces[0][-1] <= 0.5 * traces[0][0]
    ok = halved and traces[0] == traces[1] and elapsed < 60.0
    report(
        10, ok,
        f"({traces[0][0]:.3f} -> {traces[0][-1]:.3f} in 200 steps, "
        f"bit-reproducible, {elapsed:.1f}s)",
    )


def test_criterion_11_dataset_hygiene():
    tax = ClassTaxonomy(("background", "building", "water"))
    rng = SplitMix64(111)
    trips = []
    for i in range(20):
        pair = random_pair(rng, 8, 8, 3, pair_id=f"pair{i:02d}")
        trips.extend(generate_triplets(pair, tax, seed=i))
    train, val, test = split_dataset(trips, (0.7, 0.1, 0.2), seed=4)
    membership = {}
    together = True
    for idx, part in enumerate((train, val, test)):
        for t in part:
            together = together and membership.setdefault(t.pair_id, idx) == idx
    sizes = tuple(
        len({t.pair_id for t in part}) for part in (train, val, test)
    )
    words_ok = all(4 <= len(t.question.split()) <= 15 for t in trips)
    ok = together and sizes == (14, 2, 4) and words_ok
    report(
        11, ok,
        f"(split {sizes} keeps pairs together; all questions 4-15 words)",
    )
