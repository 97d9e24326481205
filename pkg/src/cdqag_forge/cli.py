"""Command-line entry point.

Subcommands: generate, stats, split, eval, forward, gradcheck, microfit.
Exit codes: 0 success, 1 checks failed, 2 input/validation error. All
randomness flows from the --seed flag through a portable splitmix64 stream,
so outputs are byte-reproducible for fixed inputs regardless of --workers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import losses, metrics, plotting, raster_io, tensor_core, triplet_engine, vista
from .errors import CdqagError

log = logging.getLogger("cdqag_forge")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2


def _setup_logging() -> None:
    level = os.environ.get("CDQAG_FORGE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _gen_one(args: tuple) -> tuple[str, list[str]]:
    """Worker: generate one pair's triplets as serialized JSONL lines."""
    pairs_dir, pair_id, taxonomy_names, include_absent, measure, templates, seed = args
    taxonomy = raster_io.ClassTaxonomy(tuple(taxonomy_names))
    pair = raster_io.load_pair(pairs_dir, pair_id, taxonomy)
    config = triplet_engine.GenConfig(
        include_absent=include_absent,
        change_measure=measure,
        templates=templates,
    )
    trips = triplet_engine.generate_triplets(pair, taxonomy, config, seed)
    return pair_id, [json.dumps(t.to_json_obj()) for t in trips]


def cmd_generate(args) -> int:
    pairs_dir = Path(args.pairs_dir)
    taxonomy_path = args.taxonomy or pairs_dir / "taxonomy.json"
    taxonomy = raster_io.ClassTaxonomy.from_json(taxonomy_path)
    pair_ids = raster_io.discover_pairs(pairs_dir)
    if not pair_ids:
        print("no pairs found", file=sys.stderr)
        return EXIT_INPUT_ERROR
    templates = (
        triplet_engine.load_template_bank(args.templates)
        if args.templates
        else None
    )
    tasks = [
        (
            str(pairs_dir),
            pid,
            list(taxonomy.names),
            args.include_absent,
            args.change_measure,
            templates,
            args.seed,
        )
        for pid in pair_ids
    ]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_gen_one, tasks))
    else:
        results = [_gen_one(t) for t in tasks]
    results.sort(key=lambda r: r[0])  # order-normalize across workers
    n = 0
    with open(args.out, "w") as f:
        for _, lines in results:
            for line in lines:
                f.write(line + "\n")
                n += 1
    print(f"wrote {n} triplets for {len(pair_ids)} pairs to {args.out}",
          file=sys.stderr)
    return EXIT_OK


def cmd_stats(args) -> int:
    triplets = triplet_engine.read_jsonl(args.dataset)
    stats = triplet_engine.dataset_stats(triplets)
    obj = stats.to_json_obj()
    print(json.dumps(obj, indent=2))
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(obj, indent=2) + "\n")
    if args.csv:
        Path(args.csv).write_text(plotting.stats_to_csv(stats))
    if args.figures:
        written = plotting.save_stats_figures(stats, args.figures)
        log.info("figures: %s", ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_split(args) -> int:
    triplets = triplet_engine.read_jsonl(args.dataset)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    train, val, test = triplet_engine.split_dataset(triplets, ratios, args.seed)
    manifest = {
        name: sorted({t.pair_id for t in part})
        for name, part in (("train", train), ("val", val), ("test", test))
    }
    out = json.dumps(manifest, indent=2)
    print(out)
    if args.out:
        Path(args.out).write_text(out + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    gts = triplet_engine.read_jsonl(args.gt)
    sizes = {t.triplet_id: (t.mask.height, t.mask.width) for t in gts}
    preds = metrics.read_predictions(args.pred, sizes)
    report = metrics.evaluate(preds, gts, threshold=args.threshold)
    print(report.to_table())
    if args.out_json:
        Path(args.out_json).write_text(
            json.dumps(report.to_json_obj(), indent=2) + "\n"
        )
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.figures:
        plotting.save_eval_figures(report, args.figures)
    return EXIT_OK


def cmd_forward(args) -> int:
    taxonomy = raster_io.ClassTaxonomy.from_json(args.taxonomy)
    t1 = raster_io.load_mask(args.t1, taxonomy)
    t2 = raster_io.load_mask(args.t2, taxonomy)
    pair = raster_io.MaskPair(pair_id="cli", t1=t1, t2=t2)
    config = vista.ModelConfig(
        height=t1.height, width=t1.width, seed=args.seed
    )
    vocab = vista.build_text_vocab(taxonomy)
    answers = triplet_engine.answer_vocabulary(taxonomy)
    if args.checkpoint:
        params = vista.params_from_dump(
            tensor_core.load_params(
                args.checkpoint + ".json", args.checkpoint + ".bin"
            )
        )
    else:
        params = vista.init_params(config, len(vocab), len(answers))
    if args.save_checkpoint:
        tensor_core.dump_params(
            vista.params_for_dump(params),
            args.save_checkpoint + ".json",
            args.save_checkpoint + ".bin",
        )
    answer, result = vista.forward_pair(
        pair, args.question, params, config, taxonomy
    )
    probs = result.answer_probs
    top = sorted(
        zip(answers, probs.tolist()), key=lambda kv: -kv[1]
    )[:5]
    print(
        json.dumps(
            {
                "answer": answer,
                "top": [{"token": t, "p": p} for t, p in top],
                "mask_logits_shape": list(result.mask_logits.shape),
            },
            indent=2,
        )
    )
    if args.scores_out:
        scores = result.mask_logits[0].astype("<f4")
        Path(args.scores_out).write_bytes(scores.tobytes())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = losses.run_standard_grad_checks(
        seed=args.seed, n_instances=args.instances, h=args.h, tol=args.tol
    )
    obj = [r.to_json_obj() for r in reports]
    print(json.dumps(obj, indent=2))
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(obj, indent=2) + "\n")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def cmd_microfit(args) -> int:
    config = vista.ModelConfig(height=32, width=32, channels=16, heads=4,
                               seed=args.seed)
    taxonomy = raster_io.DEFAULT_TAXONOMY
    features, params, target, gt_mask = losses.build_synthetic_sample(
        args.seed, taxonomy, config
    )
    trace = losses.micro_fit(
        features, params, config, target, gt_mask,
        steps=args.steps, lr=args.lr,
        lambdas=(args.lambda_txt, args.lambda_mask, args.lambda_con),
    )
    rows = ["step,l_txt,l_mask,l_con,total"]
    rows.extend(
        f"{i},{b.l_txt:.12g},{b.l_mask:.12g},{b.l_con:.12g},{b.total:.12g}"
        for i, b in enumerate(trace)
    )
    csv = "\n".join(rows) + "\n"
    if args.csv_out:
        Path(args.csv_out).write_text(csv)
    else:
        print(csv, end="")
    ok = trace[-1].total <= 0.5 * trace[0].total
    print(
        f"initial {trace[0].total:.6f} final {trace[-1].total:.6f} "
        f"({'halved' if ok else 'NOT halved'})",
        file=sys.stderr,
    )
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdqag-forge",
        description="Change-detection QA-and-grounding toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate triplets from mask pairs")
    p.add_argument("pairs_dir")
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--include-absent", action="store_true")
    p.add_argument("--change-measure", choices=["gross", "net"], default="gross")
    p.add_argument("--templates", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("dataset")
    p.add_argument("--out-json", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--figures", default=None, metavar="DIR")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="image-wise train/val/test split")
    p.add_argument("dataset")
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD)
    p.add_argument("--out-json", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--figures", default=None, metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forward", help="run the model on one pair + question")
    p.add_argument("t1")
    p.add_argument("t2")
    p.add_argument("--question", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None, metavar="PREFIX")
    p.add_argument("--save-checkpoint", default=None, metavar="PREFIX")
    p.add_argument("--scores-out", default=None)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out-json", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("microfit", help="head-only gradient-descent fit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lambda-txt", type=float, default=0.2)
    p.add_argument("--lambda-mask", type=float, default=1.0)
    p.add_argument("--lambda-con", type=float, default=1.0)
    p.add_argument("--csv-out", default=None)
    p.set_defaults(func=cmd_microfit)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CdqagError, FileNotFoundError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
