"""Training losses with analytic gradients, a central-finite-difference
gradient checker, and a head-only gradient-descent micro-fit.

The three losses: cross-entropy for the textual answer, mean per-pixel
binary cross-entropy for the mask, and a text-to-pixel contrastive loss on
dot products between the answer embedding and per-pixel features. The
contrastive loss is numerically identical to mean BCE applied to the dot
products, which serves as its structural cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .errors import BadTarget, DimensionMismatch, Divergence, NonFinite
from .raster_io import BinaryMask, rle_decode
from .rng import SplitMix64, derive_seed
from .vista import ForwardResult, ModelConfig

DEFAULT_LAMBDAS = (0.2, 1.0, 1.0)


@dataclass(frozen=True)
class LossBreakdown:
    l_txt: float
    l_mask: float
    l_con: float
    lambdas: tuple[float, float, float]

    @property
    def total(self) -> float:
        l1, l2, l3 = self.lambdas
        return l1 * self.l_txt + l2 * self.l_mask + l3 * self.l_con


def ce_loss(probs: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy on a softmax output; gradient is wrt pre-softmax logits."""
    if not 0 <= target < probs.shape[0]:
        raise BadTarget(f"target {target} out of range")
    p = np.clip(probs, 1e-300, 1.0)
    loss = -float(np.log(p[target]))
    grad = probs.copy()
    grad[target] -= 1.0
    return loss, grad


def ce_from_logits(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    return ce_loss(tc.softmax(logits), target)


def _stable_bce(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # -[y log sigma(z) + (1-y) log(1 - sigma(z))], elementwise, overflow-safe
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def bce_loss(
    mask_logits: np.ndarray, gt: BinaryMask
) -> tuple[float, np.ndarray]:
    """Mean per-pixel BCE; grad wrt logits is (sigmoid(z) - y) / (H*W)."""
    z = np.asarray(mask_logits, dtype=np.float64)
    if z.size != gt.width * gt.height:
        raise DimensionMismatch("logits/mask size mismatch")
    z = z.reshape(gt.height, gt.width)
    y = rle_decode(gt).reshape(gt.height, gt.width).astype(np.float64)
    n = z.size
    loss = float(_stable_bce(z, y).sum() / n)
    grad = (tc.sigmoid(z) - y) / n
    return loss, grad


def contrastive_loss(
    f_ta: np.ndarray, f_va: np.ndarray, gt: BinaryMask
) -> tuple[float, np.ndarray, np.ndarray]:
    """Text-to-pixel alignment: logistic loss on per-pixel dot products.

    f_ta is (C,), f_va is (C, H', W'), gt partitions pixels into positives
    and negatives; reduction is the mean over all pixels. Returns
    (loss, grad wrt f_ta, grad wrt f_va).
    """
    c, h, w = f_va.shape
    if f_ta.shape != (c,):
        raise DimensionMismatch(f"f_ta {f_ta.shape} vs f_va {f_va.shape}")
    if (gt.height, gt.width) != (h, w):
        raise DimensionMismatch("ground-truth mask size mismatch")
    y = rle_decode(gt).reshape(h, w).astype(np.float64)
    z = np.einsum("c,chw->hw", f_ta, f_va, optimize=True)
    n = h * w
    loss = float(_stable_bce(z, y).sum() / n)
    dz = (tc.sigmoid(z) - y) / n
    grad_ta = np.einsum("hw,chw->c", dz, f_va, optimize=True)
    grad_va = dz[None, :, :] * f_ta[:, None, None]
    return loss, grad_ta, grad_va


def composite_loss(
    l_txt: float,
    l_mask: float,
    l_con: float,
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS,
) -> LossBreakdown:
    return LossBreakdown(l_txt=l_txt, l_mask=l_mask, l_con=l_con, lambdas=lambdas)


# --- finite-difference verification ----------------------------------------

@dataclass
class GradCheckReport:
    block: str
    max_rel_err: float
    h: float
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def to_json_obj(self) -> dict:
        return {
            "block": self.block,
            "max_rel_err": float(self.max_rel_err),
            "h": self.h,
            "tol": self.tol,
            "n_coords": self.n_coords,
            "passed": bool(self.passed),
        }


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    x0: np.ndarray,
    analytic: np.ndarray,
    block: str = "block",
    h: float = 1e-5,
    tol: float = 1e-5,
    max_coords: int = 256,
    seed: int = 0,
) -> GradCheckReport:
    """Central differences per coordinate, sampled up to max_coords."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    coords = list(range(n))
    if n > max_coords:
        rng = SplitMix64(derive_seed(seed, block, "coords"))
        rng.shuffle(coords)
        coords = coords[:max_coords]
    max_rel = 0.0
    flat = x0.ravel().copy()
    ana = np.asarray(analytic, dtype=np.float64).ravel()
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = loss_fn(flat.reshape(x0.shape))
        flat[i] = orig - h
        f_minus = loss_fn(flat.reshape(x0.shape))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFinite(f"non-finite loss while checking {block}")
        numeric = (f_plus - f_minus) / (2 * h)
        denom = max(abs(ana[i]), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(ana[i] - numeric) / denom)
    return GradCheckReport(
        block=block, max_rel_err=max_rel, h=h, tol=tol, n_coords=len(coords)
    )


def _random_mask(rng: SplitMix64, w: int, h: int) -> BinaryMask:
    from .raster_io import rle_encode

    bits = np.array([rng.randrange(2) for _ in range(w * h)], dtype=np.uint8)
    return rle_encode(bits, w, h)


def run_standard_grad_checks(
    seed: int = 0,
    n_instances: int = 50,
    h: float = 1e-5,
    tol: float = 1e-5,
) -> list[GradCheckReport]:
    """Check CE, BCE, and contrastive gradients on random instances."""
    reports = []
    worst = {"ce": 0.0, "bce": 0.0, "contrastive": 0.0}
    for i in range(n_instances):
        rng = SplitMix64(derive_seed(seed, "gradcheck", i))
        # CE over a small vocabulary
        n_cls = 4 + rng.randrange(8)
        logits = np.array([rng.uniform(-2, 2) for _ in range(n_cls)])
        target = rng.randrange(n_cls)
        _, grad = ce_from_logits(logits, target)
        rep = grad_check(
            lambda x, t=target: ce_from_logits(x, t)[0],
            logits, grad, block=f"ce[{i}]", h=h, tol=tol, seed=seed,
        )
        worst["ce"] = max(worst["ce"], rep.max_rel_err)
        # BCE on a small logit grid
        gw, gh = 2 + rng.randrange(4), 2 + rng.randrange(4)
        z = np.array([rng.uniform(-3, 3) for _ in range(gw * gh)]).reshape(gh, gw)
        gt = _random_mask(rng, gw, gh)
        _, gz = bce_loss(z, gt)
        rep = grad_check(
            lambda x, g=gt: bce_loss(x, g)[0],
            z, gz, block=f"bce[{i}]", h=h, tol=tol, seed=seed,
        )
        worst["bce"] = max(worst["bce"], rep.max_rel_err)
        # contrastive on an 8-pixel instance
        c = 3 + rng.randrange(4)
        f_ta = np.array([rng.uniform(-1, 1) for _ in range(c)])
        f_va = np.array([rng.uniform(-1, 1) for _ in range(c * 8)]).reshape(c, 2, 4)
        gt2 = _random_mask(rng, 4, 2)
        _, g_ta, g_va = contrastive_loss(f_ta, f_va, gt2)
        rep_ta = grad_check(
            lambda x, fv=f_va, g=gt2: contrastive_loss(x, fv, g)[0],
            f_ta, g_ta, block=f"con_ta[{i}]", h=h, tol=tol, seed=seed,
        )
        rep_va = grad_check(
            lambda x, ft=f_ta, g=gt2: contrastive_loss(ft, x, g)[0],
            f_va, g_va, block=f"con_va[{i}]", h=h, tol=tol, seed=seed,
        )
        worst["contrastive"] = max(
            worst["contrastive"], rep_ta.max_rel_err, rep_va.max_rel_err
        )
    for name, err in worst.items():
        reports.append(
            GradCheckReport(
                block=name, max_rel_err=err, h=h, tol=tol,
                n_coords=n_instances,
            )
        )
    return reports


# --- head-only micro-fit ----------------------------------------------------

def build_synthetic_sample(
    seed: int, taxonomy, config: ModelConfig
) -> tuple[ForwardResult, dict, int, BinaryMask]:
    """Seeded random mask pair + largest-change question, run through the
    frozen forward pass. Returns (features, params, target index, gt mask)."""
    from .raster_io import MaskPair, SemanticMask
    from .triplet_engine import answer_lc, answer_vocabulary
    from .vista import (
        build_text_vocab,
        forward,
        init_params,
        mask_pair_to_images,
        tokenize,
    )

    rng = SplitMix64(derive_seed(seed, "synthetic-sample"))
    h, w = config.height, config.width
    k = taxonomy.K
    # localized change: uniform scene with one random block turned into a
    # random other class, so the grounding mask is compact and learnable
    base = rng.randrange(k)
    other = (base + 1 + rng.randrange(k - 1)) % k
    bh, bw = h // 4, w // 4
    r0 = rng.randrange(h - bh + 1)
    c0 = rng.randrange(w - bw + 1)
    g1 = np.full((h, w), base, dtype=np.uint8)
    g2 = g1.copy()
    g2[r0 : r0 + bh, c0 : c0 + bw] = other
    pair = MaskPair(
        pair_id="synthetic",
        t1=SemanticMask(width=w, height=h, labels=g1.ravel()),
        t2=SemanticMask(width=w, height=h, labels=g2.ravel()),
    )
    answer, gt_mask = answer_lc(pair, taxonomy)
    target = answer_vocabulary(taxonomy).index(answer)
    vocab = build_text_vocab(taxonomy)
    question = "What is the largest change in the second image?"
    tokens = tokenize(question, vocab)
    params = init_params(config, len(vocab), len(answer_vocabulary(taxonomy)))
    img1, img2 = mask_pair_to_images(pair, k)
    features = forward(img1, img2, tokens, params, config)
    return features, params, target, gt_mask



def downsample_mask(gt: BinaryMask, factor: int) -> BinaryMask:
    """Nearest-neighbour downsample of a binary mask by an integer factor."""
    from .raster_io import rle_encode

    grid = rle_decode(gt).reshape(gt.height, gt.width)
    small = grid[::factor, ::factor]
    return rle_encode(small, small.shape[1], small.shape[0])


def micro_fit(
    features: ForwardResult,
    params: dict,
    config: ModelConfig,
    target_answer: int,
    gt_mask: BinaryMask,
    steps: int = 200,
    lr: float = 0.05,
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS,
) -> list[LossBreakdown]:
    """Plain gradient descent on the two output heads with frozen features.

    Trains the dynamic-head linear and the classifier MLP only, using the
    analytic gradients of the three losses. Returns the per-step loss trace
    (length steps + 1, including the initial point).
    """
    f_sel = features.f_sel
    f_mask = features.f_mask  # (C_m, H/4, W/4)
    c_m = f_mask.shape[0]
    if config.k_dyn != 1:
        raise DimensionMismatch("micro_fit supports k_dyn=1 only")
    gt4 = downsample_mask(gt_mask, 4)
    y_full = rle_decode(gt_mask).reshape(gt_mask.height, gt_mask.width)

    dyn = {k: v.copy() for k, v in params["dyn_head"].items()}
    fc1 = {k: v.copy() for k, v in params["classifier"]["fc1"].items()}
    fc2 = {k: v.copy() for k, v in params["classifier"]["fc2"].items()}
    l1, l2, l3 = lambdas
    trace: list[LossBreakdown] = []

    for step in range(steps + 1):
        # classifier path
        pre1 = fc1["w"].T @ f_sel + fc1["b"]
        hdn = np.maximum(pre1, 0.0)
        logits = fc2["w"].T @ hdn + fc2["b"]
        probs = tc.softmax(logits)
        l_txt, dlogits = ce_loss(probs, target_answer)
        # dynamic-head path
        z = dyn["w"].T @ f_sel + dyn["b"]
        kernel = z[:-1]
        bias = z[-1]
        logits4 = np.einsum("c,chw->hw", kernel, f_mask, optimize=True) + bias
        full = tc.bilinear_upsample(logits4[None, :, :], 4)[0]
        n_full = full.size
        l_mask = float(_stable_bce(full, y_full).sum() / n_full)
        # contrastive shares the kernel as the textual-answer embedding
        l_con, g_ta, _ = contrastive_loss(kernel, f_mask, gt4)

        breakdown = composite_loss(l_txt, l_mask, l_con, lambdas)
        if not np.isfinite(breakdown.total):
            raise Divergence(f"non-finite loss at step {step}")
        trace.append(breakdown)
        if step == steps:
            break

        # backprop, classifier
        g_fc2_w = np.outer(hdn, dlogits) * l1
        g_fc2_b = dlogits * l1
        dh = (fc2["w"] @ dlogits) * (pre1 > 0)
        g_fc1_w = np.outer(f_sel, dh) * l1
        g_fc1_b = dh * l1
        # backprop, mask logits through the bilinear upsample adjoint
        g_full = (tc.sigmoid(full) - y_full) / n_full
        g4 = tc.bilinear_upsample_adjoint(g_full[None, :, :], 4)[0]
        g_kernel = l2 * np.einsum("hw,chw->c", g4, f_mask, optimize=True)
        g_bias = l2 * float(g4.sum())
        g_kernel = g_kernel + l3 * g_ta
        g_z = np.concatenate([g_kernel, [g_bias]])
        g_dyn_w = np.outer(f_sel, g_z)
        g_dyn_b = g_z

        fc2["w"] -= lr * g_fc2_w
        fc2["b"] -= lr * g_fc2_b
        fc1["w"] -= lr * g_fc1_w
        fc1["b"] -= lr * g_fc1_b
        dyn["w"] -= lr * g_dyn_w
        dyn["b"] -= lr * g_dyn_b

    params["dyn_head"] = dyn
    params["classifier"] = {"fc1": fc1, "fc2": fc2}
    return trace
