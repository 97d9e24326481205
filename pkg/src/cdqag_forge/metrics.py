"""Scoring of predicted textual+visual answers against ground-truth triplets.

Textual answers score AA (per-type mean accuracy) and OA (global accuracy);
masks score mIoU (mean per-sample IoU) and oIoU (summed intersections over
summed unions). All accumulators are exact integers until the final division,
so results are identical under any sharding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicatePrediction,
    MissingPrediction,
    NonFiniteScore,
    UnknownTripletId,
)
from .raster_io import BinaryMask, rle_decode, rle_encode
from .triplet_engine import TYPE_ORDER, Triplet

DEFAULT_THRESHOLD = 0.35


@dataclass(frozen=True)
class Prediction:
    """One predicted answer: token plus either real-valued scores or a mask."""

    triplet_id: str
    answer: str
    mask: Optional[BinaryMask] = None
    mask_scores: Optional[np.ndarray] = None  # (H, W) floats
    scores_are_logits: bool = False

    def __post_init__(self):
        if (self.mask is None) == (self.mask_scores is None):
            raise ValueError("exactly one of mask / mask_scores required")


def binarize(
    mask_scores: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    scores_are_logits: bool = False,
) -> BinaryMask:
    """Threshold per-pixel scores; logits pass through the logistic first.

    A pixel is on iff its probability is >= threshold (inclusive).
    """
    scores = np.asarray(mask_scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise NonFiniteScore("mask scores contain NaN/Inf")
    if scores_are_logits:
        probs = 1.0 / (1.0 + np.exp(-scores))
    else:
        probs = scores
    h, w = scores.shape
    return rle_encode(probs >= threshold, w, h)


def iou(pred: BinaryMask, gt: BinaryMask) -> float:
    """Intersection over union; both-empty scores 1.0, one-empty scores 0.0."""
    inter, union = iou_counts(pred, gt)
    if union == 0:
        return 1.0
    return inter / union


def iou_counts(pred: BinaryMask, gt: BinaryMask) -> tuple[int, int]:
    """Exact integer (intersection, union) pixel counts."""
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise DimensionMismatch("prediction/ground-truth size mismatch")
    a = rle_decode(pred)
    b = rle_decode(gt)
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return inter, union


@dataclass
class TypeScores:
    n: int = 0
    correct: int = 0
    iou_sum: float = 0.0
    inter_sum: int = 0
    union_sum: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0

    @property
    def miou(self) -> float:
        return self.iou_sum / self.n if self.n else 0.0

    @property
    def oiou(self) -> float:
        return 1.0 if self.union_sum == 0 else self.inter_sum / self.union_sum


@dataclass
class EvalReport:
    """Per-question-type and aggregate scores in the standard row order."""

    per_type: dict[str, TypeScores]
    aa: float
    oa: float
    miou: float
    oiou: float
    n_total: int

    def to_json_obj(self) -> dict:
        return {
            "per_type": {
                name: {
                    "n": ts.n,
                    "accuracy": ts.accuracy,
                    "mIoU": ts.miou,
                    "oIoU": ts.oiou,
                }
                for name, ts in self.per_type.items()
            },
            "AA": self.aa,
            "OA": self.oa,
            "mIoU": self.miou,
            "oIoU": self.oiou,
            "n_total": self.n_total,
        }

    def to_table(self) -> str:
        """Aligned text table, one row per question type then aggregates."""
        lines = [
            f"{'type':<6} {'n':>6} {'acc':>8} {'mIoU':>8} {'oIoU':>8}",
            "-" * 40,
        ]
        for name in [q.value for q in TYPE_ORDER]:
            if name not in self.per_type:
                continue
            ts = self.per_type[name]
            lines.append(
                f"{name:<6} {ts.n:>6} {ts.accuracy:>8.4f} "
                f"{ts.miou:>8.4f} {ts.oiou:>8.4f}"
            )
        lines.append("-" * 40)
        lines.append(f"{'AA':<6} {'':>6} {self.aa:>8.4f}")
        lines.append(f"{'OA':<6} {self.n_total:>6} {self.oa:>8.4f}")
        lines.append(f"{'mIoU':<6} {'':>6} {'':>8} {self.miou:>8.4f}")
        lines.append(f"{'oIoU':<6} {'':>6} {'':>8} {self.oiou:>8.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["type,n,accuracy,mIoU,oIoU"]
        for name, ts in self.per_type.items():
            rows.append(
                f"{name},{ts.n},{ts.accuracy:.6f},{ts.miou:.6f},{ts.oiou:.6f}"
            )
        rows.append(f"AA,,{self.aa:.6f},,")
        rows.append(f"OA,{self.n_total},{self.oa:.6f},,")
        rows.append(f"mIoU,,,{self.miou:.6f},")
        rows.append(f"oIoU,,,,{self.oiou:.6f}")
        return "\n".join(rows) + "\n"


def evaluate(
    preds: list[Prediction],
    gts: list[Triplet],
    threshold: float = DEFAULT_THRESHOLD,
    missing_as_wrong: bool = False,
) -> EvalReport:
    """Score predictions; every ground-truth id needs exactly one prediction."""
    by_id: dict[str, Prediction] = {}
    for p in preds:
        if p.triplet_id in by_id:
            raise DuplicatePrediction(p.triplet_id)
        by_id[p.triplet_id] = p
    gt_ids = {t.triplet_id for t in gts}
    for pid in by_id:
        if pid not in gt_ids:
            raise UnknownTripletId(pid)

    per_type: dict[str, TypeScores] = {}
    for t in gts:
        ts = per_type.setdefault(t.spec.qtype.value, TypeScores())
        ts.n += 1
        p = by_id.get(t.triplet_id)
        if p is None:
            if not missing_as_wrong:
                raise MissingPrediction(t.triplet_id)
            pred_mask = BinaryMask.empty(t.mask.width, t.mask.height)
            answer = ""
        else:
            answer = p.answer
            if p.mask is not None:
                pred_mask = p.mask
            else:
                pred_mask = binarize(
                    p.mask_scores, threshold, p.scores_are_logits
                )
        if answer.strip().lower() == t.answer.strip().lower():
            ts.correct += 1
        inter, union = iou_counts(pred_mask, t.mask)
        ts.inter_sum += inter
        ts.union_sum += union
        ts.iou_sum += 1.0 if union == 0 else inter / union

    present = [per_type[q.value] for q in TYPE_ORDER if q.value in per_type]
    n_total = sum(ts.n for ts in present)
    correct = sum(ts.correct for ts in present)
    inter_sum = sum(ts.inter_sum for ts in present)
    union_sum = sum(ts.union_sum for ts in present)
    iou_sum = sum(ts.iou_sum for ts in present)
    ordered = {
        q.value: per_type[q.value] for q in TYPE_ORDER if q.value in per_type
    }
    return EvalReport(
        per_type=ordered,
        aa=float(np.mean([ts.accuracy for ts in present])),
        oa=correct / n_total if n_total else 0.0,
        miou=iou_sum / n_total if n_total else 0.0,
        oiou=1.0 if union_sum == 0 else inter_sum / union_sum,
        n_total=n_total,
    )


def read_predictions(
    path: str | Path, sizes: dict[str, tuple[int, int]]
) -> list[Prediction]:
    """Read predictions JSONL.

    Each line carries either an inline RLE mask or a `scores_path` pointing
    to a flat little-endian f32 grid (row-major, H*W entries); `sizes` maps
    triplet id to (H, W) for the scores form.
    """
    base = Path(path).parent
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "scores_path" in obj:
                if obj["id"] not in sizes:
                    raise UnknownTripletId(obj["id"])
                h, w = sizes[obj["id"]]
                raw = (base / obj["scores_path"]).read_bytes()
                n = h * w
                scores = np.array(
                    struct.unpack(f"<{n}f", raw[: 4 * n]), dtype=np.float64
                ).reshape(h, w)
                out.append(
                    Prediction(
                        triplet_id=obj["id"],
                        answer=obj["answer"],
                        mask_scores=scores,
                        scores_are_logits=bool(obj.get("logits", False)),
                    )
                )
            else:
                out.append(
                    Prediction(
                        triplet_id=obj["id"],
                        answer=obj["answer"],
                        mask=BinaryMask.from_json_obj(obj["mask"]),
                    )
                )
    return out
