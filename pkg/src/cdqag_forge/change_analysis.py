"""Class-transition statistics and changed-pixel masks for a mask pair.

Everything here is exact integer arithmetic on per-pixel class labels;
"change" is strict per-pixel class inequality with no cleaning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ClassIdOutOfRange, DimensionMismatch, SameClass
from .raster_io import BinaryMask, MaskPair, rle_encode

Role = Literal["source", "target", "either"]


@dataclass(frozen=True)
class TransitionMatrix:
    """counts[i][j] = #pixels with class i at T1 and class j at T2."""

    K: int
    counts: np.ndarray  # (K, K) int64
    total: int

    def __post_init__(self):
        if self.counts.shape != (self.K, self.K):
            raise DimensionMismatch("counts must be K x K")
        if int(self.counts.sum()) != self.total:
            raise DimensionMismatch("counts must sum to total")
        if (self.counts < 0).any():
            raise DimensionMismatch("negative transition count")


@dataclass(frozen=True)
class ClassChangeSummary:
    """Per-class areas and gross gained/lost/changed pixel counts."""

    area_t1: np.ndarray
    area_t2: np.ndarray
    gained: np.ndarray
    lost: np.ndarray
    changed: np.ndarray
    net: np.ndarray  # area_t2 - area_t1


def transition_matrix(pair: MaskPair, K: int) -> TransitionMatrix:
    """Count i->j pixel transitions by joint histogram."""
    a = pair.t1.labels.astype(np.int64)
    b = pair.t2.labels.astype(np.int64)
    if a.max(initial=0) >= K or b.max(initial=0) >= K:
        raise ClassIdOutOfRange("label >= K")
    joint = np.bincount(a * K + b, minlength=K * K).reshape(K, K)
    return TransitionMatrix(K=K, counts=joint, total=int(a.size))


def summarize(tm: TransitionMatrix) -> ClassChangeSummary:
    area_t1 = tm.counts.sum(axis=1)
    area_t2 = tm.counts.sum(axis=0)
    diag = np.diag(tm.counts)
    gained = area_t2 - diag
    lost = area_t1 - diag
    return ClassChangeSummary(
        area_t1=area_t1,
        area_t2=area_t2,
        gained=gained,
        lost=lost,
        changed=gained + lost,
        net=area_t2 - area_t1,
    )


def _changed_bits(pair: MaskPair, k: int, role: Role) -> np.ndarray:
    a = pair.t1.labels
    b = pair.t2.labels
    if role == "source":
        return (a == k) & (b != k)
    if role == "target":
        return (b == k) & (a != k)
    if role == "either":
        return ((a == k) | (b == k)) & (a != b)
    raise ValueError(f"bad role {role!r}")


def changed_mask(pair: MaskPair, k: int, role: Role, K: int) -> BinaryMask:
    """Pixels leaving (source), entering (target), or touching (either) class k."""
    if not 0 <= k < K:
        raise ClassIdOutOfRange(f"class id {k} >= K={K}")
    bits = _changed_bits(pair, k, role)
    return rle_encode(bits, pair.width, pair.height)


def transition_mask(pair: MaskPair, i: int, j: int, K: int) -> BinaryMask:
    """Pixels with class i at T1 and class j at T2."""
    if not (0 <= i < K and 0 <= j < K):
        raise ClassIdOutOfRange(f"class id out of range (K={K})")
    if i == j:
        raise SameClass("i and j must differ")
    bits = (pair.t1.labels == i) & (pair.t2.labels == j)
    return rle_encode(bits, pair.width, pair.height)
