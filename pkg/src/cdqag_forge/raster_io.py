"""Semantic mask pairs on disk and run-length coded binary masks.

Mask files are 8-bit PGM (binary P5 or ASCII P2) whose pixel values are
class ids; a `taxonomy.json` sidecar supplies the class names. Binary
grounding masks are stored as uncompressed alternating-run RLE starting
with the 0-count, row-major.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ClassIdOutOfRange,
    EmptyImage,
    InvalidRuns,
    MalformedFile,
    SizeMismatch,
)


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered land-cover class names; index i is the class id of names[i]."""

    names: tuple[str, ...]

    def __post_init__(self):
        if not (2 <= len(self.names) <= 255):
            raise ValueError("taxonomy needs 2..255 classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        for name in self.names:
            if not re.fullmatch(r"[a-z][a-z0-9_]*", name):
                raise ValueError(f"bad class name: {name!r}")

    @property
    def K(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def from_json(cls, path: str | Path) -> "ClassTaxonomy":
        with open(path) as f:
            data = json.load(f)
        return cls(tuple(data["names"]))

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump({"names": list(self.names)}, f, indent=2)


#: Shipped 10-class placeholder taxonomy (configurable, not canonical).
DEFAULT_TAXONOMY = ClassTaxonomy(
    (
        "background",
        "building",
        "low_vegetation",
        "tree",
        "water",
        "playground",
        "road",
        "bare_ground",
        "nvg_surface",
        "other",
    )
)


@dataclass(frozen=True)
class SemanticMask:
    """Per-pixel class-id grid; labels is row-major, pixel (r,c) at r*width+c."""

    width: int
    height: int
    labels: np.ndarray  # uint8, flat, length width*height

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise EmptyImage("mask dimensions must be >= 1")
        if self.labels.shape != (self.width * self.height,):
            raise SizeMismatch("labels length must equal width*height")

    def grid(self) -> np.ndarray:
        return self.labels.reshape(self.height, self.width)

    def __eq__(self, other):
        return (
            isinstance(other, SemanticMask)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class MaskPair:
    """Semantic masks for times T1 and T2 over the same footprint."""

    pair_id: str
    t1: SemanticMask
    t2: SemanticMask

    def __post_init__(self):
        if (self.t1.width, self.t1.height) != (self.t2.width, self.t2.height):
            raise SizeMismatch("t1 and t2 dimensions differ")

    @property
    def width(self) -> int:
        return self.t1.width

    @property
    def height(self) -> int:
        return self.t1.height


@dataclass(frozen=True)
class BinaryMask:
    """Alternating-run RLE of a binary grid, starting with the 0-run count."""

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if sum(self.runs) != self.width * self.height:
            raise InvalidRuns("run counts must sum to width*height")
        if any(r < 0 for r in self.runs):
            raise InvalidRuns("negative run count")
        for i, r in enumerate(self.runs):
            if r == 0 and i != 0:
                raise InvalidRuns("zero-length run allowed only at the start")

    def popcount(self) -> int:
        return sum(self.runs[1::2])

    def to_json_obj(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.runs)}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "BinaryMask":
        h, w = obj["size"]
        return cls(width=w, height=h, runs=tuple(obj["counts"]))

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(width=width, height=height, runs=(width * height,))


def rle_encode(grid: np.ndarray, width: int, height: int) -> BinaryMask:
    """Encode a row-major 0/1 sequence; canonical (unique per grid)."""
    grid = np.asarray(grid).ravel()
    if grid.size != width * height:
        raise SizeMismatch("grid length must equal width*height")
    bits = (grid != 0).astype(np.uint8)
    runs: list[int] = []
    # boundaries between unequal neighbours
    change = np.flatnonzero(np.diff(bits)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [bits.size]))
    if bits[0] == 1:
        runs.append(0)
    runs.extend(int(e - s) for s, e in zip(starts, ends))
    return BinaryMask(width=width, height=height, runs=tuple(runs))


def rle_decode(mask: BinaryMask) -> np.ndarray:
    """Decode back to a flat row-major uint8 0/1 array; inverse of rle_encode."""
    out = np.zeros(mask.width * mask.height, dtype=np.uint8)
    pos = 0
    val = 0
    for run in mask.runs:
        if val:
            out[pos : pos + run] = 1
        pos += run
        val ^= 1
    return out


def _read_pgm_tokens(raw: bytes, n: int) -> list[int]:
    """First n whitespace-separated ASCII integer tokens (comments stripped)."""
    text = re.sub(rb"#[^\n]*", b" ", raw)
    tokens = text.split()
    vals = []
    for tok in tokens:
        if len(vals) == n:
            break
        if not tok.isdigit():
            raise MalformedFile(f"non-numeric token {tok!r} in PGM header/data")
        vals.append(int(tok))
    if len(vals) < n:
        raise MalformedFile("truncated PGM")
    return vals


def load_mask(path: str | Path, taxonomy: ClassTaxonomy) -> SemanticMask:
    """Load an 8-bit grayscale PGM whose pixel values are class ids."""
    raw = Path(path).read_bytes()
    if len(raw) < 2:
        raise MalformedFile("file too short for a PGM")
    magic = raw[:2]
    if magic not in (b"P2", b"P5"):
        raise MalformedFile(f"bad magic {magic!r}, expected P2 or P5")
    body = raw[2:]
    if magic == b"P2":
        vals = _read_pgm_tokens(body, 3)
        width, height, maxval = vals
        _check_header(width, height, maxval)
        pixels = _read_pgm_tokens(body, 3 + width * height)[3:]
        labels = np.array(pixels, dtype=np.int64)
    else:
        # P5: header tokens then a single whitespace byte, then raw pixels
        text = re.sub(rb"#[^\n]*", b" ", body)
        m = re.match(rb"\s+(\d+)\s+(\d+)\s+(\d+)", text)
        if m is None:
            raise MalformedFile("bad P5 header")
        width, height, maxval = (int(g) for g in m.groups())
        _check_header(width, height, maxval)
        # locate pixel data in the original bytes: after the maxval token
        # and exactly one whitespace byte
        hdr = re.match(
            rb"(?:\s|#[^\n]*\n)*\d+(?:\s|#[^\n]*\n)+\d+(?:\s|#[^\n]*\n)+\d+\s",
            body,
        )
        if hdr is None:
            raise MalformedFile("bad P5 header")
        data = body[hdr.end() :]
        if len(data) < width * height:
            raise MalformedFile("truncated P5 pixel data")
        labels = np.frombuffer(data[: width * height], dtype=np.uint8).astype(
            np.int64
        )
    if labels.size and int(labels.max()) >= taxonomy.K:
        raise ClassIdOutOfRange(
            f"pixel value {int(labels.max())} >= K={taxonomy.K}"
        )
    return SemanticMask(
        width=width, height=height, labels=labels.astype(np.uint8)
    )


def _check_header(width: int, height: int, maxval: int) -> None:
    if width < 1 or height < 1:
        raise EmptyImage("zero-sized image")
    if not (0 < maxval <= 255):
        raise MalformedFile(f"maxval {maxval} not in 1..255 (8-bit only)")


def save_mask(mask: SemanticMask, path: str | Path, binary: bool = True) -> None:
    """Write a SemanticMask as PGM (P5 by default, P2 if binary=False)."""
    if binary:
        header = f"P5\n{mask.width} {mask.height}\n255\n".encode()
        Path(path).write_bytes(header + mask.labels.astype(np.uint8).tobytes())
    else:
        rows = mask.grid()
        lines = [f"P2\n{mask.width} {mask.height}\n255"]
        lines.extend(" ".join(str(int(v)) for v in row) for row in rows)
        Path(path).write_text("\n".join(lines) + "\n")


def load_pair(
    pairs_dir: str | Path, pair_id: str, taxonomy: ClassTaxonomy
) -> MaskPair:
    """Load `<pair_id>_t1.pgm` / `<pair_id>_t2.pgm` from a directory."""
    base = Path(pairs_dir)
    t1 = load_mask(base / f"{pair_id}_t1.pgm", taxonomy)
    t2 = load_mask(base / f"{pair_id}_t2.pgm", taxonomy)
    return MaskPair(pair_id=pair_id, t1=t1, t2=t2)


def discover_pairs(pairs_dir: str | Path) -> list[str]:
    """Sorted pair_ids for which both _t1.pgm and _t2.pgm exist."""
    base = Path(pairs_dir)
    ids = sorted(
        p.name[: -len("_t1.pgm")] for p in base.glob("*_t1.pgm")
    )
    return [pid for pid in ids if (base / f"{pid}_t2.pgm").exists()]
