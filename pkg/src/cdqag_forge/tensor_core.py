"""Dense float64 tensor primitives for the model: matmul, conv, attention,
FFN, normalization, and bilinear resampling.

All ops are pure, double precision, and deterministic for fixed inputs.
Parameters are plain dicts of numpy arrays; init is a seeded portable
uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) draw.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadFactor,
    BadStride,
    HeadMismatch,
    NonFinite,
    ShapeMismatch,
)
from .rng import SplitMix64


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFinite(f"non-finite values in {where}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    check_finite(x, "sigmoid input")
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    check_finite(x, "softmax input")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    check_finite(x, "layer_norm input")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Cross-correlation of (C_in,H,W) with (C_out,C_in,K,K)."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"conv2d x{x.shape} w{w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeMismatch("conv2d kernel must be square")
    if stride < 1:
        raise BadStride(f"stride {stride}")
    k = w.shape[2]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    _, h, ww = x.shape
    if h < k or ww < k:
        raise ShapeMismatch("input smaller than kernel")
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C_in, H', W', K, K)
    out = np.einsum("cijyx,ocyx->oij", win, w, optimize=True)
    if b is not None:
        out = out + b[:, None, None]
    return out


def deconv2d(x: np.ndarray, w: np.ndarray, stride: int = 2) -> np.ndarray:
    """Transposed convolution; w has shape (C_in, C_out, K, K).

    out[o, s*i+ky, s*j+kx] += w[c, o, ky, kx] * x[c, i, j]; with K == stride
    and no padding the spatial dims multiply by `stride`. This is the exact
    adjoint of conv2d(stride=s, pad=0) under the shared kernel.
    """
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[0]:
        raise ShapeMismatch(f"deconv2d x{x.shape} w{w.shape}")
    ci, h, ww = x.shape
    _, co, k, _ = w.shape
    oh = (h - 1) * stride + k
    ow = (ww - 1) * stride + k
    out = np.zeros((co, oh, ow), dtype=np.float64)
    contrib = np.einsum("cij,coyx->oijyx", x, w, optimize=True)
    for ky in range(k):
        for kx in range(k):
            out[:, ky : ky + (h - 1) * stride + 1 : stride,
                kx : kx + (ww - 1) * stride + 1 : stride] += contrib[
                :, :, :, ky, kx
            ]
    return out


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, c = x.shape
    return x.reshape(n, heads, c // heads).transpose(1, 0, 2)


def mha(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    params: dict,
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head scaled dot-product attention.

    q is (N_q, C), k and v are (N_k, C); returns the (N_q, C) output and the
    (heads, N_q, N_k) attention weights. Self-attention is mha(x, x, x).
    """
    c = q.shape[1]
    if c % heads != 0:
        raise HeadMismatch(f"C={c} not divisible by heads={heads}")
    if k.shape != v.shape or k.shape[1] != c:
        raise ShapeMismatch(f"mha q{q.shape} k{k.shape} v{v.shape}")
    qp = split_heads(matmul(q, params["wq"]) + params["bq"], heads)
    kp = split_heads(matmul(k, params["wk"]) + params["bk"], heads)
    vp = split_heads(matmul(v, params["wv"]) + params["bv"], heads)
    scale = 1.0 / np.sqrt(c // heads)
    logits = np.einsum("hqd,hkd->hqk", qp, kp, optimize=True) * scale
    weights = softmax(logits, axis=-1)
    ctx = np.einsum("hqk,hkd->hqd", weights, vp, optimize=True)
    merged = ctx.transpose(1, 0, 2).reshape(q.shape[0], c)
    out = matmul(merged, params["wo"]) + params["bo"]
    return check_finite(out, "mha output"), weights


def ffn(x: np.ndarray, params: dict) -> np.ndarray:
    """Linear -> rectifier -> Linear, hidden dim 4C."""
    h = relu(matmul(x, params["w1"]) + params["b1"])
    return matmul(h, params["w2"]) + params["b2"]


def interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-stochastic 1D bilinear interpolation matrix (align-corners false)."""
    if factor < 1:
        raise BadFactor(f"factor {factor}")
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        mat[i, lo_c] += 1.0 - frac
        mat[i, hi_c] += frac
    return mat


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Upsample (C,h,w) to (C, factor*h, factor*w); constant in, constant out."""
    if x.ndim != 3:
        raise ShapeMismatch(f"bilinear_upsample expects 3D, got {x.shape}")
    if factor == 1:
        return x.copy()
    ah = interp_matrix(x.shape[1], factor)
    aw = interp_matrix(x.shape[2], factor)
    return np.einsum("ij,cjk,lk->cil", ah, x, aw, optimize=True)


def bilinear_upsample_adjoint(g: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of bilinear_upsample: maps (C,fh,fw) grads to (C,h,w)."""
    if factor == 1:
        return g.copy()
    ah = interp_matrix(g.shape[1] // factor, factor)
    aw = interp_matrix(g.shape[2] // factor, factor)
    return np.einsum("ji,cjk,kl->cil", ah, g, aw, optimize=True)


# --- parameter plumbing -----------------------------------------------------

def init_array(rng: SplitMix64, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    flat = np.array(
        [rng.uniform(-bound, bound) for _ in range(int(np.prod(shape)))],
        dtype=np.float64,
    )
    return flat.reshape(shape)


def init_linear(rng: SplitMix64, n_in: int, n_out: int) -> dict:
    return {
        "w": init_array(rng, (n_in, n_out), n_in),
        "b": init_array(rng, (n_out,), n_in),
    }


def init_mha(rng: SplitMix64, c: int) -> dict:
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = init_array(rng, (c, c), c)
    for name in ("bq", "bk", "bv", "bo"):
        p[name] = init_array(rng, (c,), c)
    return p


def init_ffn(rng: SplitMix64, c: int) -> dict:
    return {
        "w1": init_array(rng, (c, 4 * c), c),
        "b1": init_array(rng, (4 * c,), c),
        "w2": init_array(rng, (4 * c, c), 4 * c),
        "b2": init_array(rng, (c,), 4 * c),
    }


def init_layer_norm(c: int) -> dict:
    return {"gain": np.ones(c), "bias": np.zeros(c)}


def init_conv(
    rng: SplitMix64, c_out: int, c_in: int, k: int, bias: bool = True
) -> dict:
    fan_in = c_in * k * k
    p = {"w": init_array(rng, (c_out, c_in, k, k), fan_in)}
    if bias:
        p["b"] = init_array(rng, (c_out,), fan_in)
    return p


def flatten_params(params: dict, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for key, val in params.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(val, dict):
            out.update(flatten_params(val, name))
        else:
            out[name] = val
    return out


def dump_params(params: dict, manifest_path: str | Path, bin_path: str | Path) -> None:
    """Write a JSON shape manifest plus a flat little-endian f64 blob."""
    flat = flatten_params(params)
    manifest = {name: list(arr.shape) for name, arr in flat.items()}
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    with open(bin_path, "wb") as f:
        for name in sorted(flat):
            f.write(flat[name].astype("<f8").tobytes())


def load_params(manifest_path: str | Path, bin_path: str | Path) -> dict:
    with open(manifest_path) as f:
        manifest = json.load(f)
    raw = Path(bin_path).read_bytes()
    params: dict = {}
    offset = 0
    for name in sorted(manifest):
        shape = tuple(manifest[name])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            raw, dtype="<f8", count=n, offset=offset
        ).reshape(shape).astype(np.float64)
        offset += 8 * n
        node = params
        parts = name.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = arr
    return params
