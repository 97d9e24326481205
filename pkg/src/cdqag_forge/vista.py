"""Desk-scale forward pipeline for joint textual+visual change answering.

Small randomly initialized encoders stand in for the pretrained backbones:
a one-layer transformer text encoder and a shared-weight three-stage conv
backbone. The rest of the pipeline is the full architecture: language-guided
feature aggregation, a vision-language decoder, the soft question-answer
selector, a coarse-mask pixel decoder, a two-way-attention mask decoder, and
a text-conditioned dynamic convolution head plus MLP classifier.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ShapeMismatch, TokenOutOfVocab, TooLong
from .raster_io import ClassTaxonomy, MaskPair
from .rng import SplitMix64, derive_seed
from .triplet_engine import DEFAULT_TEMPLATE_BANK, QuestionType, answer_vocabulary

SOS = "<sos>"
EOC = "<eoc>"


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    channels: int = 32
    l_max: int = 15
    heads: int = 4
    n_vl_layers: int = 3
    k_dyn: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ShapeMismatch("channels must be divisible by heads")
        if self.height % 32 or self.width % 32:
            raise ShapeMismatch("input dims must be divisible by 32")

    @property
    def c_mask(self) -> int:
        return self.channels // 2


def build_text_vocab(taxonomy: ClassTaxonomy, bank: dict | None = None) -> list[str]:
    """Deterministic word vocabulary covering the template bank and classes."""
    bank = bank or DEFAULT_TEMPLATE_BANK
    words: set[str] = set()
    for templates in bank.values():
        for tpl in templates:
            text = tpl["text"]
            for t1w, t2w in [tpl["time_words"]]:
                words.update(_words(text.format(**{"class": "x", "time": t1w})))
                words.update(_words(text.format(**{"class": "x", "time": t2w})))
    for name in taxonomy.names:
        words.update(name.replace("_", " ").split())
    words.discard("x")
    return [SOS, EOC] + sorted(words)


def _words(question: str) -> list[str]:
    return re.findall(r"[a-z0-9-]+", question.lower())


def tokenize(question: str, vocab: list[str]) -> list[int]:
    index = {w: i for i, w in enumerate(vocab)}
    ids = []
    for word in _words(question):
        if word not in index:
            raise TokenOutOfVocab(f"unknown word {word!r}")
        ids.append(index[word])
    return ids


# --- parameter initialization ----------------------------------------------

def init_params(
    config: ModelConfig, n_text_vocab: int, n_answers: int
) -> dict:
    """Seeded parameters for every submodule, in a fixed creation order."""
    c = config.channels
    rng = SplitMix64(derive_seed(config.seed, "vista-params"))
    p: dict = {}
    p["text"] = {
        "emb": tc.init_array(rng, (n_text_vocab, c), c),
        "pos": tc.init_array(rng, (config.l_max, c), c),
        "attn": tc.init_mha(rng, c),
        "ln1": tc.init_layer_norm(c),
        "ffn": tc.init_ffn(rng, c),
        "ln2": tc.init_layer_norm(c),
    }
    p["backbone"] = {
        "stem1": tc.init_conv(rng, c, 3, 3),
        "stem2": tc.init_conv(rng, c, c, 3),
        "stem3": tc.init_conv(rng, c, c, 3),
        "stage4": tc.init_conv(rng, c, c, 3),
        "stage5": tc.init_conv(rng, c, c, 3),
        "fuse3": tc.init_conv(rng, c, 2 * c, 1),
        "fuse4": tc.init_conv(rng, c, 2 * c, 1),
        "fuse5": tc.init_conv(rng, c, 2 * c, 1),
    }
    p["lgfa"] = {
        "gate_conv": tc.init_conv(rng, c, c, 1),
        "gate_lin": tc.init_linear(rng, c, c),
        "lat4": tc.init_conv(rng, c, c, 1),
        "lat3": tc.init_conv(rng, c, c, 1),
        "smooth4": tc.init_conv(rng, c, c, 3),
        "smooth3": tc.init_conv(rng, c, c, 3),
        "agg5": tc.init_conv(rng, c, c, 1),
        "down3": tc.init_conv(rng, c, c, 3),
        "agg_out": tc.init_conv(rng, c, 3 * c, 1),
    }
    p["vl"] = [
        {
            "sa": tc.init_mha(rng, c),
            "ca": tc.init_mha(rng, c),
            "ffn": tc.init_ffn(rng, c),
        }
        for _ in range(config.n_vl_layers)
    ]
    p["pixel_decoder"] = {
        "pd1": tc.init_conv(rng, c, c, 3),
        "pd2": tc.init_conv(rng, c, c, 3),
        "proj": tc.init_conv(rng, 1, c, 1),
    }
    p["mask_decoder"] = {
        "embed": tc.init_conv(rng, c, 1, 1),
        "blocks": [
            {
                "p2i": tc.init_mha(rng, c),
                "i2p": tc.init_mha(rng, c),
                "ffn": tc.init_ffn(rng, c),
                "ln1": tc.init_layer_norm(c),
                "ln2": tc.init_layer_norm(c),
                "ln3": tc.init_layer_norm(c),
            }
            for _ in range(2)
        ],
        "up1": {"w": tc.init_array(rng, (c, config.c_mask, 2, 2), 4 * c)},
        "up2": {
            "w": tc.init_array(
                rng, (config.c_mask, config.c_mask, 2, 2), 4 * config.c_mask
            )
        },
    }
    n_dyn = config.c_mask * config.k_dyn * config.k_dyn + 1
    p["dyn_head"] = tc.init_linear(rng, c, n_dyn)
    p["classifier"] = {
        "fc1": tc.init_linear(rng, c, c),
        "fc2": tc.init_linear(rng, c, n_answers),
    }
    return p


def _params_as_list(node):
    if isinstance(node, list):
        return {str(i): v for i, v in enumerate(node)}
    return node


def params_for_dump(params: dict) -> dict:
    """Lists of blocks become numbered dict entries for the flat dump format."""
    out = {}
    for key, val in params.items():
        val = _params_as_list(val)
        if isinstance(val, dict):
            out[key] = params_for_dump(val)
        else:
            out[key] = val
    return out


def params_from_dump(params: dict) -> dict:
    """Inverse of params_for_dump for the vl / mask-decoder block lists."""
    out = dict(params)
    out["vl"] = [params["vl"][k] for k in sorted(params["vl"], key=int)]
    md = dict(params["mask_decoder"])
    md["blocks"] = [
        params["mask_decoder"]["blocks"][k]
        for k in sorted(params["mask_decoder"]["blocks"], key=int)
    ]
    out["mask_decoder"] = md
    return out


# --- pipeline stages --------------------------------------------------------

def encode_text(
    tokens: list[int], params: dict, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embed + one transformer layer; returns (F_w, F_s_sent, attention)."""
    if len(tokens) < 1:
        raise TooLong("need at least one token")
    if len(tokens) > config.l_max - 2:
        raise TooLong(f"{len(tokens)} tokens exceeds limit {config.l_max - 2}")
    tp = params["text"]
    n_vocab = tp["emb"].shape[0]
    ids = [0, *tokens, 1]  # wrap with <sos>/<eoc>
    if any(not 0 <= t < n_vocab for t in tokens):
        raise TokenOutOfVocab("token id outside embedding table")
    x = tp["emb"][ids] + tp["pos"][: len(ids)]
    a, attn = tc.mha(x, x, x, config.heads, tp["attn"])
    x = tc.layer_norm(x + a, **tp["ln1"])
    x = tc.layer_norm(x + tc.ffn(x, tp["ffn"]), **tp["ln2"])
    return x, x[-1], attn


def mask_pair_to_images(pair: MaskPair, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-id normalization into 3 identical channels in [0, 1]."""
    def conv(mask):
        v = mask.grid().astype(np.float64) / max(K - 1, 1)
        return np.stack([v, v, v])

    return conv(pair.t1), conv(pair.t2)


def _backbone(img: np.ndarray, bp: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = tc.relu(tc.conv2d(img, stride=2, pad=1, **bp["stem1"]))
    x = tc.relu(tc.conv2d(x, stride=2, pad=1, **bp["stem2"]))
    s3 = tc.relu(tc.conv2d(x, stride=2, pad=1, **bp["stem3"]))
    s4 = tc.relu(tc.conv2d(s3, stride=2, pad=1, **bp["stage4"]))
    s5 = tc.relu(tc.conv2d(s4, stride=2, pad=1, **bp["stage5"]))
    return s3, s4, s5


def encode_images(
    img1: np.ndarray, img2: np.ndarray, params: dict
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared-weight backbone on both images; per stage concat + 1x1 fuse."""
    if img1.shape != img2.shape or img1.ndim != 3 or img1.shape[0] != 3:
        raise ShapeMismatch(f"images {img1.shape} / {img2.shape}")
    bp = params["backbone"]
    a3, a4, a5 = _backbone(img1, bp)
    b3, b4, b5 = _backbone(img2, bp)
    f3 = tc.conv2d(np.concatenate([a3, b3]), **bp["fuse3"])
    f4 = tc.conv2d(np.concatenate([a4, b4]), **bp["fuse4"])
    f5 = tc.conv2d(np.concatenate([a5, b5]), **bp["fuse5"])
    return f3, f4, f5


def lgfa(
    f_c3: np.ndarray,
    f_c4: np.ndarray,
    f_c5: np.ndarray,
    f_s_sent: np.ndarray,
    params: dict,
) -> np.ndarray:
    """Sentence-gated fusion + FPN + stride-16 aggregation; returns (N, C)."""
    lp = params["lgfa"]
    gate = tc.matmul(f_s_sent[None, :], lp["gate_lin"]["w"])[0] + lp["gate_lin"]["b"]
    f_m5 = tc.conv2d(f_c5, **lp["gate_conv"]) * gate[:, None, None]
    # top-down pyramid
    p5 = f_m5
    p4 = tc.conv2d(
        tc.conv2d(f_c4, **lp["lat4"]) + tc.bilinear_upsample(p5, 2),
        pad=1,
        **lp["smooth4"],
    )
    p3 = tc.conv2d(
        tc.conv2d(f_c3, **lp["lat3"]) + tc.bilinear_upsample(p4, 2),
        pad=1,
        **lp["smooth3"],
    )
    # meet at stride 16
    t5 = tc.bilinear_upsample(tc.conv2d(p5, **lp["agg5"]), 2)
    t3 = tc.conv2d(p3, stride=2, pad=1, **lp["down3"])
    f_m = tc.conv2d(np.concatenate([t5, p4, t3]), **lp["agg_out"])
    c = f_m.shape[0]
    return f_m.reshape(c, -1).T  # (N, C), spatial row-major


def vl_decode(
    f_v: np.ndarray,
    f_w: np.ndarray,
    params: dict,
    config: ModelConfig,
    diagnostics: dict | None = None,
) -> np.ndarray:
    """Stacked vision-language decoder layers with multiplicative fusion."""
    x = f_v
    for i, layer in enumerate(params["vl"]):
        sa_out, sa_w = tc.mha(x, x, x, config.heads, layer["sa"])
        x_sa = x + sa_out
        ca_out, ca_w = tc.mha(x_sa, f_w, f_w, config.heads, layer["ca"])
        f_vl_mid = ca_out * x_sa
        x = tc.ffn(f_vl_mid * x_sa, layer["ffn"]) + f_vl_mid
        if diagnostics is not None:
            diagnostics.setdefault("attention", []).append(("vl_sa", i, sa_w))
            diagnostics["attention"].append(("vl_ca", i, ca_w))
    return x


def qa_select(
    f_vl: np.ndarray, f_w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Soft blend of pooled multimodal and word features; alpha + beta == 1."""
    v = f_vl.mean(axis=0)
    w = f_w.mean(axis=0)
    # clamp the exponent inputs; e^v / (e^v + e^w) == sigmoid(v - w)
    alpha = tc.sigmoid(np.clip(v, -30, 30) - np.clip(w, -30, 30))
    beta = 1.0 - alpha
    f_sel = alpha * v + beta * w
    return alpha, beta, f_sel


def coarse_mask(
    f_sel: np.ndarray, f_vl: np.ndarray, params: dict, hw: tuple[int, int]
) -> np.ndarray:
    """Pixel-decode the multimodal map, gate channels by sigmoid(F_sel)."""
    pp = params["pixel_decoder"]
    h16, w16 = hw
    c = f_vl.shape[1]
    fmap = f_vl.T.reshape(c, h16, w16)
    x = tc.conv2d(tc.relu(tc.conv2d(fmap, pad=1, **pp["pd1"])), pad=1, **pp["pd2"])
    gated = tc.sigmoid(f_sel)[:, None, None] * x
    return tc.conv2d(gated, **pp["proj"])  # (1, H/16, W/16)


def mask_decode(
    m_c: np.ndarray,
    f_v: np.ndarray,
    params: dict,
    config: ModelConfig,
    hw: tuple[int, int],
    diagnostics: dict | None = None,
) -> np.ndarray:
    """Two two-way attention blocks + two deconv stages up to stride 4."""
    mp = params["mask_decoder"]
    h16, w16 = hw
    c = f_v.shape[1]
    prompt = f_v + tc.conv2d(m_c, **mp["embed"]).reshape(c, -1).T
    img = f_v
    for i, block in enumerate(mp["blocks"]):
        a, w_p2i = tc.mha(prompt, img, img, config.heads, block["p2i"])
        prompt = tc.layer_norm(prompt + a, **block["ln1"])
        b, w_i2p = tc.mha(img, prompt, prompt, config.heads, block["i2p"])
        img = tc.layer_norm(img + b, **block["ln2"])
        prompt = tc.layer_norm(prompt + tc.ffn(prompt, block["ffn"]), **block["ln3"])
        if diagnostics is not None:
            diagnostics.setdefault("attention", []).append(("md_p2i", i, w_p2i))
            diagnostics["attention"].append(("md_i2p", i, w_i2p))
    fmap = img.T.reshape(c, h16, w16)
    x = tc.relu(tc.deconv2d(fmap, mp["up1"]["w"], stride=2))
    return tc.deconv2d(x, mp["up2"]["w"], stride=2)  # (C/2, H/4, W/4)


def dynamic_head(
    f_sel: np.ndarray,
    f_mask: np.ndarray,
    params: dict,
    config: ModelConfig,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Kernel+bias predicted from F_sel, applied as a conv, upsampled x4.

    Returns (full-resolution logits, kernel vector, bias); the kernel vector
    doubles as the textual-answer embedding for the contrastive loss.
    """
    dp = params["dyn_head"]
    z = tc.matmul(f_sel[None, :], dp["w"])[0] + dp["b"]
    k = config.k_dyn
    kernel = z[:-1].reshape(1, config.c_mask, k, k)
    bias = float(z[-1])
    logits4 = tc.conv2d(f_mask, kernel, np.array([bias]), pad=k // 2)
    return tc.bilinear_upsample(logits4, 4), z[:-1], bias


def classify(f_sel: np.ndarray, params: dict) -> np.ndarray:
    """Two-layer MLP + softmax over the closed answer vocabulary."""
    cp = params["classifier"]
    h = tc.relu(tc.matmul(f_sel[None, :], cp["fc1"]["w"])[0] + cp["fc1"]["b"])
    logits = tc.matmul(h[None, :], cp["fc2"]["w"])[0] + cp["fc2"]["b"]
    return tc.softmax(logits)


@dataclass
class ForwardResult:
    answer_probs: np.ndarray
    mask_logits: np.ndarray  # (1, H, W)
    f_sel: np.ndarray
    f_mask: np.ndarray  # (C/2, H/4, W/4)
    dyn_kernel: np.ndarray
    dyn_bias: float
    coarse: np.ndarray
    diagnostics: dict


def forward(
    img1: np.ndarray,
    img2: np.ndarray,
    tokens: list[int],
    params: dict,
    config: ModelConfig,
) -> ForwardResult:
    """Full pipeline; diagnostics records every intermediate shape and all
    attention weights."""
    diag: dict = {"shapes": {}, "attention": []}
    f_w, f_s_sent, text_attn = encode_text(tokens, params, config)
    diag["attention"].append(("text_sa", 0, text_attn))
    f_c3, f_c4, f_c5 = encode_images(img1, img2, params)
    f_v = lgfa(f_c3, f_c4, f_c5, f_s_sent, params)
    h16, w16 = img1.shape[1] // 16, img1.shape[2] // 16
    f_vl = vl_decode(f_v, f_w, params, config, diag)
    alpha, beta, f_sel = qa_select(f_vl, f_w)
    m_c = coarse_mask(f_sel, f_vl, params, (h16, w16))
    f_mask = mask_decode(m_c, f_v, params, config, (h16, w16), diag)
    mask_logits, dyn_kernel, dyn_bias = dynamic_head(f_sel, f_mask, params, config)
    answer_probs = classify(f_sel, params)
    diag["shapes"] = {
        "F_w": f_w.shape,
        "F_s_sent": f_s_sent.shape,
        "F_c3": f_c3.shape,
        "F_c4": f_c4.shape,
        "F_c5": f_c5.shape,
        "F_v": f_v.shape,
        "F_vl": f_vl.shape,
        "alpha": alpha.shape,
        "F_sel": f_sel.shape,
        "M_c": m_c.shape,
        "F_mask": f_mask.shape,
        "mask_logits": mask_logits.shape,
        "answer_probs": answer_probs.shape,
    }
    tc.check_finite(mask_logits, "mask logits")
    return ForwardResult(
        answer_probs=answer_probs,
        mask_logits=mask_logits,
        f_sel=f_sel,
        f_mask=f_mask,
        dyn_kernel=dyn_kernel,
        dyn_bias=dyn_bias,
        coarse=m_c,
        diagnostics=diag,
    )


def forward_pair(
    pair: MaskPair,
    question: str,
    params: dict,
    config: ModelConfig,
    taxonomy: ClassTaxonomy,
    bank: dict | None = None,
) -> tuple[str, ForwardResult]:
    """Convenience wrapper: tokenize a question, run forward, name the answer."""
    vocab = build_text_vocab(taxonomy, bank)
    tokens = tokenize(question, vocab)
    img1, img2 = mask_pair_to_images(pair, taxonomy.K)
    result = forward(img1, img2, tokens, params, config)
    answers = answer_vocabulary(taxonomy)
    best = answers[int(np.argmax(result.answer_probs))]
    return best, result
