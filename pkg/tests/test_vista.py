import numpy as np
import pytest

from cdqag_forge.errors import ShapeMismatch, TokenOutOfVocab, TooLong
from cdqag_forge.raster_io import ClassTaxonomy, MaskPair, SemanticMask
from cdqag_forge.rng import SplitMix64
from cdqag_forge.tensor_core import init_array
from cdqag_forge.triplet_engine import answer_vocabulary
from cdqag_forge.vista import (
    EOC,
    SOS,
    ModelConfig,
    build_text_vocab,
    classify,
    dynamic_head,
    encode_images,
    encode_text,
    forward,
    forward_pair,
    init_params,
    lgfa,
    mask_pair_to_images,
    params_for_dump,
    params_from_dump,
    qa_select,
    tokenize,
    vl_decode,
)

TAX3 = ClassTaxonomy(("background", "building", "water"))


def small_config(seed=0, h=32, w=32, c=16):
    return ModelConfig(height=h, width=w, channels=c, seed=seed)


def make_model(seed=0, h=32, w=32, c=16, tax=TAX3):
    config = small_config(seed, h, w, c)
    vocab = build_text_vocab(tax)
    answers = answer_vocabulary(tax)
    params = init_params(config, len(vocab), len(answers))
    return config, vocab, params


def random_images(rng, h, w):
    a = np.array([rng.uniform(0, 1) for _ in range(h * w)]).reshape(1, h, w)
    b = np.array([rng.uniform(0, 1) for _ in range(h * w)]).reshape(1, h, w)
    return np.repeat(a, 3, axis=0), np.repeat(b, 3, axis=0)


class TestVocabAndTokens:
    def test_specials_first_rest_sorted(self):
        vocab = build_text_vocab(TAX3)
        assert vocab[:2] == [SOS, EOC]
        assert vocab[2:] == sorted(vocab[2:])

    def test_tokenize_known_question(self):
        vocab = build_text_vocab(TAX3)
        ids = tokenize("What is the smallest change in the second image?", vocab)
        assert len(ids) == 9
        assert all(2 <= i < len(vocab) for i in ids)

    def test_tokenize_rejects_unknown(self):
        with pytest.raises(TokenOutOfVocab):
            tokenize("what about zebras here today?", build_text_vocab(TAX3))

    def test_config_validation(self):
        with pytest.raises(ShapeMismatch):
            ModelConfig(channels=30)
        with pytest.raises(ShapeMismatch):
            ModelConfig(height=48)


class TestTextEncoder:
    def test_sentence_vector_is_last_row(self):
        config, vocab, params = make_model()
        f_w, f_s, _ = encode_text([2, 3, 4], params, config)
        assert f_w.shape == (5, config.channels)  # sos + 3 + eoc
        assert (f_s == f_w[-1]).all()

    def test_too_long_rejected(self):
        config, vocab, params = make_model()
        with pytest.raises(TooLong):
            encode_text(list(range(2, 2 + 14)), params, config)
        with pytest.raises(TooLong):
            encode_text([], params, config)

    def test_attention_rows_sum_to_one(self):
        config, vocab, params = make_model()
        _, _, attn = encode_text([2, 3, 4, 5], params, config)
        assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-9)


class TestImageEncoder:
    def test_stage_strides(self):
        config, _, params = make_model(h=64, w=64, c=16)
        rng = SplitMix64(1)
        img1, img2 = random_images(rng, 64, 64)
        f3, f4, f5 = encode_images(img1, img2, params)
        assert f3.shape == (16, 8, 8)
        assert f4.shape == (16, 4, 4)
        assert f5.shape == (16, 2, 2)

    def test_identical_images_symmetric_under_swap(self):
        config, _, params = make_model()
        rng = SplitMix64(2)
        img, _ = random_images(rng, 32, 32)
        a = encode_images(img, img, params)
        b = encode_images(img.copy(), img.copy(), params)
        for x, y in zip(a, b):
            assert np.allclose(x, y)

    def test_rejects_mismatched_shapes(self):
        config, _, params = make_model()
        with pytest.raises(ShapeMismatch):
            encode_images(np.zeros((3, 32, 32)), np.zeros((3, 64, 64)), params)

    def test_mask_pair_to_images_normalization(self):
        t1 = SemanticMask(2, 2, np.array([0, 1, 2, 2], dtype=np.uint8))
        pair = MaskPair("p", t1, t1)
        img1, img2 = mask_pair_to_images(pair, 3)
        assert img1.shape == (3, 2, 2)
        assert img1[0].flatten().tolist() == [0.0, 0.5, 1.0, 1.0]
        assert (img1 == img2).all()
        assert (img1[0] == img1[1]).all() and (img1[0] == img1[2]).all()


class TestFusion:
    def test_zero_gate_zeroes_language_path(self):
        config, vocab, params = make_model()
        rng = SplitMix64(3)
        img1, img2 = random_images(rng, 32, 32)
        f3, f4, f5 = encode_images(img1, img2, params)
        lp = params["lgfa"]
        lp["gate_lin"]["w"][:] = 0.0
        lp["gate_lin"]["b"][:] = 0.0
        f_s = init_array(SplitMix64(4), (config.channels,), 1)
        f_v = lgfa(f3, f4, f5, f_s, params)
        # with a zero gate the top pyramid level vanishes; output must not
        # depend on the sentence vector at all
        f_v2 = lgfa(f3, f4, f5, f_s * 7.0 + 1.0, params)
        assert np.allclose(f_v, f_v2)

    def test_gate_linearity_with_zero_bias(self):
        config, vocab, params = make_model()
        rng = SplitMix64(5)
        img1, img2 = random_images(rng, 32, 32)
        f3, f4, f5 = encode_images(img1, img2, params)
        z3, z4 = np.zeros_like(f3), np.zeros_like(f4)
        lp = params["lgfa"]
        lp["gate_lin"]["b"][:] = 0.0
        for name in ("lat3", "lat4", "smooth3", "smooth4", "down3", "agg5",
                     "agg_out", "gate_conv"):
            lp[name]["b"][:] = 0.0
        f_s = init_array(SplitMix64(6), (config.channels,), 1)
        # with zeroed lateral inputs everything downstream of the gate is
        # linear in the gate vector, so doubling f_s doubles the output
        a = lgfa(z3, z4, f5, f_s, params)
        b = lgfa(z3, z4, f5, 2.0 * f_s, params)
        assert np.allclose(b, 2.0 * a, atol=1e-10)

    def test_output_is_n_by_c(self):
        config, vocab, params = make_model(h=64, w=64, c=16)
        rng = SplitMix64(7)
        img1, img2 = random_images(rng, 64, 64)
        f3, f4, f5 = encode_images(img1, img2, params)
        f_s = init_array(SplitMix64(8), (16,), 1)
        f_v = lgfa(f3, f4, f5, f_s, params)
        assert f_v.shape == (16, 16)  # (H/16 * W/16, C)


class TestVlDecoder:
    def test_single_token_ca_weight_is_one(self):
        config, vocab, params = make_model()
        rng = SplitMix64(9)
        f_v = init_array(rng, (4, config.channels), 1)
        f_w = init_array(rng, (1, config.channels), 1)
        diag: dict = {}
        vl_decode(f_v, f_w, params, config, diag)
        ca = [w for name, _, w in diag["attention"] if name == "vl_ca"]
        assert len(ca) == config.n_vl_layers
        for w in ca:
            assert np.allclose(w, 1.0)

    def test_layer_count_and_shape(self):
        config, vocab, params = make_model()
        rng = SplitMix64(10)
        f_v = init_array(rng, (4, config.channels), 1)
        f_w = init_array(rng, (6, config.channels), 1)
        diag: dict = {}
        out = vl_decode(f_v, f_w, params, config, diag)
        assert out.shape == f_v.shape
        assert len(diag["attention"]) == 2 * config.n_vl_layers


class TestSelector:
    def test_alpha_beta_sum_exactly_one(self):
        rng = SplitMix64(11)
        for _ in range(1000):
            f_vl = init_array(rng, (5, 8), 1) * 100
            f_w = init_array(rng, (3, 8), 1) * 100
            alpha, beta, _ = qa_select(f_vl, f_w)
            assert np.abs(alpha + beta - 1.0).max() < 1e-12
            assert (alpha >= 0).all() and (alpha <= 1).all()

    def test_equal_pools_give_half_and_passthrough(self):
        x = np.tile(np.arange(8.0), (4, 1))
        alpha, beta, f_sel = qa_select(x, x.copy())
        assert np.allclose(alpha, 0.5)
        assert np.allclose(f_sel, x.mean(axis=0))

    def test_extreme_inputs_stay_finite(self):
        f_vl = np.full((2, 4), 1e6)
        f_w = np.full((3, 4), -1e6)
        alpha, beta, f_sel = qa_select(f_vl, f_w)
        assert np.isfinite(f_sel).all()
        assert np.allclose(alpha, 1.0 / (1.0 + np.exp(-60.0)))


class TestHeads:
    def test_dynamic_head_is_per_pixel_dot_product(self):
        config, vocab, params = make_model()
        rng = SplitMix64(12)
        f_sel = init_array(rng, (config.channels,), 1)
        f_mask = init_array(rng, (config.c_mask, 8, 8), 1)
        logits, kernel, bias = dynamic_head(f_sel, f_mask, params, config)
        assert logits.shape == (1, 32, 32)
        assert kernel.shape == (config.c_mask,)
        # before upsampling, each stride-4 logit is kernel . features + bias
        want00 = float(kernel @ f_mask[:, 0, 0]) + bias
        # corner of the x4 bilinear map replicates the corner source value
        assert abs(logits[0, 0, 0] - want00) < 1e-10

    def test_dynamic_head_zero_linear_gives_zero(self):
        config, vocab, params = make_model()
        params["dyn_head"]["w"][:] = 0.0
        params["dyn_head"]["b"][:] = 0.0
        rng = SplitMix64(13)
        f_sel = init_array(rng, (config.channels,), 1)
        f_mask = init_array(rng, (config.c_mask, 8, 8), 1)
        logits, kernel, bias = dynamic_head(f_sel, f_mask, params, config)
        assert np.allclose(logits, 0.0) and bias == 0.0

    def test_classifier_zero_weights_uniform(self):
        config, vocab, params = make_model()
        for lin in ("fc1", "fc2"):
            params["classifier"][lin]["w"][:] = 0.0
            params["classifier"][lin]["b"][:] = 0.0
        probs = classify(np.ones(config.channels), params)
        assert np.allclose(probs, 1.0 / probs.size, atol=1e-15)

    def test_classifier_logit_shift_invariance(self):
        config, vocab, params = make_model()
        f_sel = init_array(SplitMix64(14), (config.channels,), 1)
        a = classify(f_sel, params)
        params["classifier"]["fc2"]["b"] += 11.0
        b = classify(f_sel, params)
        assert np.allclose(a, b, atol=1e-12)
        assert abs(a.sum() - 1.0) < 1e-12


class TestForward:
    @pytest.mark.parametrize("h,w,c", [(32, 32, 16), (64, 64, 32)])
    def test_shape_contracts(self, h, w, c):
        config, vocab, params = make_model(h=h, w=w, c=c)
        rng = SplitMix64(15)
        img1, img2 = random_images(rng, h, w)
        res = forward(img1, img2, [2, 3, 4, 5], params, config)
        n = (h // 16) * (w // 16)
        shapes = res.diagnostics["shapes"]
        assert shapes["F_w"] == (6, c)
        assert shapes["F_v"] == (n, c)
        assert shapes["F_vl"] == (n, c)
        assert shapes["M_c"] == (1, h // 16, w // 16)
        assert shapes["F_mask"] == (c // 2, h // 4, w // 4)
        assert res.mask_logits.shape == (1, h, w)
        assert res.answer_probs.shape == (len(answer_vocabulary(TAX3)),)
        assert abs(res.answer_probs.sum() - 1.0) < 1e-12

    def test_all_attention_rows_sum_to_one(self):
        config, vocab, params = make_model()
        rng = SplitMix64(16)
        img1, img2 = random_images(rng, 32, 32)
        res = forward(img1, img2, [2, 3, 4], params, config)
        assert len(res.diagnostics["attention"]) == 1 + 2 * 3 + 2 * 2
        for _, _, w in res.diagnostics["attention"]:
            assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-9)

    def test_deterministic_across_runs(self):
        rng = SplitMix64(17)
        img1, img2 = random_images(rng, 32, 32)
        outs = []
        for _ in range(2):
            config, vocab, params = make_model(seed=5)
            res = forward(img1, img2, [2, 3], params, config)
            outs.append(res)
        assert (outs[0].mask_logits == outs[1].mask_logits).all()
        assert (outs[0].answer_probs == outs[1].answer_probs).all()

    def test_forward_pair_names_answer(self):
        config, vocab, params = make_model()
        labels = np.zeros(32 * 32, dtype=np.uint8)
        labels[:100] = 1
        pair = MaskPair(
            "p",
            SemanticMask(32, 32, np.zeros(32 * 32, dtype=np.uint8)),
            SemanticMask(32, 32, labels),
        )
        answer, res = forward_pair(
            pair, "Has the building changed in the second image?",
            params, config, TAX3
        )
        assert answer in answer_vocabulary(TAX3)

    def test_params_dump_roundtrip(self):
        config, vocab, params = make_model(seed=3)
        flat = params_for_dump(params)
        back = params_from_dump(flat)
        rng = SplitMix64(18)
        img1, img2 = random_images(rng, 32, 32)
        a = forward(img1, img2, [2, 3, 4], params, config)
        b = forward(img1, img2, [2, 3, 4], back, config)
        assert (a.mask_logits == b.mask_logits).all()
