from __future__ import annotations

import math

import numpy as np
import pytest

from cmt import tensor as T
from cmt.encoders import ModalityEmbedding
from cmt.errors import InputError, ShapeError
from cmt.fusion import (
    CmtModel,
    EmotionDistribution,
    FusedRepresentation,
    classify,
    cross_entropy,
    fuse,
    refine,
)
from cmt.gradcheck import grad_check
from cmt.rng import make_rng
from cmt.tensor import Tensor

from conftest import random_frame, random_tokens, random_wave, tiny_config, zero_params


def embeddings(cfg, seed):
    rng = make_rng(seed)
    return (
        ModalityEmbedding(Tensor(rng.standard_normal(cfg.embed_dim)), "visual"),
        ModalityEmbedding(Tensor(rng.standard_normal(cfg.embed_dim)), "acoustic"),
        ModalityEmbedding(Tensor(rng.standard_normal(cfg.embed_dim)), "textual"),
    )


def ln_rows(x, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class TestFuse:
    def test_zero_attention_weights_give_normed_inputs(self):
        cfg = tiny_config(fusion_type_embeddings=False)
        model = CmtModel.init(cfg, seed=1)
        params = dict(model.params)
        for k in list(params):
            if k.startswith("fusion.attn."):
                params[k] = Tensor(np.zeros(params[k].shape))
        zv, za, zt = embeddings(cfg, 2)
        out = fuse(zv, za, zt, params, cfg)
        stacked = np.stack([zv.vector.data, za.vector.data, zt.vector.data])
        assert np.max(np.abs(out.tokens.data - ln_rows(stacked))) < 1e-12

    def test_identical_tokens_swap_invariance(self):
        cfg = tiny_config(fusion_type_embeddings=False)
        model = CmtModel.init(cfg, seed=3)
        vec = make_rng(4).standard_normal(cfg.embed_dim)
        zv = ModalityEmbedding(Tensor(vec.copy()), "visual")
        za = ModalityEmbedding(Tensor(vec.copy()), "acoustic")
        zt = ModalityEmbedding(Tensor(make_rng(5).standard_normal(cfg.embed_dim)), "textual")
        a = fuse(zv, za, zt, model.params, cfg).tokens.data
        zv2 = ModalityEmbedding(Tensor(vec.copy()), "visual")
        za2 = ModalityEmbedding(Tensor(vec.copy()), "acoustic")
        b = fuse(zv2, za2, zt, model.params, cfg).tokens.data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_attention_matches_hand_expanded_softmax(self):
        # Expand all 9 attention entries per head by hand from Q and K.
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=6)
        zv, za, zt = embeddings(cfg, 7)
        trace = {}
        fuse(zv, za, zt, model.params, cfg, trace=trace)

        tokens = np.stack([zv.vector.data, za.vector.data, zt.vector.data])
        tokens = tokens + model.params["fusion.type_embed"].data
        q = tokens @ model.params["fusion.attn.wq"].data + model.params["fusion.attn.bq"].data
        k = tokens @ model.params["fusion.attn.wk"].data + model.params["fusion.attn.bk"].data
        dh = cfg.embed_dim // cfg.num_heads
        for h in range(cfg.num_heads):
            qh, kh = q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh]
            want = np.zeros((3, 3))
            for i in range(3):
                raw = [math.exp(float(qh[i] @ kh[j]) / math.sqrt(dh) -
                                max(float(qh[i] @ kh[jj]) / math.sqrt(dh) for jj in range(3)))
                       for j in range(3)]
                s = sum(raw)
                for j in range(3):
                    want[i, j] = raw[j] / s
            assert np.max(np.abs(trace["attn_probs"][h] - want)) < 1e-12

    def test_rows_stochastic(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=8)
        trace = {}
        fuse(*embeddings(cfg, 9), model.params, cfg, trace=trace)
        for probs in trace["attn_probs"]:
            assert probs.shape == (3, 3)
            assert np.all(probs >= 0)
            assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12

    def test_pre_residual_convex_combination_bounds(self):
        # Each head's output rows are convex combinations of that head's
        # value rows, so every coordinate lies within the per-column min/max.
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=10)
        trace = {}
        fuse(*embeddings(cfg, 11), model.params, cfg, trace=trace)
        dh = cfg.embed_dim // cfg.num_heads
        for h in range(cfg.num_heads):
            vh = trace["attn_values"][h]
            head_out = trace["pre_residual"][:, h * dh:(h + 1) * dh]
            lo = vh.min(axis=0) - 1e-12
            hi = vh.max(axis=0) + 1e-12
            assert np.all(head_out >= lo) and np.all(head_out <= hi)

    def test_permutation_equivariance_without_type_embeddings(self):
        cfg = tiny_config(fusion_type_embeddings=False)
        model = CmtModel.init(cfg, seed=12)
        zv, za, zt = embeddings(cfg, 13)
        out = fuse(zv, za, zt, model.params, cfg).tokens.data
        # swap the vectors carried by the visual and textual slots
        zv2 = ModalityEmbedding(zt.vector.copy(), "visual")
        zt2 = ModalityEmbedding(zv.vector.copy(), "textual")
        out_swapped = fuse(zv2, za, zt2, model.params, cfg).tokens.data
        assert np.max(np.abs(out_swapped - out[[2, 1, 0]])) < 1e-12

    def test_type_embeddings_break_equivariance(self):
        cfg = tiny_config(fusion_type_embeddings=True)
        model = CmtModel.init(cfg, seed=12)
        zv, za, zt = embeddings(cfg, 13)
        out = fuse(zv, za, zt, model.params, cfg).tokens.data
        zv2 = ModalityEmbedding(zt.vector.copy(), "visual")
        zt2 = ModalityEmbedding(zv.vector.copy(), "textual")
        out_swapped = fuse(zv2, za, zt2, model.params, cfg).tokens.data
        assert np.max(np.abs(out_swapped - out[[2, 1, 0]])) > 1e-6

    def test_wrong_tag_rejected(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=14)
        zv, za, zt = embeddings(cfg, 15)
        with pytest.raises(InputError):
            fuse(za, zv, zt, model.params, cfg)

    def test_wrong_length_rejected(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=16)
        _, za, zt = embeddings(cfg, 17)
        bad = ModalityEmbedding(Tensor(np.zeros(cfg.embed_dim + 1)), "visual")
        with pytest.raises(InputError):
            fuse(bad, za, zt, model.params, cfg)


class TestRefine:
    def test_zero_block_pools_mean(self):
        cfg = tiny_config()
        params = zero_params(CmtModel.init(cfg, seed=18).params)
        tokens = Tensor(make_rng(19).standard_normal((3, cfg.embed_dim)))
        out = refine(FusedRepresentation(tokens=tokens, pooled=None), params, cfg)
        assert np.max(np.abs(out.pooled.data - tokens.data.mean(axis=0))) < 1e-12

    def test_pooled_is_token_mean(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=20)
        tokens = Tensor(make_rng(21).standard_normal((3, cfg.embed_dim)))
        out = refine(FusedRepresentation(tokens=tokens, pooled=None), model.params, cfg)
        assert np.max(np.abs(out.pooled.data - out.tokens.data.mean(axis=0))) < 1e-12

    def test_grad_check(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=22)
        tokens = Tensor(make_rng(23).standard_normal((3, cfg.embed_dim)))
        refine_params = {k: v for k, v in model.params.items()
                         if k.startswith("fusion.refine")}

        def loss():
            out = refine(FusedRepresentation(tokens=tokens, pooled=None),
                         model.params, cfg)
            return T.mean_all(T.mul(out.pooled, out.pooled))

        report = grad_check(loss, dict(refine_params, tokens=tokens), eps=1e-5, tol=1e-5)
        assert report.ok, report.summary()

    def test_wrong_shape_rejected(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=24)
        with pytest.raises(ShapeError):
            refine(FusedRepresentation(tokens=Tensor(np.zeros((2, cfg.embed_dim))),
                                       pooled=None), model.params, cfg)


class TestClassify:
    def test_zero_weights_uniform(self):
        out = classify(Tensor(np.ones(4)), Tensor(np.zeros((8, 4))), Tensor(np.zeros(8)))
        assert np.allclose(out.probs.data, 0.125, atol=1e-15)
        assert out.argmax == 0  # uniform ties break to lowest index

    def test_dominant_logit(self):
        b = np.zeros(8)
        b[0] = 10.0
        out = classify(Tensor(np.ones(4)), Tensor(np.zeros((8, 4))), Tensor(b))
        assert out.argmax == 0
        assert out.probs.data[0] > 0.999

    def test_matches_primitive_composition(self):
        rng = make_rng(25)
        z = rng.standard_normal(4)
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(5)
        out = classify(Tensor(z), Tensor(w), Tensor(b))
        logits = T.add(T.matmul(Tensor(w), Tensor(z.reshape(-1, 1))),
                       Tensor(b.reshape(-1, 1)))
        want = T.softmax_rows(T.reshape(logits, (1, -1))).data[0]
        assert np.array_equal(out.probs.data, want)

    def test_argmax_shift_invariant(self):
        rng = make_rng(26)
        z = rng.standard_normal(4)
        w = rng.standard_normal((6, 4))
        for c in (-100.0, 0.0, 42.0):
            out = classify(Tensor(z), Tensor(w), Tensor(np.full(6, c)))
            base = classify(Tensor(z), Tensor(w), Tensor(np.zeros(6)))
            assert out.argmax == base.argmax

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            classify(Tensor(np.zeros(4)), Tensor(np.zeros((8, 5))), Tensor(np.zeros(8)))


class TestCrossEntropy:
    def test_confident_correct_near_zero(self):
        logits = np.zeros(8)
        logits[2] = 50.0
        dist = classify(Tensor(np.ones(1)), Tensor(np.zeros((8, 1))), Tensor(logits))
        assert cross_entropy(dist, 2).item() < 1e-20

    def test_uniform_is_log_c(self):
        dist = classify(Tensor(np.ones(4)), Tensor(np.zeros((8, 4))), Tensor(np.zeros(8)))
        assert abs(cross_entropy(dist, 3).item() - math.log(8)) < 1e-12

    def test_gradient_is_probs_minus_onehot(self):
        rng = make_rng(27)
        logits = Tensor(rng.standard_normal(5))
        from cmt.tensor import Tape
        with Tape() as tape:
            loss = T.cross_entropy_logits(logits, 2)
            tape.backward(loss)
            g = tape.grad(logits)
        e = np.exp(logits.data - logits.data.max())
        probs = e / e.sum()
        onehot = np.zeros(5)
        onehot[2] = 1.0
        assert np.max(np.abs(g - (probs - onehot))) < 1e-12

    def test_nonnegative(self):
        rng = make_rng(28)
        for _ in range(50):
            logits = Tensor(rng.standard_normal(6) * 5)
            dist = classify(Tensor(np.ones(1)), Tensor(np.zeros((6, 1))), logits)
            assert cross_entropy(dist, int(rng.integers(6))).item() >= 0.0

    def test_label_out_of_range(self):
        dist = classify(Tensor(np.ones(4)), Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))
        with pytest.raises(InputError):
            cross_entropy(dist, 3)


class TestForward:
    def test_deterministic(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=29)
        frame, wave, toks = random_frame(cfg, 30), random_wave(cfg, 30), random_tokens(cfg, 30)
        a = model.forward(frame, wave, toks)
        b = model.forward(frame, wave, toks)
        assert np.array_equal(a.probs.data, b.probs.data)
        assert a.argmax == b.argmax

    def test_probs_sum_to_one_many_samples(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=31)
        for i in range(200):
            out = model.forward(random_frame(cfg, 100 + i), random_wave(cfg, 100 + i),
                                random_tokens(cfg, 100 + i))
            assert np.all(out.probs.data >= 0)
            assert abs(out.probs.data.sum() - 1.0) < 1e-12

    def test_full_pipeline_grad_check(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=32)
        frame, wave, toks = random_frame(cfg, 33), random_wave(cfg, 33), random_tokens(cfg, 33)

        def loss():
            dist = model.forward(frame, wave, toks)
            return T.cross_entropy_logits(dist.logits, 1)

        report = grad_check(loss, model.params, eps=1e-5, tol=1e-5,
                            max_coords_per_param=3)
        assert report.ok, report.summary()

    def test_dropout_changes_training_output(self):
        cfg = tiny_config(dropout=0.3)
        model = CmtModel.init(cfg, seed=34)
        frame, wave, toks = random_frame(cfg, 35), random_wave(cfg, 35), random_tokens(cfg, 35)
        train_out = model.forward(frame, wave, toks, rng=make_rng(36), training=True)
        eval_out = model.forward(frame, wave, toks)
        assert not np.array_equal(train_out.probs.data, eval_out.probs.data)
        # same dropout seed reproduces the training-mode output
        again = model.forward(frame, wave, toks, rng=make_rng(36), training=True)
        assert np.array_equal(train_out.probs.data, again.probs.data)


class TestModelRoundtrip:
    def test_save_load_through_checkpoint(self, tmp_path):
        from cmt.checkpoint import load_checkpoint, save_checkpoint
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=37)
        path = tmp_path / "m.cmtc"
        save_checkpoint(path, model.parameter_arrays(), config=cfg.to_dict())
        arrays, config = load_checkpoint(path)
        from cmt.config import ModelConfig
        model2 = CmtModel.init(ModelConfig.from_dict(config), seed=0)
        model2.load_arrays(arrays)
        frame, wave, toks = random_frame(cfg, 38), random_wave(cfg, 38), random_tokens(cfg, 38)
        a = model.forward(frame, wave, toks)
        b = model2.forward(frame, wave, toks)
        assert np.array_equal(a.probs.data, b.probs.data)

    def test_load_rejects_wrong_parameter_set(self):
        cfg = tiny_config()
        model = CmtModel.init(cfg, seed=39)
        arrays = model.parameter_arrays()
        del arrays["classifier.b"]
        with pytest.raises(ShapeError):
            CmtModel.init(cfg, seed=0).load_arrays(arrays)
