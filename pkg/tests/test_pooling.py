import numpy as np
import pytest

from tsmil import attention as attn
from tsmil import autograd as ag
from tsmil import pooling as pl
from tsmil.gradcheck import check_gradients


def make_state(input_dim=6, d_model=16, heads=2, gate=1.0, seed=0, dtype=np.float64):
    cfg = attn.AttentionConfig(d_model=d_model, num_heads=heads, landmarks=64, mode="exact")
    return pl.build_pooling(
        input_dim=input_dim,
        attention_cfg=cfg,
        seed=seed,
        n_wavelets=2,
        wavelet_taps=5,
        wpe_gate=gate,
        dtype=dtype,
    )


def feats(t, d=6, seed=1):
    return ag.Tensor(np.random.default_rng(seed).standard_normal((t, d)))


class TestPoolForward:
    def test_single_instance_attention_is_one(self):
        out = pl.pool_forward(make_state(), feats(1))
        assert len(out.block_attention) == 2
        for vec in out.block_attention:
            np.testing.assert_allclose(vec, [1.0])

    def test_output_width_for_any_length(self):
        state = make_state()
        for t in (1, 3, 17):
            out = pl.pool_forward(state, feats(t, seed=t))
            assert out.bag_embedding.shape == (1, 16)

    def test_attention_vectors_are_distributions(self):
        out = pl.pool_forward(make_state(), feats(13, seed=3))
        for vec in out.block_attention:
            assert vec.shape == (13,)
            assert abs(vec.sum() - 1.0) < 1e-6
            assert np.all(vec >= 0)

    def test_wrong_width_rejected(self):
        with pytest.raises(ag.DimensionError):
            pl.pool_forward(make_state(input_dim=6), feats(4, d=5))

    def test_gated_off_pooling_is_permutation_invariant(self):
        state = make_state(gate=0.0)
        x = feats(12, seed=4)
        base = pl.pool_forward(state, x).bag_embedding.data
        rng = np.random.default_rng(5)
        for _ in range(20):
            perm = rng.permutation(12)
            out = pl.pool_forward(state, ag.Tensor(x.data[perm])).bag_embedding.data
            assert np.max(np.abs(out - base)) < 1e-5

    def test_wavelets_break_permutation_invariance(self):
        state = make_state(gate=1.0)
        x = feats(12, seed=6)
        base = pl.pool_forward(state, x).bag_embedding.data
        rng = np.random.default_rng(7)
        changed = 0
        for _ in range(20):
            perm = rng.permutation(12)
            if np.array_equal(perm, np.arange(12)):
                continue
            out = pl.pool_forward(state, ag.Tensor(x.data[perm])).bag_embedding.data
            if np.max(np.abs(out - base)) > 1e-3:
                changed += 1
        assert changed >= 19

    def test_class_token_gradient_matches_finite_differences(self):
        state = make_state(d_model=8, seed=2)
        x = feats(5, seed=8)
        res = check_gradients(
            "pool class token",
            lambda ls: ag.mean_all(ag.square(pl.pool_forward(state, x).bag_embedding)),
            [state.class_token],
        )
        assert res.passed, res

    def test_masked_instances_are_excluded(self):
        state = make_state()
        x = feats(10, seed=9)
        mask = np.ones(10, dtype=bool)
        mask[7:] = False
        out_masked = pl.pool_forward(state, x, mask=mask)
        out_trexact = pl.pool_forward(state, ag.Tensor(x.data[:7]))
        # wavelet convolution sees the padded rows, so compare attention only
        # on a bag whose padding is zero
        x2 = ag.Tensor(np.vstack([x.data[:7], np.zeros((3, 6))]))
        out2 = pl.pool_forward(state, x2, mask=mask)
        assert out2.block_attention[0].shape == (10,)
        np.testing.assert_allclose(out2.block_attention[0][7:], 0.0, atol=1e-12)
        assert out_masked.bag_embedding.shape == (1, 16)
        assert out_trexact.bag_embedding.shape == (1, 16)


class TestWarmupMix:
    def test_alpha_one_returns_instance_mean(self):
        cls_emb = ag.Tensor(np.array([[1.0, 0.0]]))
        mean = ag.Tensor(np.array([[0.0, 1.0]]))
        out = pl.warmup_mix(cls_emb, mean, alpha=1.0, in_warmup=True)
        np.testing.assert_allclose(out.data, mean.data)

    def test_after_warmup_returns_class_embedding(self):
        cls_emb = ag.Tensor(np.array([[1.0, 0.0]]))
        mean = ag.Tensor(np.array([[0.0, 1.0]]))
        out = pl.warmup_mix(cls_emb, mean, alpha=0.3, in_warmup=False)
        assert out is cls_emb

    def test_convex_combination(self):
        cls_emb = ag.Tensor(np.array([[1.0, 0.0]]))
        mean = ag.Tensor(np.array([[0.0, 1.0]]))
        out = pl.warmup_mix(cls_emb, mean, alpha=0.99, in_warmup=True)
        np.testing.assert_allclose(out.data, [[0.01, 0.99]], atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ag.DimensionError):
            pl.warmup_mix(ag.Tensor(np.zeros((1, 3))), ag.Tensor(np.zeros((1, 2))), 0.5, True)
