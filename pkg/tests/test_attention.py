import math
import time

import numpy as np
import pytest

from tsmil import attention as attn
from tsmil import autograd as ag


def make(d_model=16, heads=2, landmarks=8, mode="auto", seed=0, dtype=np.float64):
    cfg = attn.AttentionConfig(d_model=d_model, num_heads=heads, landmarks=landmarks, mode=mode)
    w = attn.MHSAWeights.create(cfg, np.random.default_rng(seed), dtype=dtype)
    return cfg, w


def rand_x(n, d, seed=1, dtype=np.float64):
    return ag.Tensor(np.random.default_rng(seed).standard_normal((n, d)), dtype=dtype)


class TestExactMHSA:
    def test_single_token(self):
        cfg, w = make()
        x = rand_x(1, 16)
        out = attn.exact_mhsa(w, x)
        # softmax over one key is exactly 1, so output is v @ wo for that token
        v = np.concatenate([x.data @ wv.data for wv in w.wv], axis=1)
        np.testing.assert_allclose(out.data, v @ w.wo.data, rtol=1e-12)

    def test_identical_rows_give_identical_outputs(self):
        cfg, w = make()
        row = np.random.default_rng(2).standard_normal(16)
        x = ag.Tensor(np.tile(row, (5, 1)))
        out = attn.exact_mhsa(w, x).data
        np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-6)

    def test_hand_sized_case_against_float_oracle(self):
        # H=1, d_model=2, two tokens: recompute with plain numpy double precision
        cfg = attn.AttentionConfig(d_model=2, num_heads=1, landmarks=4)
        w = attn.MHSAWeights.create(cfg, np.random.default_rng(3), dtype=np.float64)
        x = np.array([[0.3, -1.2], [2.0, 0.5]])
        q, k, v = x @ w.wq[0].data, x @ w.wk[0].data, x @ w.wv[0].data
        scores = q @ k.T / math.sqrt(2.0)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        expected = (p @ v) @ w.wo.data
        got = attn.exact_mhsa(w, ag.Tensor(x)).data
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_rows_sum_to_one(self):
        cfg, w = make()
        x = rand_x(9, 16)
        q = x.data @ w.wq[0].data
        k = x.data @ w.wk[0].data
        p = ag.softmax_last(ag.scale(ag.matmul(ag.Tensor(q), ag.transpose(ag.Tensor(k))), 1 / math.sqrt(8))).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_permutation_equivariance_without_positions(self):
        cfg, w = make()
        x = rand_x(8, 16, seed=4)
        out = attn.exact_mhsa(w, x).data
        rng = np.random.default_rng(5)
        for _ in range(5):
            perm = rng.permutation(7) + 1
            idx = np.concatenate([[0], perm])
            out_p = attn.exact_mhsa(w, ag.Tensor(x.data[idx])).data
            np.testing.assert_allclose(out_p[0], out[0], atol=1e-5)
            np.testing.assert_allclose(out_p[1:], out[perm], atol=1e-5)

    def test_width_mismatch(self):
        cfg, w = make()
        with pytest.raises(ag.DimensionError):
            attn.exact_mhsa(w, rand_x(4, 8))

    def test_masked_keys_are_ignored(self):
        cfg, w = make()
        x = rand_x(6, 16, seed=6)
        mask = np.array([True, True, False, False, True])
        out_masked = attn.exact_mhsa(w, x, mask=mask).data
        # dropping the masked rows entirely must give the same class-token output
        keep = np.array([0, 1, 2, 5])
        out_dropped = attn.exact_mhsa(w, ag.Tensor(x.data[keep])).data
        np.testing.assert_allclose(out_masked[0], out_dropped[0], atol=1e-9)


class TestIterativePinv:
    def test_identity(self):
        z = attn.iterative_pinv(ag.Tensor(np.eye(5)), iters=6)
        np.testing.assert_allclose(z.data, np.eye(5), atol=1e-5)

    def test_diagonal_scaling(self):
        z = attn.iterative_pinv(ag.Tensor(2.0 * np.eye(4)), iters=6)
        np.testing.assert_allclose(z.data, 0.5 * np.eye(4), atol=1e-5)

    def test_penrose_residual_well_conditioned(self):
        rng = np.random.default_rng(7)
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        a = q @ np.diag(rng.uniform(0.5, 2.0, 8)) @ q.T
        z = attn.iterative_pinv(ag.Tensor(a), iters=6).data
        res = np.linalg.norm(a @ z @ a - a) / np.linalg.norm(a)
        assert res < 1e-3

    def test_residual_non_increasing_on_spd(self):
        rng = np.random.default_rng(8)
        b = rng.standard_normal((6, 6))
        a = b @ b.T / 6.0 + 0.5 * np.eye(6)
        prev = np.inf
        for iters in range(1, 8):
            z = attn.iterative_pinv(ag.Tensor(a), iters=iters).data
            res = np.linalg.norm(a @ z @ a - a)
            assert res <= prev + 1e-9
            prev = res

    def test_non_square_rejected(self):
        with pytest.raises(ag.DimensionError):
            attn.iterative_pinv(ag.Tensor(np.ones((3, 4))))


class TestNystrom:
    def test_auto_fallback_is_bitwise_exact(self):
        cfg, w = make(landmarks=32, mode="auto")
        x = rand_x(20, 16, seed=9)
        out_auto = attn.mhsa(cfg, w, x).data
        out_exact = attn.exact_mhsa(w, x).data
        assert np.array_equal(out_auto, out_exact)

    def test_rank_limited_long_input_close_to_exact(self):
        cfg = attn.AttentionConfig(d_model=32, num_heads=4, landmarks=64, mode="nystrom")
        w = attn.MHSAWeights.create(cfg, np.random.default_rng(10), dtype=np.float64)
        rng = np.random.default_rng(11)
        distinct = rng.standard_normal((32, 32))
        x = ag.Tensor(distinct[rng.integers(0, 32, size=513)])
        approx = attn.nystrom_mhsa(cfg, w, x).data
        exact = attn.exact_mhsa(w, x).data
        rel = np.linalg.norm(approx - exact) / np.linalg.norm(exact)
        assert rel < 5e-2

    def test_runtime_scales_subquadratically(self):
        cfg = attn.AttentionConfig(d_model=32, num_heads=2, landmarks=64, mode="nystrom")
        w = attn.MHSAWeights.create(cfg, np.random.default_rng(12), dtype=np.float32)
        times = {}
        for n in (512, 1024, 2048):
            x = ag.Tensor(np.random.default_rng(n).standard_normal((n, 32)), dtype=np.float32)
            best = np.inf
            for _ in range(3):
                t0 = time.perf_counter()
                attn.nystrom_mhsa(cfg, w, x)
                best = min(best, time.perf_counter() - t0)
            times[n] = best
        assert times[1024] / times[512] < 4.0
        assert times[2048] / times[1024] < 4.0


class TestClassTokenAttention:
    def test_identical_instances_uniform(self):
        cfg, w = make()
        row = np.random.default_rng(13).standard_normal(16)
        x = ag.Tensor(np.vstack([np.zeros(16), np.tile(row, (4, 1))]))
        weights = attn.class_token_attention(w, x)
        np.testing.assert_allclose(weights, 0.25, atol=1e-7)

    def test_sums_to_one(self):
        cfg, w = make()
        x = rand_x(18, 16, seed=14)
        weights = attn.class_token_attention(w, x)
        assert weights.shape == (17,)
        assert abs(weights.sum() - 1.0) < 1e-6
        assert np.all(weights >= 0)

    def test_empty_sequence_rejected(self):
        cfg, w = make()
        with pytest.raises(ag.UsageError):
            attn.class_token_attention(w, rand_x(1, 16))


def test_mhsa_gradients_match_finite_differences():
    from tsmil.gradcheck import check_gradients

    cfg, w = make(d_model=8, heads=2, seed=15)
    x = rand_x(5, 8, seed=16)
    leaves = [p for _, p in w.parameters()]
    res = check_gradients(
        "exact_mhsa",
        lambda ls: ag.mean_all(ag.square(attn.exact_mhsa(w, x))),
        leaves,
    )
    assert res.passed, res
