import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsmil import autograd as ag
from tsmil.gradcheck import check_gradients, op_checks


def t64(data, requires_grad=False):
    return ag.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        eye = t64(np.eye(2))
        m = t64([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(ag.matmul(eye, m).data, m.data)

    def test_orthogonal_supports(self):
        a = t64([[1.0, 0.0], [0.0, 0.0]])
        b = t64([[0.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(ag.matmul(a, b).data, np.zeros((2, 2)))

    def test_trace_gradient_is_transpose(self):
        # d/dA trace(A @ B) = B^T; at A = B = [[1,2],[3,4]] the gradient is [[1,3],[2,4]]
        a = t64([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = t64([[1.0, 2.0], [3.0, 4.0]])
        prod = ag.matmul(a, b)
        trace = ag.sum_axis(ag.sum_axis(ag.mul(prod, t64(np.eye(2))), 0), 0)
        ag.backward(trace)
        np.testing.assert_allclose(a.grad, [[1.0, 3.0], [2.0, 4.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ag.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


class TestConv1dSame:
    def test_delta_kernel_is_identity(self):
        x = t64(np.arange(12, dtype=float).reshape(2, 6))
        delta = t64(np.tile([0.0, 1.0, 0.0], (2, 1)))
        np.testing.assert_allclose(ag.conv1d_same(x, delta).data, x.data)

    def test_zero_input(self):
        x = t64(np.zeros((3, 5)))
        k = t64(np.ones((3, 3)))
        np.testing.assert_allclose(ag.conv1d_same(x, k).data, 0.0)

    def test_hand_convolution(self):
        x = t64([[1.0, 2.0, 3.0]])
        k = t64([[1.0, 1.0, 1.0]])
        np.testing.assert_allclose(ag.conv1d_same(x, k).data, [[3.0, 6.0, 5.0]])

    def test_even_kernel_rejected(self):
        with pytest.raises(ag.ConfigurationError):
            ag.conv1d_same(t64(np.ones((1, 4))), t64(np.ones((1, 2))))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = t64(rng.standard_normal((2, 8)))
        y = t64(rng.standard_normal((2, 8)))
        k = t64(rng.standard_normal((2, 5)))
        mix = ag.Tensor(1.7 * x.data - 0.4 * y.data)
        lhs = ag.conv1d_same(mix, k).data
        rhs = 1.7 * ag.conv1d_same(x, k).data - 0.4 * ag.conv1d_same(y, k).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(ag.softmax_last(t64([0.0, 0.0])).data, [0.5, 0.5])

    def test_single_element(self):
        np.testing.assert_allclose(ag.softmax_last(t64([3.7])).data, [1.0])

    def test_large_logits_stable(self):
        out = ag.softmax_last(t64([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    @given(
        st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12),
    )
    @settings(max_examples=50, deadline=None)
    def test_rows_are_distributions(self, row):
        out = ag.softmax_last(t64(row)).data
        assert abs(out.sum() - 1.0) < 1e-6
        assert np.all(out >= 0.0) and np.all(out <= 1.0)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ag.sigmoid(t64(0.0)).item() == pytest.approx(0.5)

    def test_relu(self):
        np.testing.assert_allclose(ag.relu(t64([-3.0, 3.0])).data, [0.0, 3.0])

    def test_square_backward(self):
        x = t64(3.0, requires_grad=True)
        ag.backward(ag.square(x))
        assert x.grad == pytest.approx(6.0)

    def test_broadcast_rejects_incompatible(self):
        with pytest.raises(ag.DimensionError):
            ag.add(t64(np.ones((2, 3))), t64(np.ones((2, 2))))


class TestReduce:
    def test_mean(self):
        assert ag.mean_axis(t64([2.0, 4.0, 6.0]), 0).item() == pytest.approx(4.0)

    def test_sum_backward_distributes_ones(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        ag.backward(ag.sum_axis(x, 0))
        np.testing.assert_allclose(x.grad, [1.0, 1.0, 1.0])

    def test_max_tie_routes_to_first(self):
        x = t64([1.0, 3.0, 3.0], requires_grad=True)
        out = ag.max_axis(x, 0)
        assert out.item() == 3.0
        ag.backward(out)
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])

    def test_axis_out_of_range(self):
        with pytest.raises(ag.DimensionError):
            ag.sum_axis(t64([1.0]), 2)


class TestLayerNorm:
    def test_constant_slice_is_zero_before_affine(self):
        x = t64(np.full((4,), 2.5))
        out = ag.layer_norm(x, t64(np.ones(4)), t64(np.zeros(4)), eps=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_already_normalized(self):
        out = ag.layer_norm(t64([1.0, -1.0]), t64(np.ones(2)), t64(np.zeros(2)), eps=1e-8)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-3)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        leaves = [
            ag.Tensor(rng.standard_normal((3, 8)), requires_grad=True, dtype=np.float64),
            ag.Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64),
            ag.Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64),
        ]
        res = check_gradients(
            "layer_norm",
            lambda ls: ag.mean_all(ag.square(ag.layer_norm(ls[0], ls[1], ls[2]))),
            leaves,
        )
        assert res.passed, res


class TestBackward:
    def test_linear_loss(self):
        w = t64([1.0, -2.0, 0.5], requires_grad=True)
        x = t64([4.0, 5.0, 6.0])
        ag.backward(ag.sum_axis(ag.mul(w, x), 0))
        np.testing.assert_allclose(w.grad, x.data)

    def test_sigmoid_scaled(self):
        w = t64(0.0, requires_grad=True)
        ag.backward(ag.scale(ag.sigmoid(w), 2.0))
        assert w.grad == pytest.approx(0.5)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ag.UsageError):
            ag.backward(t64([1.0, 2.0], requires_grad=True))

    def test_repeated_backward_accumulates(self):
        w = t64(2.0, requires_grad=True)
        for _ in range(2):
            ag.backward(ag.square(w))
        assert w.grad == pytest.approx(8.0)

    def test_shared_subexpression(self):
        # loss = x*x + x -> grad = 2x + 1
        x = t64(3.0, requires_grad=True)
        ag.backward(ag.add(ag.mul(x, x), x))
        assert x.grad == pytest.approx(7.0)

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(5)
            w = ag.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            x = ag.Tensor(rng.standard_normal((4, 4)))
            loss = ag.mean_all(ag.gelu(ag.matmul(w, x)))
            ag.backward(loss)
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


class TestTape:
    def test_topological_order(self):
        x = t64(1.0, requires_grad=True)
        y = ag.square(x)
        z = ag.add(y, x)
        tape = ag.Tape.trace(z)
        pos = {id(node): i for i, node in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]


def test_all_primitive_ops_match_finite_differences():
    failures = [r for r in op_checks(seed=0) if not r.passed]
    assert not failures, "\n".join(str(r) for r in failures)
