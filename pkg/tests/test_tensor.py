import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from astrosnn import tensor as tn
from astrosnn.errors import ContractError, ParameterError, ShapeError, TapeStateError
from astrosnn.tensor import GradientTape, Tensor, backward
from astrosnn.verify import numerical_gradient, op_gradient_checks, rel_error


def grad_of(fn, *arrays):
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        out = fn(*leaves)
    backward(tape, out, leaves)
    return [t.grad for t in leaves]


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(tn.matmul(Tensor(np.eye(2)), b).data, b.data)

    def test_annihilating(self):
        out = tn.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0, 0.0], [0.0, 1.0]]))
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ga, gb = grad_of(lambda x, y: tn.matmul(x, y).sum(), a, b)
        assert np.allclose(ga, np.ones((3, 2)) @ b.T)
        na, nb = numerical_gradient(lambda: float((a @ b).sum()), [a, b])
        assert rel_error(ga, na) < 1e-6 and rel_error(gb, nb) < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            tn.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))

    def test_batched_weight_gradient(self):
        rng = np.random.default_rng(1)
        a, b, probe = rng.normal(size=(2, 5, 3, 4)), rng.normal(size=(4, 6)), rng.normal(size=(2, 5, 3, 6))
        ga, gb = grad_of(lambda x, y: (tn.matmul(x, y) * Tensor(probe)).sum(), a, b)
        assert np.allclose(gb, np.einsum("bnij,bnik->jk", a, probe))
        assert np.allclose(ga, np.einsum("bnik,jk->bnij", probe, b))


class TestSigmoid:
    def test_values(self):
        y = tn.sigmoid(Tensor([0.0, 1.0]))
        assert y.data[0] == 0.5
        assert abs(y.data[1] - 0.7310586) < 1e-7

    def test_gradient_at_zero(self):
        (g,) = grad_of(lambda x: tn.sigmoid(x).sum(), [0.0])
        assert g[0] == 0.25

    def test_extreme_inputs_stay_finite(self):
        y = tn.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.array_equal(y.data, [0.0, 1.0])


class TestHeaviside:
    def test_fires_at_threshold(self):
        assert tn.heaviside_ste(Tensor([0.0]), 0.0, 2.0).data[0] == 1.0

    @pytest.mark.parametrize("x, weight", [(1.0, 0.0), (0.0, 2.0), (0.25, 1.0), (-0.5, 0.0)])
    def test_surrogate_weights(self, x, weight):
        (g,) = grad_of(lambda t: tn.heaviside_ste(t, 0.0, 2.0).sum(), [x])
        assert g[0] == weight

    def test_nonpositive_alpha_rejected(self):
        with pytest.raises(ParameterError):
            tn.heaviside_ste(Tensor([0.0]), 0.0, 0.0)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(-10, 10))
    def test_outputs_binary(self, xs, vth):
        y = tn.heaviside_ste(Tensor(xs), vth).data
        assert set(np.unique(y)) <= {0.0, 1.0}
        assert np.array_equal(y, (np.asarray(xs) >= vth).astype(y.dtype))


class TestCrossEntropy:
    def test_uniform(self):
        loss = tn.cross_entropy_logits(Tensor(np.zeros((5, 256))), np.arange(5))
        assert abs(loss.item() - math.log(256)) < 1e-6
        assert abs(loss.item() / math.log(2) - 8.0) < 1e-6

    def test_confident_margin_goes_to_zero(self):
        z = np.zeros((3, 4))
        z[np.arange(3), [0, 1, 2]] = 60.0
        assert tn.cross_entropy_logits(Tensor(z, dtype="f64"), [0, 1, 2]).item() < 1e-20

    def test_matches_naive_sum(self):
        rng = np.random.default_rng(2)
        z, y = rng.normal(size=(4, 7)), rng.integers(0, 7, size=4)
        naive = -sum(math.log(math.exp(z[i, y[i]]) / sum(math.exp(v) for v in z[i])) for i in range(4)) / 4
        assert abs(tn.cross_entropy_logits(Tensor(z), y).item() - naive) < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            tn.cross_entropy_logits(Tensor(np.zeros((2, 3))), [0, 3])


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = grad_of(lambda w: w.sum(), np.arange(6.0).reshape(2, 3))
        assert np.array_equal(g, np.ones((2, 3)))

    def test_sigmoid_of_linear_map(self):
        rng = np.random.default_rng(3)
        w, x = rng.normal(size=(3, 3)), rng.normal(size=(3, 1))
        (g,) = grad_of(lambda t: tn.sigmoid(tn.matmul(t, Tensor(x))).sum(), w)
        (n,) = numerical_gradient(lambda: float((1 / (1 + np.exp(-(w @ x)))).sum()), [w])
        assert rel_error(g, n) < 1e-5

    def test_disconnected_leaf_gets_zero(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        with GradientTape() as tape:
            out = (a * a).sum()
        backward(tape, out, [a, b])
        assert np.array_equal(b.grad, [0.0])

    def test_untracked_untouched(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([5.0, 6.0])
        with GradientTape() as tape:
            out = (a * c).sum()
        backward(tape, out, [a])
        assert c.grad is None and np.array_equal(a.grad, [5.0, 6.0])

    def test_non_scalar_root(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with GradientTape() as tape:
            out = a * a
        with pytest.raises(ContractError):
            backward(tape, out)

    def test_second_backward_rejected(self):
        a = Tensor([1.0], requires_grad=True)
        with GradientTape() as tape:
            out = (a * a).sum()
        backward(tape, out)
        with pytest.raises(TapeStateError):
            backward(tape, out)

    def test_root_from_elsewhere(self):
        a = Tensor([1.0], requires_grad=True)
        with GradientTape():
            foreign = (a * a).sum()
        with GradientTape() as tape:
            (a * 2.0).sum()
        with pytest.raises(ContractError):
            backward(tape, foreign)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 3))
        f = lambda t: tn.sigmoid(t).sum()
        g = lambda t: (t * t).sum()
        (gf,) = grad_of(f, w)
        (gg,) = grad_of(g, w)
        (both,) = grad_of(lambda t: tn.scale(f(t), 2.0) + tn.scale(g(t), -3.0), w)
        assert np.allclose(both, 2 * gf - 3 * gg, atol=1e-14)


def test_every_op_matches_finite_differences():
    bad = [c for c in op_gradient_checks(seed=5) if not c.passed]
    assert not bad


def test_broadcast_limited_to_rows_and_scalars():
    a = Tensor(np.ones((3, 4)))
    assert (a + Tensor(np.ones(4))).shape == (3, 4)
    assert (a * 2.0).shape == (3, 4)
    with pytest.raises(ShapeError):
        a + Tensor(np.ones((3, 1, 4)))


def test_dtype_default_and_determinism():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 4))
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(x).dtype == np.float64
    assert Tensor(x, dtype="f32").dtype == np.float32
    y1 = tn.sigmoid(tn.matmul(Tensor(x), Tensor(x))).data
    y2 = tn.sigmoid(tn.matmul(Tensor(x), Tensor(x))).data
    assert y1.tobytes() == y2.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_rms_norm_gradient(n, d, seed):
    rng = np.random.default_rng(seed)
    x, g, probe = rng.normal(size=(n, d + 1)), 1 + 0.1 * rng.normal(size=d + 1), rng.normal(size=(n, d + 1))
    gx, gg = grad_of(lambda a, b: (tn.rms_norm(a, b) * Tensor(probe)).sum(), x, g)

    def f():
        return float(((x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-6)) * g * probe).sum())

    nx, ng = numerical_gradient(f, [x, g])
    assert rel_error(gx, nx) < 1e-6 and rel_error(gg, ng) < 1e-6
