import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ekd import tensor as T
from ekd.errors import ContractError, DimensionError, DomainError, NumericError
from ekd.objectives import layer_loss
from ekd.tensor import Tensor, backward, build_tape, grad_check

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(x, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, a.data)

    def test_zero(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor(np.zeros((2, 1)))
        np.testing.assert_array_equal(out.data, [[0.0], [0.0]])

    def test_hand_computed(self):
        # 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (Tensor(rng.uniform(-2, 2, size=s)) for s in [(3, 4), (4, 2), (2, 5)])
        np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-9)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(T.softmax(Tensor(x + 17.0)).data, T.softmax(Tensor(x)).data, atol=1e-14)

    def test_empty_is_domain_error(self):
        with pytest.raises(DomainError):
            T.softmax(Tensor(np.zeros(0)))

    @given(arrays(np.float64, st.integers(1, 20), elements=finite))
    def test_sums_to_one(self, x):
        y = T.softmax(Tensor(x)).data
        assert abs(y.sum() - 1.0) < 1e-12
        assert np.all(y >= 0)


class TestLayerNorm:
    def _ln(self, row):
        d = len(row)
        return T.layer_norm(Tensor([row]), Tensor(np.ones(d)), Tensor(np.zeros(d))).data[0]

    def test_constant_row_maps_to_zero(self):
        np.testing.assert_array_equal(self._ln([5.0, 5.0, 5.0]), [0.0, 0.0, 0.0])

    def test_already_normalised(self):
        np.testing.assert_allclose(self._ln([1.0, -1.0]), [1.0, -1.0], atol=1e-5)

    def test_hand_computed(self):
        # mean 1, std 1
        np.testing.assert_allclose(self._ln([0.0, 2.0]), [-1.0, 1.0], atol=1e-5)

    def test_width_one_rejected(self):
        with pytest.raises(DomainError):
            self._ln([3.0])

    def test_rows_standardised(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(5, 7))
        y = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        backward(x * x)
        assert x.grad == 6.0

    def test_constant(self):
        x = leaf(3.0)
        backward(x * 0.0 + 4.0)
        assert x.grad == 0.0

    def test_product(self):
        x, y = leaf(2.0), leaf(5.0)
        backward(x * y)
        assert (x.grad, y.grad) == (5.0, 2.0)

    def test_non_scalar_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_fan_out_sums_paths(self):
        # df/dx = y + 2x, one term per path
        x, y = leaf(1.5), leaf(-2.0)
        path1 = x * y
        path2 = x * x
        backward(path1 + path2)
        assert x.grad == pytest.approx(-2.0 + 3.0, abs=1e-15)
        # per-path gradients computed separately add up to the joint one
        x1, y1 = leaf(1.5), leaf(-2.0)
        backward(x1 * y1)
        x2 = leaf(1.5)
        backward(x2 * x2)
        assert x.grad == x1.grad + x2.grad

    def test_accumulates_across_calls(self):
        x = leaf(2.0)
        backward(x * 3.0)
        backward(x * 3.0)
        assert x.grad == 6.0

    def test_tape_is_topological_and_unique(self):
        x = leaf(np.ones((2, 2)))
        h = T.gelu(x @ x)
        loss = T.tsum(h * h + h)
        tape = build_tape(loss)
        assert len(tape) == len({id(n) for n in tape})
        position = {id(n): k for k, n in enumerate(tape)}
        for node in tape:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]

    def test_frozen_tensor_refuses_grad(self):
        p = Tensor(np.ones(3), frozen=True)
        with pytest.raises(ContractError):
            p.requires_grad = True

    def test_no_grad_records_nothing(self):
        x = leaf(2.0)
        with T.no_grad():
            y = x * x
        assert not y.requires_grad and y._parents == ()


def test_non_finite_result_is_an_error():
    with pytest.raises(NumericError, match="exp"):
        T.exp(Tensor([1000.0]))


def test_non_finite_leaf_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])


def test_repeated_runs_are_bit_identical():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(4, 6))

    def run():
        x = leaf(data)
        loss = T.tsum(T.softmax(T.gelu(x @ Tensor(data.T))) * 3.0)
        backward(loss)
        return loss.item(), x.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# Finite-difference checks


class TestGradCheck:
    def test_quadratic_bowl(self):
        x = leaf([0.3, -1.2, 2.5])
        err = grad_check(lambda: T.tsum(x * x * 1.7), [x], eps=1e-5)
        assert err < 1e-6

    def test_constant_function(self):
        x = leaf([0.3, -1.2])
        assert grad_check(lambda: T.tsum(x * 0.0) + 2.0, [x]) == 0.0

    def test_layer_loss_random(self):
        rng = np.random.default_rng(11)
        hs = leaf(rng.normal(size=(4, 8)))
        ht = rng.normal(size=(4, 8))
        assert grad_check(lambda: layer_loss(hs, ht), [hs], eps=1e-5) < 1e-4

    def test_eps_bounds(self):
        x = leaf([1.0])
        with pytest.raises(DomainError):
            grad_check(lambda: T.tsum(x), [x], eps=0.1)

    def test_detects_a_wrong_gradient(self):
        x = leaf([0.5, 1.0])
        # square with a deliberately wrong derivative 3x
        def bad_square():
            return T.tsum(T._make(x.data**2, (x,), lambda g: (g * 3.0 * x.data,), "bad_square"))

        assert grad_check(bad_square, [x]) > 0.1


def _ops():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(5, 3))
    g, b = rng.normal(size=5), rng.normal(size=5)
    pos = rng.uniform(0.5, 2.0, size=(2, 4, 5))
    r4, r10, r_stack = rng.normal(size=(2, 2, 2, 5)), rng.normal(size=(2, 4, 10)), rng.normal(size=(2, 2, 4, 5))
    return {
        "add": lambda x: x + Tensor(g) + x * 0.5,
        "sub": lambda x: Tensor(b) - x * x,
        "mul": lambda x: x * x,
        "div": lambda x: x / (T.exp(x) + 1.0),
        "neg": lambda x: -x,
        "exp": T.exp,
        "log": lambda x: T.log(x * x + 1.0),
        "sqrt": lambda x: T.sqrt(x * x + 0.5),
        "log_sigmoid": T.log_sigmoid,
        "gelu": T.gelu,
        "softmax": lambda x: T.softmax(x, axis=-1) * Tensor(pos),
        "log_softmax": lambda x: T.log_softmax(x, axis=-1) * Tensor(pos),
        "layer_norm": lambda x: T.layer_norm(x, Tensor(g), Tensor(b)) * Tensor(pos),
        "row_norm": T.row_norm,
        "matmul": lambda x: x @ Tensor(w),
        "batched_matmul": lambda x: x @ T.swapaxes(x, -1, -2),
        "sum_axis": lambda x: T.tsum(x * x, axis=1),
        "mean_axes": lambda x: T.mean(x * x, axis=(-2, -1)),
        "reshape_transpose": lambda x: T.transpose(T.reshape(x, (2, 2, 2, 5)), (0, 2, 1, 3)) * Tensor(r4),
        "concat": lambda x: T.concat([x, x * 2.0], axis=-1) * Tensor(r10),
        "stack": lambda x: T.stack([x, x * x]) * Tensor(r_stack),
        "index": lambda x: x[:, 1:3] * x[:, 1:3],
    }


@pytest.mark.parametrize("name", sorted(_ops()))
def test_every_op_passes_grad_check(name):
    op = _ops()[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    x = leaf(rng.uniform(-1.5, 1.5, size=(2, 4, 5)))
    weights = Tensor(rng.normal(size=op(Tensor(x.data)).shape))
    err = grad_check(lambda: T.tsum(op(x) * weights), [x], eps=1e-5)
    assert err < 1e-4, f"{name}: {err}"
