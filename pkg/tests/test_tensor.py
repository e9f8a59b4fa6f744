import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quad2lin import tensor as tc
from quad2lin.errors import ContractError, CorruptionError, DimensionError, NumericError
from quad2lin.tensor import Tape, Tensor, finite_diff_grad, grad_rel_error

F64 = np.float64


def _rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape).astype(F64)


def check_op_grad(fn, *arrays, tol=1e-4):
    """Compare tape gradients of sum(w * fn(inputs)) with central differences."""
    rng = np.random.default_rng(len(arrays))
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        w = Tensor(rng.standard_normal(out.shape))
        loss = tc.sum_(tc.mul(out, w))
    tape.backward(loss)
    for i, leaf in enumerate(leaves):

        def f(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = x
            return tc.sum_(tc.mul(fn(*args), w)).item()

        numeric = finite_diff_grad(f, Tensor(arrays[i]))
        err = grad_rel_error(leaf.grad, numeric)
        assert err < tol, f"input {i}: rel err {err:.2e}"


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(Tensor(np.eye(2)), Tensor([[3.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_hand_arithmetic(self):
        out = tc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_grad_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(0)
        a, b = _rand(rng, 3, 4), _rand(rng, 4, 5)
        A = Tensor(a, requires_grad=True)
        with Tape() as tape:
            loss = tc.sum_(tc.matmul(A, Tensor(b)))
        tape.backward(loss)
        np.testing.assert_allclose(A.grad, np.ones((3, 5)) @ b.T)
        numeric = finite_diff_grad(lambda x: tc.sum_(tc.matmul(x, Tensor(b))), Tensor(a))
        assert grad_rel_error(A.grad, numeric) < 1e-8

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_grad(self):
        rng = np.random.default_rng(1)
        check_op_grad(tc.matmul, _rand(rng, 2, 3, 4, 5), _rand(rng, 1, 5, 2))


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(tc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_symmetric_triple(self):
        np.testing.assert_allclose(tc.softmax_rows(Tensor([[1.0, 1.0, 1.0]])).data, [[1 / 3] * 3])

    def test_closed_form(self):
        out = tc.softmax_rows(Tensor([[0.0, math.log(3.0)]], dtype=F64))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_nan_is_numeric_error(self):
        with pytest.raises(NumericError):
            tc.softmax_rows(Tensor([[0.0, np.nan]]))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=12),
        st.floats(-100, 100),
    )
    def test_rows_sum_to_one_and_shift_invariant(self, row, shift):
        x = np.array([row], dtype=F64)
        p = tc.softmax_rows(Tensor(x)).data
        assert abs(p.sum() - 1.0) <= 1e-6
        q = tc.softmax_rows(Tensor(x + shift)).data
        np.testing.assert_allclose(p, q, atol=1e-6)


class TestCausalConv:
    def test_last_tap_identity(self):
        rng = np.random.default_rng(2)
        x = _rand(rng, 6, 3)
        k = np.zeros((4, 3))
        k[-1] = 1.0
        out = tc.causal_depthwise_conv(Tensor(x), Tensor(k), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_first_tap_is_shift_by_w_minus_one(self):
        x = np.arange(1.0, 9.0).reshape(4, 2)
        k = np.zeros((4, 2))
        k[0] = 1.0
        out = tc.causal_depthwise_conv(Tensor(x), Tensor(k), Tensor(np.zeros(2))).data
        np.testing.assert_array_equal(out[:3], 0.0)
        np.testing.assert_array_equal(out[3], x[0])

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(3)
        b = _rand(rng, 5)
        out = tc.causal_depthwise_conv(Tensor(np.zeros((7, 5))), Tensor(_rand(rng, 4, 5)), Tensor(b))
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (7, 5)))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            tc.causal_depthwise_conv(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))

    @pytest.mark.parametrize("t", [0, 3, 7])
    def test_never_reads_future(self, t):
        rng = np.random.default_rng(4)
        x = _rand(rng, 2, 10, 3)
        k, b = Tensor(_rand(rng, 4, 3)), Tensor(_rand(rng, 3))
        full = tc.causal_depthwise_conv(Tensor(x), k, b).data
        x2 = x.copy()
        x2[:, t + 1 :] = 0.0
        cut = tc.causal_depthwise_conv(Tensor(x2), k, b).data
        assert np.array_equal(full[:, : t + 1], cut[:, : t + 1])

    def test_grad(self):
        rng = np.random.default_rng(5)
        check_op_grad(tc.causal_depthwise_conv, _rand(rng, 2, 6, 3), _rand(rng, 3, 3), _rand(rng, 3))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = tc.sum_(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = tc.sum_(x * x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_fan_out_accumulates(self):
        x = Tensor([1.5], requires_grad=True, dtype=F64)
        with Tape() as tape:
            y = x * 3.0
            loss = tc.sum_(y * y + y)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2 * 9 * 1.5 + 3])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert y.node is None and not y.requires_grad

    def test_reverse_order(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            a = tc.exp(x)
            b = tc.log(a)
            loss = tc.sum_(b)
        assert [r.name for r in tape.records] == ["exp", "log", "sum"]
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [1.0], rtol=1e-6)


class TestFiniteDiff:
    def test_sum(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 2)))
        np.testing.assert_allclose(finite_diff_grad(tc.sum_, x), np.ones((3, 2)), atol=1e-9)

    def test_square_scalar(self):
        g = finite_diff_grad(lambda t: float(t.data[0] ** 2), Tensor([3.0], dtype=F64))
        assert abs(g[0] - 6.0) < 1e-8


UNARY = {
    "exp": tc.exp,
    "log": lambda x: tc.log(tc.add(tc.mul(x, x), 0.5)),
    "softplus": tc.softplus,
    "sigmoid": tc.sigmoid,
    "silu": tc.silu,
    "gelu": tc.gelu,
    "tanh": tc.tanh,
    "power": lambda x: tc.power(tc.add(tc.mul(x, x), 0.3), -0.5),
    "neg": tc.neg,
    "scalar_ops": lambda x: 1.5 - (x * 2.0 + 0.5) / 3.0,
    "transpose": lambda x: tc.transpose(x, (2, 0, 1)),
    "reshape": lambda x: tc.reshape(x, (6, 4)),
    "slice": lambda x: x[:, 1:3, ::2],
    "sum_axis": lambda x: tc.sum_(x, axis=1),
    "mean_keep": lambda x: tc.mean(x, axis=-1, keepdims=True),
    "cumsum": lambda x: tc.cumsum(x, axis=1),
    "softmax": lambda x: tc.softmax(x, axis=-1),
    "log_softmax": tc.log_softmax,
    "rms_norm": tc.rms_norm,
    "masked_fill": lambda x: tc.masked_fill(x, np.eye(4, dtype=bool)[:3], 0.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    check_op_grad(UNARY[name], _rand(rng, 2, 3, 4))


BINARY = {
    "add": tc.add,
    "sub": tc.sub,
    "mul": tc.mul,
    "div": lambda a, b: tc.div(a, tc.add(tc.mul(b, b), 1.0)),
    "concat": lambda a, b: tc.concat([a, b], axis=1),
    "rms_norm_scale": lambda a, b: tc.rms_norm(a, b[0, 0]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    rng = np.random.default_rng(7)
    check_op_grad(BINARY[name], _rand(rng, 2, 3, 4), _rand(rng, 2, 3, 4))


def test_broadcast_add_grad():
    rng = np.random.default_rng(8)
    check_op_grad(tc.add, _rand(rng, 2, 3, 4), _rand(rng, 4))
    check_op_grad(tc.mul, _rand(rng, 2, 3, 4), _rand(rng, 2, 1, 4))


def test_embedding_grad_and_range():
    rng = np.random.default_rng(9)
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    check_op_grad(lambda t: tc.embedding(t, ids), _rand(rng, 5, 3))
    with pytest.raises(DimensionError):
        tc.embedding(Tensor(np.ones((5, 3))), np.array([5]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_reshape_transpose_round_trip(a, b, c):
    x = np.random.default_rng(a * 100 + b * 10 + c).standard_normal((a, b, c))
    t = Tensor(x)
    back = tc.transpose(tc.transpose(t, (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(back.data, x)
    assert np.array_equal(tc.reshape(tc.reshape(t, (a * b * c,)), (a, b, c)).data, x)


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_serialization_round_trip(dtype):
    x = np.random.default_rng(0).standard_normal((3, 1, 4)).astype(dtype)
    blob = tc.tensor_to_bytes(x)
    assert blob[:8] == (3).to_bytes(8, "little")
    assert np.array_equal(tc.tensor_from_bytes(blob, dtype), x)


def test_serialization_truncated():
    blob = tc.tensor_to_bytes(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(CorruptionError):
        tc.tensor_from_bytes(blob[:-1], "float32")
