import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradmask import tensor as T
from gradmask.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_relu_definition():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_uniform_logits_give_log_c():
    out = T.softmax_cross_entropy(Tensor([[0.0, 0.0, 0.0]]), np.array([1]))
    assert abs(out.item() - np.log(3)) < 1e-15


def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(T.backward_grad((x * x).sum(), x), [2, 4, 6])


def test_linear_gradient():
    w = leaf([1.0, 1.0])
    x = Tensor([5.0, -3.0])
    np.testing.assert_array_equal(T.backward_grad((w * x).sum(), w), [5, -3])


def test_backward_populates_leaf_grad():
    x = leaf([1.0, -2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, -4])


def test_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(T.NonFiniteError):
        Tensor([1.0, np.nan])


def test_non_scalar_output_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(T.TapeError):
        T.backward_grad(x * x, x)


def test_leaf_not_on_tape():
    x, z = leaf([1.0]), leaf([2.0])
    with pytest.raises(T.TapeError):
        T.backward_grad((x * x).sum(), z)


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_tape_is_topologically_ordered():
    x = leaf([1.0, 2.0])
    out = (T.relu(x * 3.0) + x).sum()
    tape = T.Tape.from_output(out)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert len(pos) == len(tape)


def test_backward_is_pure_and_counted():
    x = leaf(np.linspace(-1, 1, 5))
    out = T.tanh(x * x).sum()
    before = T.backward_call_count()
    g1 = T.backward_grad(out, x)
    g2 = T.backward_grad(out, x)
    np.testing.assert_array_equal(g1, g2)
    assert T.backward_call_count() == before + 2


def test_fd_check_quadratic():
    assert T.finite_difference_check(lambda x: (x * x).sum(), np.array([1.0, 2.0]), 1e-5) < 1e-8


def test_fd_check_constant_is_zero():
    assert T.finite_difference_check(lambda x: Tensor(3.0), np.array([1.0, 2.0])) == 0.0


def test_cross_entropy_saturates():
    out = T.softmax_cross_entropy(Tensor([[50.0, 0.0, 0.0]]), np.array([0]))
    assert 0 <= out.item() < 1e-20


def test_cross_entropy_reductions():
    z = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]))
    y = np.array([2, 0])
    per = T.softmax_cross_entropy(z, y, reduction="none").data
    ref = -np.log(np.exp(z.data[[0, 1], y]) / np.exp(z.data).sum(axis=1))
    np.testing.assert_allclose(per, ref, rtol=1e-14)
    assert abs(T.softmax_cross_entropy(z, y).item() - ref.mean()) < 1e-14
    assert abs(T.softmax_cross_entropy(z, y, reduction="sum").item() - ref.sum()) < 1e-14


# primitives against central differences -----------------------------------------

PRIMITIVES = {
    "add": lambda x: (x + x * 0.5 + 1.0).sum(),
    "sub": lambda x: (2.0 - x * x).sum(),
    "mul": lambda x: (x * x * x).sum(),
    "div": lambda x: (x / (x * x + 1.0)).sum(),
    "relu": lambda x: (T.relu(x) * x).sum(),
    "tanh": lambda x: T.tanh(x).sum(),
    "matmul": lambda x: T.matmul(x.reshape(2, 3), Tensor(np.arange(6.0).reshape(3, 2) - 2)).sum(),
    "mean": lambda x: (x * x).mean(),
    "softmax_ce": lambda x: T.softmax_cross_entropy(x.reshape(2, 3), np.array([0, 2])),
    "conv2d": lambda x: T.tanh(T.conv2d(x.reshape(1, 1, 2, 3), Tensor(np.linspace(-1, 1, 18).reshape(2, 1, 3, 3)))).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=25, deadline=None)
@given(x=arrays(np.float64, 6, elements=finite))
def test_primitive_matches_finite_differences(name, x):
    f = PRIMITIVES[name]
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
    leaf_x = leaf(x)
    g = T.backward_grad(f(leaf_x), leaf_x)
    num = np.empty(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = 1e-6
        num[i] = (f(Tensor(x + e)).item() - f(Tensor(x - e)).item()) / 2e-6
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(x=arrays(np.float64, 4, elements=finite), a=finite, b=finite)
def test_gradient_is_linear(x, a, b):
    t = leaf(x)
    f = lambda v: T.tanh(v).sum()
    g = lambda v: (v * v).sum()
    combined = T.backward_grad(f(t) * a + g(t) * b, t)
    separate = a * T.backward_grad(f(t), t) + b * T.backward_grad(g(t), t)
    np.testing.assert_allclose(combined, separate, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=finite))
def test_broadcast_bias_gradient_sums_rows(x):
    b = leaf(np.zeros(4))
    out = (Tensor(x) + b).sum()
    np.testing.assert_array_equal(T.backward_grad(out, b), np.full(4, 3.0))
