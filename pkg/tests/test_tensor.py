"""Tensor core: primitives against independent oracles, tape mechanics,
broadcasting gradients, and the finite-difference checker itself."""

from __future__ import annotations

import numpy as np
import pytest

from bimamba import tensor as T


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-by-element triple loop, no vectorization."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += float(a[i, kk]) * float(b[kk, j])
            out[i, j] = acc
    return out


def test_matmul_identity() -> None:
    i2 = T.Tensor(np.eye(2))
    m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(i2, m).data, m.data)


def test_matmul_hand_case() -> None:
    a = T.Tensor([[1.0, -1.0]])
    b = T.Tensor([[2.0], [3.0]])
    assert np.allclose(T.matmul(a, b).data, [[-1.0]])


def test_matmul_against_triple_loop(rng) -> None:
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    want = matmul_oracle(a, b)
    assert np.abs(got - want).max() <= 1e-6


def test_matmul_shape_mismatch() -> None:
    with pytest.raises(ValueError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_rejects_nonfinite() -> None:
    bad = T.Tensor(np.ones((2, 2)))
    bad.data[0, 0] = np.nan  # bypass constructor check on purpose
    with pytest.raises(FloatingPointError):
        T.matmul(bad, T.Tensor(np.ones((2, 2))))


def test_tensor_rejects_nonfinite_values() -> None:
    with pytest.raises(ValueError):
        T.Tensor([1.0, np.inf])


def test_softmax_uniform_row() -> None:
    p = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]])).data
    assert np.allclose(p, [[1 / 3, 1 / 3, 1 / 3]])


def test_softmax_large_shift_stable() -> None:
    p = T.softmax_rows(T.Tensor([[1000.0, 0.0]])).data
    assert abs(p[0, 0] - 1.0) <= 1e-12
    assert abs(p[0, 1]) <= 1e-12


def test_softmax_against_direct_formula() -> None:
    T.set_default_dtype("float64")
    x = np.array([[1.0, 2.0, 3.0]])
    p = T.softmax_rows(T.Tensor(x)).data
    e = np.exp(x)
    assert np.allclose(p, e / e.sum(), atol=1e-15)


def test_softmax_rows_sum_to_one(rng) -> None:
    x = T.Tensor(rng.standard_normal((6, 9)))
    p = T.softmax_rows(x).data
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-6


def test_softmax_empty_rows_error() -> None:
    with pytest.raises(ValueError):
        T.softmax_rows(T.Tensor(np.zeros((2, 0))))


def test_backward_requires_recording() -> None:
    tape = T.Tape()
    x = T.Tensor([1.0], requires_grad=True)
    with pytest.raises(T.TapeError):
        tape.backward(x)


def test_backward_foreign_loss_rejected() -> None:
    x = T.Tensor([2.0], requires_grad=True)
    with T.Tape() as tape:
        (x * x).sum()
    other = T.Tensor([1.0])
    with pytest.raises(T.TapeError):
        tape.backward(other)


def test_backward_scalar_only() -> None:
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = x * x
    with pytest.raises(T.TapeError):
        tape.backward(y)


def test_tape_single_replay() -> None:
    x = T.Tensor([3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    with pytest.raises(T.TapeError):
        tape.backward(loss)


def test_no_grad_blocks_recording() -> None:
    x = T.Tensor([3.0], requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            (x * x).sum()
    assert tape.entries == []


def test_chain_rule_hand_case() -> None:
    # f = sum(exp(a*b)): df/da = exp(a*b)*b, df/db = exp(a*b)*a
    a = T.Tensor([0.5, -1.0], requires_grad=True)
    b = T.Tensor([2.0, 3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.texp(a * b).sum()
    tape.backward(loss)
    e = np.exp(a.data * b.data)
    assert np.allclose(a.grad, e * b.data, atol=1e-6)
    assert np.allclose(b.grad, e * a.data, atol=1e-6)


def test_matmul_backward_formula(rng) -> None:
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.matmul(a, b).sum()
    tape.backward(loss)
    g = np.ones((3, 2), dtype=np.float32)
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-6)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-6)


def test_broadcast_row_vector_gradient(rng) -> None:
    # (m,n) + (n): vector gradient sums over the broadcast axis
    m = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    v = T.Tensor(rng.standard_normal(3), requires_grad=True)
    with T.Tape() as tape:
        loss = (m + v).sum()
    tape.backward(loss)
    assert np.allclose(m.grad, np.ones((4, 3)))
    assert np.allclose(v.grad, np.full(3, 4.0))


def test_grad_accumulates_across_tapes() -> None:
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with T.Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
    assert np.allclose(x.grad, 2 * 2 * x.data)


def test_grad_check_quadratic() -> None:
    T.set_default_dtype("float64")
    theta = T.Tensor([1.0, 2.0], requires_grad=True)
    err = T.grad_check(lambda: (theta * theta).sum(), theta, eps=1e-5)
    assert err <= 1e-7
    assert np.allclose(theta.grad, [2.0, 4.0])


def test_grad_check_softmax_cross_entropy() -> None:
    T.set_default_dtype("float64")
    logits = T.Tensor([[0.2, -0.7, 1.1, 0.4]], requires_grad=True)
    onehot = T.Tensor([[0.0, 0.0, 1.0, 0.0]])

    def f():
        return T.neg((onehot * T.log_softmax_rows(logits)).sum())

    assert T.grad_check(f, logits) <= 1e-6


def test_grad_check_constant_function() -> None:
    T.set_default_dtype("float64")
    theta = T.Tensor([1.0, -1.0], requires_grad=True)
    c = T.Tensor([5.0])
    err = T.grad_check(lambda: c.sum(), theta)
    assert err == 0.0


def test_grad_check_requires_float64() -> None:
    theta = T.Tensor([1.0], requires_grad=True)
    with pytest.raises(T.TapeError):
        T.grad_check(lambda: (theta * theta).sum(), theta)


@pytest.mark.parametrize(
    "name",
    ["exp", "log", "sigmoid", "silu", "softplus", "pow", "div", "mean", "softmax", "log_softmax", "narrow", "take_rows"],
)
def test_primitive_gradients_finite_difference(name, rng) -> None:
    """Every differentiable primitive agrees with central differences (64-bit)."""
    T.set_default_dtype("float64")
    x = T.Tensor(rng.uniform(0.3, 1.7, size=(3, 4)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((3, 4)))
    ids = np.array([2, 0, 1, 2])

    funcs = {
        "exp": lambda: (w * T.texp(x)).sum(),
        "log": lambda: (w * T.tlog(x)).sum(),
        "sigmoid": lambda: (w * T.sigmoid(x)).sum(),
        "silu": lambda: (w * T.silu(x)).sum(),
        "softplus": lambda: (w * T.softplus(x)).sum(),
        "pow": lambda: (w * T.pow_const(x, -0.5)).sum(),
        "div": lambda: (w / x).sum(),
        "mean": lambda: (w * x.mean(axis=1, keepdims=True)).sum(),
        "softmax": lambda: (w * T.softmax_rows(x)).sum(),
        "log_softmax": lambda: (w * T.log_softmax_rows(x)).sum(),
        "narrow": lambda: (T.narrow(x, 1, 1, 2) * T.narrow(w, 1, 0, 2)).sum(),
        "take_rows": lambda: (T.take_rows(x, ids)).sum(),
    }
    assert T.grad_check(funcs[name], x, eps=1e-6) <= 1e-5


def test_linear_matches_transposed_matmul(rng) -> None:
    x = T.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.linear(x, w).sum()
    tape.backward(loss)
    assert np.allclose(T.linear(x, w).data, x.data @ w.data.T, atol=1e-6)
    assert np.allclose(x.grad, np.ones((5, 4)) @ w.data, atol=1e-6)
    assert np.allclose(w.grad, np.ones((5, 4)).T @ x.data, atol=1e-6)


def test_dtype_mode_switch() -> None:
    assert T.Tensor([1.0]).dtype == np.float32
    with T.using_dtype("float64"):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32
