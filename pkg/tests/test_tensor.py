import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vitgan_lab import tensor as T
from vitgan_lab.tensor import Parameter, Tape, Tensor


def _fd_grad(f, x, h=1e-5):
    """Central differences of scalar numpy f at x."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f(x)
        flat[i] = o - h
        fm = f(x)
        flat[i] = o
        gflat[i] = (fp - fm) / (2 * h)
    return g


def test_add_componentwise():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_by_zero_has_zero_grad():
    x = Parameter(np.array([1.5, -2.0, 3.0]))
    with Tape() as tape:
        y = T.mul(x, 0.0)
        g = tape.backward(T.reduce_sum(y))[x]
    assert np.all(y.data == 0) and np.all(g == 0)


def test_softplus_at_zero():
    assert T.softplus(Tensor([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-7)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError) as e:
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))
    assert "(2, 3)" in str(e.value) and "(4, 3)" in str(e.value)


def test_division_is_ieee():
    with np.errstate(divide="ignore"):
        y = T.div(Tensor([1.0, -1.0]), Tensor([0.0, 0.0]))
    assert np.isposinf(y.data[0]) and np.isneginf(y.data[1])


def test_matmul_identity_and_small_case():
    X = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(X)).data, X)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data[0, 0] == 11.0


def test_matmul_gradients_match_fd(f64):
    g = np.random.default_rng(0)
    a, b = g.normal(size=(4, 5)), g.normal(size=(5, 3))
    w = g.normal(size=(4, 3))
    A, Bm = Parameter(a.copy()), Parameter(b.copy())
    with Tape() as tape:
        out = T.reduce_sum(T.matmul(A, Bm) * w)
        grads = tape.backward(out)
    ga = _fd_grad(lambda x: float(np.sum((x @ b) * w)), a.copy())
    gb = _fd_grad(lambda x: float(np.sum((a @ x) * w)), b.copy())
    assert np.max(np.abs(grads[A] - ga) / np.maximum(np.abs(ga), 1e-8)) <= 1e-6
    assert np.max(np.abs(grads[Bm] - gb) / np.maximum(np.abs(gb), 1e-8)) <= 1e-6


def test_batched_matmul_with_shared_matrix(f64):
    g = np.random.default_rng(1)
    rep = T.gradcheck(lambda a, b: T.reduce_sum(T.square(T.matmul(a, b))),
                      [Tensor(g.normal(size=(2, 3, 4))), Tensor(g.normal(size=(4, 2)))])
    assert rep.passed, rep.max_rel_err


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([1.0, 1.0, 1.0])).data, 1 / 3)
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300 + 1e-30
    # e^k / sum e^k for k = 0, 1, 2
    assert np.allclose(T.softmax(Tensor([0.0, 1.0, 2.0])).data, [0.0900, 0.2447, 0.6652], atol=5e-5)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(x, c):
    with T.default_dtype(np.float64):
        p = T.softmax(Tensor(x), axis=-1).data
        q = T.softmax(Tensor(x + c), axis=-1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.allclose(p, q, atol=1e-6)


def test_reductions():
    assert T.reduce_sum(Tensor([1.0, 2.0, 3.0])).data == 6.0
    assert np.allclose(T.reduce_mean(Tensor(np.full((3, 4), 2.5))).data, 2.5)
    x = Parameter(np.array([2.0, 5.0, 5.0]))
    with Tape() as tape:
        g = tape.backward(T.reduce_max(x))[x]
    # ties go to the lowest index
    assert np.array_equal(g, [0.0, 1.0, 0.0])
    assert np.array_equal(T.reduce(Tensor([1.0, 4.0]), "max").data, 4.0)


def test_backward_closed_forms():
    x = Parameter(np.random.default_rng(2).normal(size=(2, 3)))
    with Tape() as tape:
        g1 = tape.backward(T.reduce_sum(x))[x]
    with Tape() as tape:
        g2 = tape.backward(T.reduce_sum(x * x))[x]
    assert np.all(g1 == 1)
    assert np.allclose(g2, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = Parameter(np.ones(3))
    with Tape() as tape, pytest.raises(T.ShapeError):
        tape.backward(x * 2.0)


def test_untouched_leaf_gets_zero_gradient():
    x, y = Parameter(np.ones(3)), Parameter(np.ones(2))
    with Tape() as tape:
        _ = y * 3.0
        g = tape.backward(T.reduce_sum(x * 2.0), wrt=[x, y])
    assert np.all(g[y] == 0) and np.all(g[x] == 2)


def test_composite_matches_fd(f64):
    g = np.random.default_rng(3)
    w = g.normal(size=(4, 6))
    x0 = g.normal(size=(3, 4))
    c = g.normal(size=(3, 6))
    f = lambda x: float(np.sum(np.exp(x @ w) / np.exp(x @ w).sum(-1, keepdims=True) * c))
    X = Parameter(x0.copy())
    with Tape() as tape:
        gx = tape.backward(T.reduce_sum(T.softmax(T.matmul(X, Tensor(w))) * c))[X]
    num = _fd_grad(f, x0.copy())
    assert np.max(np.abs(gx - num) / np.maximum(np.abs(num), 1e-8)) <= 1e-5


def test_k_leaves_get_k_slots():
    leaves = [Parameter(np.full(2, float(i + 1))) for i in range(4)]
    with Tape() as tape:
        y = leaves[0]
        for p in leaves[1:]:
            y = y * p
        g = tape.backward(T.reduce_sum(y))
    assert set(g) == set(leaves)


def test_tape_clears_on_exit():
    tape = Tape()
    x = Parameter(np.ones(2))
    with tape:
        _ = x * 2.0 + 1.0
        assert len(tape) > 0
    assert len(tape) == 0


def test_gradcheck_examples(f64):
    x = Tensor(np.random.default_rng(4).normal(size=5))
    rep = T.gradcheck(lambda t: T.reduce_sum(t), x)
    # rounding of x +- h is the only error left for a linear f
    assert rep.passed and rep.max_rel_err < 1e-10
    # with a dyadic step and dyadic inputs even that vanishes
    exact = T.gradcheck(lambda t: T.reduce_sum(t), Tensor([0.25, -1.5, 3.0]), h=2.0**-16)
    assert exact.max_rel_err == 0.0
    assert T.gradcheck(lambda t: T.reduce_sum(T.sin(t)), Tensor([0.0, math.pi / 2]), tol=1e-4).passed
    with pytest.raises(T.ShapeError):
        T.gradcheck(lambda t: t * 2.0, x)


def test_gradcheck_catches_wrong_backward(f64, monkeypatch):
    # negative control: cos' reported as +sin
    monkeypatch.setattr(T, "cos", lambda x: T._unary("cos", x, np.cos, lambda a, y: np.sin(a)))
    assert not T.gradcheck(lambda t: T.reduce_sum(T.cos(t)), Tensor([0.3, 1.1, -0.7])).passed


def test_jvp_matches_vjp(f64):
    g = np.random.default_rng(5)
    w = Tensor(g.normal(size=(4, 3)))
    x = Parameter(g.normal(size=(2, 4)))
    v, u = g.normal(size=(2, 4)), g.normal(size=(2, 3))
    with Tape() as tape:
        y = T.tanh(T.matmul(x, w))
        jv = tape.jvp({x: v}, [y])[0]
        jtu = tape.backward(y, upstream=u)[x]
    # <u, J v> == <J^T u, v>
    assert float(np.sum(u * jv)) == pytest.approx(float(np.sum(jtu * v)), rel=1e-12)


@pytest.mark.parametrize("op", ["exp", "tanh", "gelu", "softplus", "sigmoid", "sin"])
def test_unary_gradcheck(f64, op):
    x = Tensor(np.random.default_rng(6).normal(size=(3, 4)))
    assert T.gradcheck(lambda t: T.reduce_sum(getattr(T, op)(t) * t), x).passed


def test_float32_default():
    assert Tensor([1.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
