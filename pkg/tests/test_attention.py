import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vitgan_lab import attention as A
from vitgan_lab import tensor as T
from vitgan_lab.rng import Rng
from vitgan_lab.spectral import svd_oracle
from vitgan_lab.tensor import Tensor


def _params(kernel, dim=4, heads=1, seed=0):
    return A.AttentionParams(dim, heads, Rng(seed, "attn"), kernel=kernel)


def _loop_oracle(p, X):
    """Attention written out one query at a time."""
    Wq = p.w_q.effective_weight().data
    Wk = p.w_k.effective_weight().data
    Wv = p.w_v.effective_weight().data
    Wo, bo = p.w_out.effective_weight().data, p.w_out.bias.data
    B, L, D = X.shape
    H, dh = p.heads, p.head_dim
    out = np.zeros((B, L, D))
    for b in range(B):
        q, k, v = X[b] @ Wq, X[b] @ Wk, X[b] @ Wv
        for i in range(L):
            heads = []
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                if p.kernel == "dot_product":
                    s = np.array([q[i, sl] @ k[j, sl] for j in range(L)]) / math.sqrt(dh)
                else:
                    s = -np.array([np.sum((q[i, sl] - k[j, sl]) ** 2) for j in range(L)]) / math.sqrt(dh)
                w = np.exp(s - s.max())
                w /= w.sum()
                heads.append(sum(w[j] * v[j, sl] for j in range(L)))
            out[b, i] = np.concatenate(heads) @ Wo + bo
    return out


@pytest.mark.parametrize("kernel", ["dot_product", "l2_tied"])
def test_matches_loop_oracle(f64, kernel):
    p = _params(kernel, dim=4, heads=1, seed=3)
    p.w_out.bias.data = np.random.default_rng(0).normal(size=4)
    X = np.random.default_rng(1).normal(size=(1, 3, 4))
    assert np.max(np.abs(p(X).data - _loop_oracle(p, X))) <= 1e-10


def test_matches_loop_oracle_multihead(f64):
    for kernel in ("dot_product", "l2_tied"):
        p = _params(kernel, dim=8, heads=2, seed=4)
        X = np.random.default_rng(2).normal(size=(2, 5, 8))
        assert np.max(np.abs(p(X).data - _loop_oracle(p, X))) <= 1e-10


@pytest.mark.parametrize("kernel", ["dot_product", "l2_tied"])
def test_single_token_ignores_query_key(f64, kernel):
    p = _params(kernel, seed=5)
    x = np.random.default_rng(3).normal(size=(1, 1, 4))
    want = x[0] @ p.w_v.effective_weight().data @ p.w_out.effective_weight().data + p.w_out.bias.data
    p.w_q.weight.data *= 7.0
    assert np.allclose(p(x).data[0], want, atol=1e-12)


@pytest.mark.parametrize("kernel", ["dot_product", "l2_tied"])
def test_identical_rows_uniform_attention(f64, kernel):
    p = _params(kernel, seed=6)
    X = np.tile(np.random.default_rng(4).normal(size=(1, 1, 4)), (1, 5, 1))
    w = p.weights(X).data
    assert np.allclose(w, 1 / 5)
    y = p(X).data
    assert np.allclose(y, y[:, :1])


def test_l2_hand_example(f64):
    # d_h = 1, projected queries 0 and 2: scores row 0 = [0, -4]
    p = A.AttentionParams(1, 1, Rng(0), kernel="l2_tied")
    p.w_q.weight.data = np.array([[1.0]])
    p.w_q.lr_gain = 1.0
    X = np.array([[[0.0], [2.0]]])
    w = p.weights(X).data[0, 0]
    assert np.allclose(w[0], [0.9820, 0.0180], atol=1e-4)


def test_tied_storage():
    p = _params("l2_tied")
    assert p.w_q is p.w_k and p.tied
    names = list(p.parameters())
    assert sum(n.startswith("w_q") for n in names) == 1 and not any(n.startswith("w_k") for n in names)
    with pytest.raises(ValueError):
        A.AttentionParams(4, 1, Rng(0), kernel="l2_tied", tied=False)
    with pytest.raises(ValueError):
        A.AttentionParams(6, 4, Rng(0))


def test_kernel_entry_points_check_params():
    with pytest.raises(ValueError):
        A.l2_attention(_params("dot_product"), np.zeros((1, 2, 4)))
    with pytest.raises(ValueError):
        A.dot_product_attention(_params("l2_tied"), np.zeros((1, 2, 4)))


@given(st.integers(0, 10_000), st.sampled_from(["dot_product", "l2_tied"]))
def test_rows_are_distributions_and_permutation_equivariant(seed, kernel):
    with T.default_dtype(np.float64):
        p = A.AttentionParams(8, 2, Rng(seed, "a"), kernel=kernel)
        g = np.random.default_rng(seed)
        X = g.normal(size=(2, 6, 8))
        w = p.weights(X).data
        assert np.all(w >= 0) and np.allclose(w.sum(-1), 1.0, atol=1e-6)
        perm = g.permutation(6)
        assert np.allclose(p(X[:, perm]).data, p(X).data[:, perm], atol=1e-6)


def test_l2_scores_depend_on_differences(f64):
    # flipping the sign of the tied projection leaves every distance unchanged
    p = _params("l2_tied", dim=8, heads=2, seed=7)
    X = np.random.default_rng(8).normal(size=(1, 5, 8))
    before = p.weights(X).data
    p.w_q.weight.data = -p.w_q.weight.data
    assert np.allclose(p.weights(X).data, before, atol=1e-12)


def test_empirical_lipschitz_linear(f64):
    assert A.empirical_lipschitz(lambda x: x, np.ones(4)) == pytest.approx(1.0, abs=1e-6)
    assert A.empirical_lipschitz(lambda x: T.scale(x, 3.0), np.ones(4)) == pytest.approx(3.0, abs=1e-6)
    g = np.random.default_rng(9)
    for _ in range(5):
        M = g.normal(size=(5, 7))
        est = A.empirical_lipschitz(lambda x: T.matmul(x, Tensor(M)), g.normal(size=(1, 5)), iters=500)
        assert est == pytest.approx(svd_oracle(M), abs=1e-4)


def test_empirical_lipschitz_iter_floor():
    with pytest.raises(ValueError):
        A.empirical_lipschitz(lambda x: x, np.ones(2), iters=5)


def test_lipschitz_growth_dot_vs_l2():
    from vitgan_lab.verify import lipschitz_growth

    for seed in range(3):
        d1, d100 = lipschitz_growth(seed, "dot_product", (1.0, 100.0))
        l1, l100 = lipschitz_growth(seed, "l2_tied", (1.0, 100.0))
        assert d100 / d1 >= 10
        assert l100 / l1 <= 2
