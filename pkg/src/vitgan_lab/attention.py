"""Multi-head self-attention: dot-product and tied-weight L2 kernels."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import LinearLayer, Module
from .rng import Rng

KERNELS = ("dot_product", "l2_tied")


class AttentionParams(Module):
    """Projections for one MSA layer.

    Under ``l2_tied`` the query and key projections are one stored matrix,
    so W_q = W_k holds by construction.
    """

    def __init__(self, dim: int, heads: int, rng: Rng, kernel: str = "dot_product",
                 spectral: str = "none", tied: bool | None = None):
        if kernel not in KERNELS:
            raise ValueError(f"unknown attention kernel {kernel!r}")
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide width ({dim})")
        if tied is None:
            tied = kernel == "l2_tied"
        if kernel == "l2_tied" and not tied:
            raise ValueError("l2_tied attention requires W_q and W_k to share storage")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.kernel = kernel
        mk = lambda name: LinearLayer(dim, dim, rng.child(name), bias=False, spectral=spectral)
        self.w_q = mk("q")
        self.w_k = self.w_q if tied else mk("k")
        self.w_v = mk("v")
        self.w_out = LinearLayer(dim, dim, rng.child("out"), spectral=spectral)

    @property
    def tied(self) -> bool:
        return self.w_q is self.w_k

    def _split(self, x):
        """Project to per-head q, k, v of shape [B, H, L, d_h]."""
        B, L, D = x.shape
        H, dh = self.heads, self.head_dim
        if self.tied:
            w = T.concat([self.w_q.effective_weight(), self.w_v.effective_weight()], axis=1)
            y = T.matmul(x, w).reshape(B, L, 2, H, dh).transpose(2, 0, 3, 1, 4)
            q = y[0]
            return q, q, y[1]
        w = T.concat([self.w_q.effective_weight(), self.w_k.effective_weight(),
                      self.w_v.effective_weight()], axis=1)
        y = T.matmul(x, w).reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)
        return y[0], y[1], y[2]

    def scores(self, x):
        q, k, v = self._split(x)
        inv = 1.0 / math.sqrt(self.head_dim)
        if self.kernel == "dot_product":
            s = T.scale(T.matmul(q, k.swapaxes(-1, -2)), inv)
        else:
            qq = T.reduce_sum(T.square(q), axis=-1, keepdims=True)
            kk = qq if k is q else T.reduce_sum(T.square(k), axis=-1, keepdims=True)
            cross = T.matmul(q, k.swapaxes(-1, -2))
            # -||q_i - k_j||^2 / sqrt(d_h): nearer keys get larger weight
            d2 = qq + kk.swapaxes(-1, -2) - T.scale(cross, 2.0)
            s = T.scale(d2, -inv)
        return s, v

    def weights(self, x):
        """Attention probabilities, shape [B, H, L, L]."""
        s, _ = self.scores(_check(self, x))
        return T.softmax(s, axis=-1)

    def __call__(self, x):
        x = _check(self, x)
        B, L, D = x.shape
        s, v = self.scores(x)
        a = T.softmax(s, axis=-1)
        o = T.matmul(a, v).transpose(0, 2, 1, 3).reshape(B, L, D)
        return self.w_out(o)


def _check(p: AttentionParams, x):
    x = T._lift(x)
    if x.ndim != 3 or x.shape[-1] != p.dim:
        raise T.ShapeError("attention input [B, L, D]", x.shape, (None, None, p.dim))
    return x


def dot_product_attention(p: AttentionParams, X):
    if p.kernel != "dot_product":
        raise ValueError("parameters were built for the l2_tied kernel")
    return p(X)


def l2_attention(p: AttentionParams, X):
    if p.kernel != "l2_tied" or not p.tied:
        raise ValueError("parameters were not built for the l2_tied kernel")
    return p(X)


# ---------------------------------------------------------------------------
# Lipschitz estimation


class NonFiniteIterateError(FloatingPointError):
    pass


def empirical_lipschitz(f, x0, iters: int = 100, rng: Rng | None = None, rtol: float = 1e-7) -> float:
    """Spectral norm of the Jacobian of ``f`` at ``x0`` by power iteration.

    Each iteration does one forward-mode replay (J v) and one reverse-mode
    replay (J^T J v) of the same tape; ``f`` is evaluated only once.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    rng = rng or Rng(0, "lipschitz")
    x0 = x0.data if isinstance(x0, T.Tensor) else np.asarray(x0)
    x = T.Tensor(np.array(x0, copy=True), requires_grad=True)
    v = rng.normal(x.shape)
    v = v / np.linalg.norm(v)
    sigma = prev = 0.0
    with T.Tape() as tape:
        y = f(x)
        for it in range(iters):
            jv = tape.jvp({x: v}, [y])[0].astype(np.float64)
            sigma = float(np.linalg.norm(jv))
            if not math.isfinite(sigma):
                raise NonFiniteIterateError(f"J v became non-finite at iterate {it}")
            if sigma == 0.0:
                return 0.0
            w = tape.backward(y, upstream=jv, wrt=[x])[x].astype(np.float64)
            nw = float(np.linalg.norm(w))
            if not math.isfinite(nw):
                raise NonFiniteIterateError(f"J^T J v became non-finite at iterate {it}")
            if nw == 0.0:
                return sigma
            v = w / nw
            if it > 0 and abs(sigma - prev) <= rtol * sigma:
                break
            prev = sigma
    return sigma
