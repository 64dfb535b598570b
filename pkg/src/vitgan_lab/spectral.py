"""Spectral normalization: plain (W / sigma) and init-rescaled (sigma_0 W / sigma).

The rescaled variant keeps each layer at the spectral norm it had at
construction instead of forcing it to 1, which matters for transformer
blocks that collapse when every projection is squashed to unit gain.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import Rng

MODES = ("none", "sn", "isn")


class DegenerateWeightError(FloatingPointError):
    pass


def _unit(x):
    n = float(np.linalg.norm(x))
    return x / n, n


class SpectralWeight:
    """A weight matrix plus the state needed to normalize it.

    ``u`` (left) and ``v`` (right) persist across steps so one power
    iteration per step tracks a slowly moving weight.
    """

    def __init__(self, weight: T.Tensor, mode: str = "isn", rng: Rng | None = None,
                 iters_per_step: int = 1, init_iters: int = 200):
        if mode not in MODES:
            raise ValueError(f"unknown spectral mode {mode!r}")
        if weight.ndim != 2:
            raise T.ShapeError("spectral weight must be a matrix", weight.shape)
        self.weight = weight
        self.mode = mode
        self.iters_per_step = iters_per_step
        rng = rng or Rng(0, "spectral")
        m, n = weight.shape
        self.u, _ = _unit(rng.normal(m))
        self.v = np.zeros(n)
        sigma = self.power_iter_sigma(init_iters)
        if mode != "none" and not sigma > 0:
            raise DegenerateWeightError("spectral weight has zero norm at construction")
        self.sigma_init = sigma
        self.sigma_hat = sigma

    def power_iter_sigma(self, iters: int | None = None) -> float:
        """Run ``iters`` power iterations in place and return u^T W v."""
        iters = self.iters_per_step if iters is None else iters
        if iters < 1:
            raise ValueError("iters must be >= 1")
        W = np.asarray(self.weight.data, dtype=np.float64)
        u, v = self.u, self.v
        for _ in range(iters):
            wv = W.T @ u
            nv = float(np.linalg.norm(wv))
            if nv == 0.0:
                return 0.0
            v = wv / nv
            wu = W @ v
            nu = float(np.linalg.norm(wu))
            if nu == 0.0:
                return 0.0
            u = wu / nu
        self.u, self.v = u, v
        self.sigma_hat = float(u @ W @ v)
        return self.sigma_hat

    def sigma_tensor(self) -> T.Tensor:
        """sigma_hat as a differentiable function of W with u, v held fixed."""
        W = self.weight
        uv = np.outer(self.u, self.v).astype(W.dtype)
        return T.reduce_sum(T.mul(W, uv))

    def effective_weight(self) -> T.Tensor:
        if self.mode == "none":
            return self.weight
        sigma = self.sigma_tensor()
        if not abs(float(sigma.data)) >= 1e-12:
            raise DegenerateWeightError(f"estimated spectral norm {float(sigma.data):.3g} too small")
        w = T.div(self.weight, sigma)
        if self.mode == "isn":
            w = T.scale(w, self.sigma_init)
        return w

    def buffers(self) -> dict:
        return {"u": self.u, "v": self.v, "sigma_init": np.array(self.sigma_init)}

    def load_buffers(self, d: dict) -> None:
        self.u = np.asarray(d["u"], dtype=np.float64)
        self.v = np.asarray(d["v"], dtype=np.float64)
        self.sigma_init = float(d["sigma_init"])


def power_iter_sigma(sw: SpectralWeight, iters: int) -> float:
    return sw.power_iter_sigma(iters)


def effective_weight(sw: SpectralWeight) -> T.Tensor:
    return sw.effective_weight()


# ---------------------------------------------------------------------------
# test oracle


def _two_by_two(a, b, c, d):
    """Left and right rotations diagonalizing [[a, b], [c, d]]."""
    # rotate from the left to make the block symmetric
    theta = math.atan2(c - b, a + d)
    cg, sg = math.cos(theta), math.sin(theta)
    G = np.array([[cg, sg], [-sg, cg]])
    S = G @ np.array([[a, b], [c, d]])
    p, q, r = S[0, 0], S[0, 1], S[1, 1]
    if q == 0.0:
        J = np.eye(2)
    else:
        if abs(q) < 1e-150 * abs(r - p):
            t = q / (r - p)  # small-angle limit of the formula below; zeta would overflow
        else:
            zeta = (r - p) / (2.0 * q)
            t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
        cj = 1.0 / math.sqrt(1.0 + t * t)
        sj = cj * t
        J = np.array([[cj, sj], [-sj, cj]])
    return J.T @ G, J


def singular_values_jacobi(W, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """All singular values by two-sided Jacobi rotations, descending."""
    A = np.array(W, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    m, n = A.shape
    k = max(m, n)
    S = np.zeros((k, k))
    S[:m, :n] = A
    scale = np.linalg.norm(S)
    if scale == 0.0:
        return np.zeros(min(m, n))
    for _ in range(max_sweeps):
        off = math.sqrt(max(float(np.sum(S * S) - np.sum(np.diag(S) ** 2)), 0.0))
        if off <= tol * scale:
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                if S[p, q] == 0.0 and S[q, p] == 0.0:
                    continue
                L, R = _two_by_two(S[p, p], S[p, q], S[q, p], S[q, q])
                S[[p, q], :] = L @ S[[p, q], :]
                S[:, [p, q]] = S[:, [p, q]] @ R
    sv = np.sort(np.abs(np.diag(S)))[::-1]
    return sv[: min(m, n)]


def svd_oracle(W) -> float:
    """Largest singular value of a small matrix (test-scale only)."""
    A = np.asarray(W.data if isinstance(W, T.Tensor) else W)
    if max(A.shape) > 64:
        raise ValueError("svd_oracle is limited to 64x64")
    return float(singular_values_jacobi(A)[0])
