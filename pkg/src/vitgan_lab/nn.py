"""Parameterized layers shared by the generator and discriminator."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import Rng
from .spectral import SpectralWeight
from .tensor import Parameter, Tensor

SQRT2 = math.sqrt(2.0)


class Module:
    """Minimal container: finds parameters and spectral state by attribute walk."""

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, (Module, Parameter, SpectralWeight)):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "", _seen=None):
        seen = set() if _seen is None else _seen
        out = []
        for name, val in self._children():
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                if id(val) not in seen:
                    seen.add(id(val))
                    out.append((full, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(full + ".", seen))
        return out

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def named_spectral(self, prefix: str = "", _seen=None):
        seen = set() if _seen is None else _seen
        out = []
        for name, val in self._children():
            full = f"{prefix}{name}"
            if isinstance(val, SpectralWeight):
                if id(val) not in seen:
                    seen.add(id(val))
                    out.append((full, val))
            elif isinstance(val, Module) and id(val) not in seen:
                seen.add(id(val))
                out.extend(val.named_spectral(full + ".", seen))
        return out

    def requires_grad_(self, flag: bool = True):
        for _, p in self.named_parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict:
        d = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, sw in self.named_spectral():
            for k, v in sw.buffers().items():
                d[f"{name}.{k}"] = np.array(v, copy=True)
        return d

    def load_state_dict(self, d: dict, strict: bool = True):
        params = self.parameters()
        expected = set(params)
        spectral = dict(self.named_spectral())
        for name in spectral:
            expected |= {f"{name}.u", f"{name}.v", f"{name}.sigma_init"}
        if strict and set(d) != expected:
            missing = sorted(expected - set(d))
            extra = sorted(set(d) - expected)
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name in d:
                arr = np.asarray(d[name])
                if arr.shape != p.shape:
                    raise T.ShapeError(f"load {name}", arr.shape, p.shape)
                p.data = arr.astype(p.dtype, copy=True)
        for name, sw in spectral.items():
            if f"{name}.u" in d:
                sw.load_buffers({k: d[f"{name}.{k}"] for k in ("u", "v", "sigma_init")})

    def refresh_spectral(self, iters: int | None = None):
        """One round of power iteration on every spectral weight; returns the sigmas."""
        return [sw.power_iter_sigma(iters) for _, sw in self.named_spectral()]


class LinearLayer(Module):
    """y = x @ (gain / sqrt(fan_in) * W_eff) + b, weights stored at unit scale.

    With ``spectral="sn"`` the normalized weight is used as is (spectral norm
    exactly 1); the runtime gain would otherwise shrink it to gain/sqrt(fan_in).
    """

    def __init__(self, fan_in: int, fan_out: int, rng: Rng, gain: float = 1.0,
                 bias: bool = True, bias_init: float = 0.0, zero_weight: bool = False,
                 spectral: str = "none"):
        self.fan_in, self.fan_out = fan_in, fan_out
        self.lr_gain = gain / math.sqrt(fan_in)
        dtype = T.get_default_dtype()
        w = np.zeros((fan_in, fan_out)) if zero_weight else rng.normal((fan_in, fan_out))
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.full(fan_out, bias_init, dtype=dtype)) if bias else None
        self.spectral = None
        if spectral != "none":
            self.spectral = SpectralWeight(self.weight, spectral, rng.child("u"))

    def effective_weight(self) -> Tensor:
        if self.spectral is None:
            return T.scale(self.weight, self.lr_gain)
        w = self.spectral.effective_weight()
        if self.spectral.mode == "sn":
            return w
        return T.scale(w, self.lr_gain)

    def __call__(self, x) -> Tensor:
        x = T._lift(x)
        if x.shape[-1] != self.fan_in:
            raise T.ShapeError("linear", x.shape, (self.fan_in, self.fan_out))
        if x.ndim == 1:
            return self(x.reshape(1, -1)).reshape(-1)
        y = T.matmul(x, self.effective_weight())
        if self.bias is not None:
            y = y + self.bias
        return y


def linear_forward(layer: LinearLayer, x) -> Tensor:
    return layer(x)


class LayerNormParams(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        dtype = T.get_default_dtype()
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return layernorm(x, self)


def layernorm(x, p: LayerNormParams) -> Tensor:
    return T.standardize(x, p.eps) * p.gamma + p.beta


class MLP(Module):
    """Two linear maps with GELU between; shape-preserving."""

    def __init__(self, dim: int, hidden: int | None, rng: Rng, spectral: str = "none"):
        hidden = hidden or 4 * dim
        self.fc1 = LinearLayer(dim, hidden, rng.child("fc1"), gain=SQRT2, spectral=spectral)
        self.fc2 = LinearLayer(hidden, dim, rng.child("fc2"), gain=1.0, spectral=spectral)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def mlp_block(x, block: MLP) -> Tensor:
    return block(x)


class CoordinateRangeError(ValueError):
    pass


class PositionalEncoder(Module):
    """sin(coords @ proj + bias) for coordinates normalized to [-1, 1]."""

    def __init__(self, dim: int, rng: Rng, coord_dim: int = 2, freq: float = math.pi):
        dtype = T.get_default_dtype()
        self.proj = Parameter((freq * rng.normal((coord_dim, dim))).astype(dtype))
        self.bias = Parameter(rng.uniform(-math.pi, math.pi, dim).astype(dtype))

    def __call__(self, coords) -> Tensor:
        return positional_embed(self, coords)


def positional_embed(enc: PositionalEncoder, coords) -> Tensor:
    c = coords.data if isinstance(coords, Tensor) else np.asarray(coords)
    if c.size and np.max(np.abs(c)) > 1.0 + 1e-6:
        raise CoordinateRangeError(f"coordinates must lie in [-1, 1], got max |c| = {np.max(np.abs(c)):.6g}")
    c = T._lift(coords, enc.proj)
    return T.sin(T.matmul(c, enc.proj) + enc.bias)
