"""ViT generator (three latent-injection variants) and ViT discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams
from .nn import SQRT2, LayerNormParams, LinearLayer, MLP, Module, PositionalEncoder
from .patches import PatchGrid, depatchify, patch_positions, patchify, pixel_coords
from .rng import Rng
from .tensor import Parameter

VARIANTS = ("A", "B", "C")
OUTPUT_MAPS = ("linear", "inr")


@dataclass
class GeneratorConfig:
    variant: str = "C"
    output_map: str = "inr"
    blocks: int = 4
    width: int = 384
    heads: int = 6
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    latent_dim: int = 384
    mapping_depth: int = 4
    mlp_ratio: int = 4
    inr_hidden: int | None = None
    demodulate: bool = True
    kernel: str = "dot_product"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.output_map not in OUTPUT_MAPS:
            raise ValueError(f"output_map must be one of {OUTPUT_MAPS}, got {self.output_map!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class DiscriminatorConfig:
    blocks: int = 4
    width: int = 384
    heads: int = 6
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    overlap: int | None = None  # None -> patch // 2
    kernel: str = "l2_tied"
    spectral: str = "isn"
    mlp_ratio: int = 4

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# building blocks


class MappingNetwork(Module):
    """z -> w, ``depth`` linear layers of width D with GELU between them."""

    def __init__(self, latent_dim: int, width: int, rng: Rng, depth: int = 4):
        dims = [latent_dim] + [width] * depth
        self.layers = [
            LinearLayer(dims[i], dims[i + 1], rng.child(f"l{i}"), gain=SQRT2 if i < depth - 1 else 1.0)
            for i in range(depth)
        ]

    def __call__(self, z):
        h = z
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.gelu(h)
        return h


class SelfModulatedLN(Module):
    """gamma(w) * standardize(h) + beta(w); neutral (plain LN) at init."""

    def __init__(self, dim: int, rng: Rng, eps: float = 1e-5):
        self.gamma_map = LinearLayer(dim, dim, rng.child("gamma"), zero_weight=True, bias_init=1.0)
        self.beta_map = LinearLayer(dim, dim, rng.child("beta"), zero_weight=True)
        self.eps = eps

    def __call__(self, h, w):
        if w is None:
            raise ValueError("self-modulated layernorm needs the latent w")
        B, D = w.shape
        g = self.gamma_map(w).reshape(B, 1, D)
        b = self.beta_map(w).reshape(B, 1, D)
        return T.standardize(h, self.eps) * g + b


def sln(h, w, p: SelfModulatedLN):
    return p(h, w)


class TransformerBlock(Module):
    """Pre-norm residual block: h' = MSA(N(h)) + h ; out = MLP(N(h')) + h'."""

    def __init__(self, dim: int, heads: int, rng: Rng, kernel: str = "dot_product",
                 spectral: str = "none", norm: str = "ln", mlp_ratio: int = 4):
        self.modulated = norm == "sln"
        make_norm = (lambda n: SelfModulatedLN(dim, rng.child(n))) if self.modulated else (lambda n: LayerNormParams(dim))
        self.norm1 = make_norm("n1")
        self.attn = AttentionParams(dim, heads, rng.child("attn"), kernel=kernel, spectral=spectral)
        self.norm2 = make_norm("n2")
        self.mlp = MLP(dim, mlp_ratio * dim, rng.child("mlp"), spectral=spectral)

    def _norm(self, p, h, w):
        return p(h, w) if self.modulated else p(h)

    def __call__(self, h, w=None):
        if self.modulated and w is None:
            raise ValueError("block uses self-modulated layernorm; w is required")
        h = self.attn(self._norm(self.norm1, h, w)) + h
        return self.mlp(self._norm(self.norm2, h, w)) + h


def block_forward(stack, layer: int, h, w=None):
    return stack[layer](h, w)


class InrDecoder(Module):
    """Per-patch coordinate MLP conditioned on the patch embedding.

    pixel = tanh(W2 sin(W1' e_p + b1) + b2), where e_p is the sine encoding of
    the pixel coordinate and W1' = W1 diag(s(y)) is modulated by the patch
    embedding y (and demodulated row-wise when ``demodulate``).
    """

    def __init__(self, dim: int, patch: int, channels: int, rng: Rng,
                 hidden: int | None = None, demodulate: bool = True):
        hidden = hidden or dim
        self.patch, self.channels, self.hidden = patch, channels, hidden
        self.coords = pixel_coords(patch)
        self.fourier = PositionalEncoder(dim, rng.child("fourier"))
        self.style = LinearLayer(dim, dim, rng.child("style"), bias_init=1.0)
        self.w1 = Parameter(rng.child("w1").normal((dim, hidden)).astype(T.get_default_dtype()))
        self.b1 = Parameter(np.zeros(hidden, dtype=T.get_default_dtype()))
        self.out = LinearLayer(hidden, channels, rng.child("out"))
        self.demodulate = demodulate

    def __call__(self, y):
        """[..., D] -> [..., P^2, C]"""
        e = self.fourier(self.coords)  # [P^2, D]
        s = self.style(y)  # [..., D]
        lead = s.shape[:-1]
        D = s.shape[-1]
        x = e * s.reshape(lead + (1, D))  # [..., P^2, D]
        h = T.matmul(x, self.w1)
        if self.demodulate:
            d = T.power(T.matmul(T.square(s), T.square(self.w1)) + 1e-8, -0.5)
            h = h * d.reshape(lead + (1, self.hidden))
        else:
            h = T.scale(h, 1.0 / np.sqrt(D))
        h = T.sin(h + self.b1)
        return T.tanh(self.out(h))


def inr_decode(decoder: InrDecoder, y_i):
    return decoder(y_i)


class LinearDecoder(Module):
    def __init__(self, dim: int, patch: int, channels: int, rng: Rng):
        self.proj = LinearLayer(dim, patch * patch * channels, rng.child("proj"))
        self.patch, self.channels = patch, channels

    def __call__(self, y):
        p = T.tanh(self.proj(y))
        return p.reshape(y.shape[:-1] + (self.patch * self.patch, self.channels))


# ---------------------------------------------------------------------------
# generator / discriminator


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: Rng):
        self.cfg = cfg
        D = cfg.width
        self.grid = PatchGrid(cfg.image_size, cfg.image_size, cfg.channels, cfg.patch, overlap=0)
        self.positions = patch_positions(self.grid)
        self.mapping = MappingNetwork(cfg.latent_dim, D, rng.child("mapping"), depth=cfg.mapping_depth)
        self.pos = PositionalEncoder(D, rng.child("pos"))
        norm = "sln" if cfg.variant == "C" else "ln"
        self.blocks = [
            TransformerBlock(D, cfg.heads, rng.child(f"block{i}"), kernel=cfg.kernel, norm=norm,
                             mlp_ratio=cfg.mlp_ratio)
            for i in range(cfg.blocks)
        ]
        self.final_norm = SelfModulatedLN(D, rng.child("final")) if cfg.variant == "C" else LayerNormParams(D)
        if cfg.output_map == "inr":
            self.decoder = InrDecoder(D, cfg.patch, cfg.channels, rng.child("inr"),
                                      hidden=cfg.inr_hidden, demodulate=cfg.demodulate)
        else:
            self.decoder = LinearDecoder(D, cfg.patch, cfg.channels, rng.child("linear"))

    def __call__(self, z):
        z = T._lift(z)
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise T.ShapeError("generator latent [B, z_dim]", z.shape, (None, self.cfg.latent_dim))
        B = z.shape[0]
        D = self.cfg.width
        L = self.grid.seq_len
        w = self.mapping(z)
        pos = self.pos(self.positions)  # [L, D]
        variant = self.cfg.variant
        if variant == "C":
            h = T.broadcast_to(pos, (B, L, D))
        elif variant == "A":
            h = pos + w.reshape(B, 1, D)
        else:
            h = T.concat([w.reshape(B, 1, D), T.broadcast_to(pos, (B, L, D))], axis=1)
        for blk in self.blocks:
            h = blk(h, w if variant == "C" else None)
        y = self.final_norm(h, w) if variant == "C" else self.final_norm(h)
        if variant == "B":
            y = y[:, 1:]
        patches = self.decoder(y).reshape(B, L, -1)
        return depatchify(self.grid, patches)


def generator_forward(gen: Generator, z):
    return gen(z)


class Discriminator(Module):
    def __init__(self, cfg: DiscriminatorConfig, rng: Rng):
        self.cfg = cfg
        D = cfg.width
        mode = cfg.spectral
        self.grid = PatchGrid(cfg.image_size, cfg.image_size, cfg.channels, cfg.patch, overlap=cfg.overlap)
        # class token sits at the center coordinate (0, 0)
        self.positions = np.concatenate([np.zeros((1, 2)), patch_positions(self.grid)])
        self.embed = LinearLayer(self.grid.patch_dim, D, rng.child("embed"), spectral=mode)
        self.cls = Parameter(np.zeros(D, dtype=T.get_default_dtype()))
        self.pos = PositionalEncoder(D, rng.child("pos"))
        self.blocks = [
            TransformerBlock(D, cfg.heads, rng.child(f"block{i}"), kernel=cfg.kernel, spectral=mode,
                             mlp_ratio=cfg.mlp_ratio)
            for i in range(cfg.blocks)
        ]
        self.norm = LayerNormParams(D)
        self.head = LinearLayer(D, 1, rng.child("head"), spectral=mode)

    def __call__(self, img):
        img = T._lift(img)
        g = self.grid
        if img.ndim != 4 or tuple(img.shape[1:]) != (g.image_h, g.image_w, g.channels):
            raise T.ShapeError("discriminator image [B, H, W, C]", img.shape, (None, g.image_h, g.image_w, g.channels))
        B = img.shape[0]
        D = self.cfg.width
        tokens = self.embed(patchify(g, img))  # [B, L, D]
        cls = T.broadcast_to(self.cls, (B, 1, D))
        h = T.concat([cls, tokens], axis=1) + self.pos(self.positions)
        for blk in self.blocks:
            h = blk(h)
        y = self.norm(h[:, 0])
        return self.head(y).reshape(B)


def discriminator_forward(disc: Discriminator, img):
    return disc(img)
