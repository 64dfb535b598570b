"""Differentiable augmentations (color, translation, scaling, cutout).

Randomness is drawn up front into an :class:`AugmentDraw`; applying a draw
is a fixed differentiable function of the pixels.  Translation and scaling
are linear resampling maps, built as per-image [HW, HW] matrices and applied
with one batched matmul; cutout is a constant mask.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng

AUG_KINDS = ("translation", "color", "cutout", "scaling")


@dataclass
class AugmentDraw:
    brightness: np.ndarray  # [B] additive
    saturation: np.ndarray  # [B] scale about per-pixel channel mean
    contrast: np.ndarray  # [B] scale about image mean
    shift: np.ndarray  # [B, 2] integer (row, col)
    zoom: np.ndarray  # [B] scale factor, 1 = identity
    cutout: np.ndarray  # [B, 2] top-left corner, -1 = no cutout
    cutout_side: tuple
    image_hw: tuple

    @property
    def batch(self) -> int:
        return len(self.brightness)

    def is_identity(self) -> bool:
        return (
            not self.brightness.any()
            and np.all(self.saturation == 1)
            and np.all(self.contrast == 1)
            and not self.shift.any()
            and np.all(self.zoom == 1)
            and np.all(self.cutout < 0)
        )

    def take(self, n: int) -> "AugmentDraw":
        return AugmentDraw(self.brightness[:n], self.saturation[:n], self.contrast[:n], self.shift[:n],
                           self.zoom[:n], self.cutout[:n], self.cutout_side, self.image_hw)


def identity_draw(B: int, H: int, W: int) -> AugmentDraw:
    return AugmentDraw(np.zeros(B), np.ones(B), np.ones(B), np.zeros((B, 2), int), np.ones(B),
                       -np.ones((B, 2), int), (H // 2, W // 2), (H, W))


def draw_augment(rng: Rng, B: int, H: int, W: int, kinds=AUG_KINDS, prob: float = 0.8) -> AugmentDraw:
    """Sample per-image augmentation parameters; each kind fires with ``prob``."""
    for k in kinds:
        if k not in AUG_KINDS:
            raise ValueError(f"unknown augmentation {k!r}")
    d = identity_draw(B, H, W)
    g = rng.generator()
    # one fixed sequence of draws regardless of which kinds are enabled
    fire = g.random((4, B)) < prob
    bright = g.uniform(-0.5, 0.5, B)
    sat = g.uniform(0.0, 2.0, B)
    con = g.uniform(0.5, 1.5, B)
    sh = H // 8, W // 8
    shift = np.stack([g.integers(-sh[0], sh[0] + 1, B), g.integers(-sh[1], sh[1] + 1, B)], axis=1)
    zoom = g.uniform(0.75, 1.25, B)
    side = d.cutout_side
    corner = np.stack([g.integers(0, H - side[0] + 1, B), g.integers(0, W - side[1] + 1, B)], axis=1)
    if "color" in kinds:
        f = fire[1]
        d.brightness = np.where(f, bright, 0.0)
        d.saturation = np.where(f, sat, 1.0)
        d.contrast = np.where(f, con, 1.0)
    if "translation" in kinds:
        d.shift = np.where(fire[0][:, None], shift, 0)
    if "scaling" in kinds:
        d.zoom = np.where(fire[3], zoom, 1.0)
    if "cutout" in kinds:
        d.cutout = np.where(fire[2][:, None], corner, -1)
    return d


@functools.lru_cache(maxsize=256)
def _translation(H: int, W: int, dy: int, dx: int) -> np.ndarray:
    M = np.zeros((H * W, H * W))
    i, j = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    si, sj = i - dy, j - dx
    ok = (si >= 0) & (si < H) & (sj >= 0) & (sj < W)
    M[(i * W + j)[ok], (si * W + sj)[ok]] = 1.0
    M.setflags(write=False)
    return M


def translation_matrix(H: int, W: int, dy: int, dx: int) -> np.ndarray:
    """out[i, j] = in[i - dy, j - dx], zero outside."""
    return _translation(H, W, int(dy), int(dx)).copy()


def _resample_matrices(H: int, W: int, zoom, shift) -> np.ndarray:
    """Per-image [HW, HW] maps for a shift followed by a bilinear zoom.

    Output pixel p of image b reads the shifted image at the zoomed position
    c + (p - c) / s, i.e. the source image at that position minus the shift.
    A bilinear tap contributes only if it lies inside the image both before
    and after the shift (zero fill at both stages).
    """
    zoom = np.asarray(zoom, dtype=np.float64).reshape(-1, 1, 1)
    shift = np.asarray(shift, dtype=np.int64).reshape(-1, 2)
    B = len(zoom)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    i, j = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    y = cy + (i - cy) / zoom  # [B, H, W]
    x = cx + (j - cx) / zoom
    y0, x0 = np.floor(y).astype(np.int64), np.floor(x).astype(np.int64)
    fy, fx = y - y0, x - x0
    dy, dx = shift[:, 0, None, None], shift[:, 1, None, None]
    bidx = np.broadcast_to(np.arange(B)[:, None, None], y.shape)
    rows = np.broadcast_to(i * W + j, y.shape)
    M = np.zeros((B, H * W, H * W))
    for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            sy, sx = yy - dy, xx - dx
            wgt = wy * wx
            ok = ((yy >= 0) & (yy < H) & (xx >= 0) & (xx < W) & (sy >= 0) & (sy < H) & (sx >= 0) & (sx < W)
                  & (wgt != 0.0))
            np.add.at(M, (bidx[ok], rows[ok], (sy * W + sx)[ok]), wgt[ok])
    return M


def scaling_matrix(H: int, W: int, s: float) -> np.ndarray:
    """Bilinear zoom by ``s`` about the image center; samples outside are zero."""
    return _resample_matrices(H, W, [s], [[0, 0]])[0]


def cutout_mask(H: int, W: int, corner, side) -> np.ndarray:
    """[H, W] mask of ones with a zeroed ``side`` rectangle at ``corner`` (row, col)."""
    m = np.ones((H, W))
    r, c = int(corner[0]), int(corner[1])
    if r >= 0 and c >= 0:
        m[r : r + side[0], c : c + side[1]] = 0.0
    return m


def apply_augment(x, d: AugmentDraw) -> T.Tensor:
    """Apply a draw to images [B, H, W, C]: color, then geometry, then cutout."""
    x = T._lift(x)
    B, H, W, C = x.shape
    if B != d.batch or (H, W) != tuple(d.image_hw):
        raise T.ShapeError("augment draw", x.shape, (d.batch,) + tuple(d.image_hw))
    dt = x.dtype
    col = lambda a: T.Tensor(np.asarray(a, dtype=dt).reshape(B, 1, 1, 1))

    if d.brightness.any():
        x = x + col(d.brightness)
    if np.any(d.saturation != 1):
        m = T.reduce_mean(x, axis=3, keepdims=True)
        x = (x - m) * col(d.saturation) + m
    if np.any(d.contrast != 1):
        m = T.reduce_mean(x, axis=(1, 2, 3), keepdims=True)
        x = (x - m) * col(d.contrast) + m

    if d.shift.any() or np.any(d.zoom != 1):
        mats = _resample_matrices(H, W, d.zoom, d.shift)
        x = T.matmul(T.Tensor(mats.astype(dt)), x.reshape(B, H * W, C)).reshape(B, H, W, C)

    if np.any(d.cutout >= 0):
        mask = np.stack([cutout_mask(H, W, d.cutout[b], d.cutout_side) for b in range(B)])
        x = x * T.Tensor(mask.astype(dt)[..., None])
    return x


def diff_augment(batch, rng: Rng, kinds=AUG_KINDS, prob: float = 0.8) -> T.Tensor:
    batch = T._lift(batch)
    B, H, W, _ = batch.shape
    return apply_augment(batch, draw_augment(rng, B, H, W, kinds, prob))
