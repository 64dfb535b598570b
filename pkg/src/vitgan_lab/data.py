"""Deterministic synthetic image datasets.

Every sample is a pure function of (seed, stream, index): the index is used
as the counter of a keyed generator, so any sample can be regenerated alone
and in any order.  Images are [H, W, 1] with values in [-1, 1].

gaussian_blobs
    One isotropic blob of width 1.5 px.  The center is drawn from a
    two-component mixture: mode 0 at (0.3, 0.3) * (H - 1), mode 1 at
    (0.7, 0.7) * (H - 1), picked with equal probability, plus per-axis
    normal jitter of std H / 16.  Pixel = 2 exp(-r^2 / (2 * 1.5^2)) - 1,
    so the background is -1 and the peak approaches +1.
two_mode_stripes
    Pixel = 0.9 cos(2 pi (t + phi) / 4) with t the row index (horizontal
    stripes) or the column index (vertical stripes), orientation chosen
    with equal probability and phase phi ~ U[0, 4).  Mean over the
    population is 0; the two orientations are the two modes.
checker_textures
    Checkerboard with cell size c in {2, 4}, random parity, and amplitude
    a ~ U(0.6, 0.9): pixel = +a or -a.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng

KINDS = ("gaussian_blobs", "two_mode_stripes", "checker_textures")
BLOB_SIGMA = 1.5


def _blob(g: np.random.Generator, H: int) -> np.ndarray:
    mode = g.integers(0, 2)
    c = (0.3 if mode == 0 else 0.7) * (H - 1)
    cy, cx = c + g.normal(0.0, H / 16.0, 2)
    i, j = np.meshgrid(np.arange(H), np.arange(H), indexing="ij")
    r2 = (i - cy) ** 2 + (j - cx) ** 2
    return 2.0 * np.exp(-r2 / (2.0 * BLOB_SIGMA**2)) - 1.0


def _stripes(g: np.random.Generator, H: int) -> np.ndarray:
    vertical = g.integers(0, 2) == 1
    phi = g.uniform(0.0, 4.0)
    t = np.arange(H, dtype=np.float64)
    line = 0.9 * np.cos(2.0 * np.pi * (t + phi) / 4.0)
    return np.tile(line[None, :], (H, 1)) if vertical else np.tile(line[:, None], (1, H))


def _checker(g: np.random.Generator, H: int) -> np.ndarray:
    cell = (2, 4)[g.integers(0, 2)]
    parity = g.integers(0, 2)
    amp = g.uniform(0.6, 0.9)
    i, j = np.meshgrid(np.arange(H), np.arange(H), indexing="ij")
    sign = np.where(((i // cell + j // cell + parity) % 2) == 0, 1.0, -1.0)
    return amp * sign


_MAKERS = {"gaussian_blobs": _blob, "two_mode_stripes": _stripes, "checker_textures": _checker}


class SyntheticDataset:
    def __init__(self, kind: str, image_size: int = 8, seed: int = 0, stream: str = "train"):
        if kind not in KINDS:
            raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
        if image_size < 4:
            raise ValueError("image_size must be >= 4")
        self.kind, self.image_size, self.seed, self.stream = kind, image_size, seed, stream
        self._rng = Rng(seed, f"data/{kind}/{stream}")

    @property
    def shape(self):
        return (self.image_size, self.image_size, 1)

    def sample(self, index: int) -> np.ndarray:
        g = self._rng.generator(counter=int(index))
        img = _MAKERS[self.kind](g, self.image_size)
        return img[..., None]

    def batch(self, indices, dtype=np.float32) -> np.ndarray:
        return np.stack([self.sample(i) for i in indices]).astype(dtype)

    def take(self, start: int, n: int, dtype=np.float32) -> np.ndarray:
        return self.batch(range(start, start + n), dtype)
