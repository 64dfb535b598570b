"""Image <-> patch-sequence geometry and PGM/PPM image files.

Images are channels-last ``[..., H, W, C]``.  Patches are taken in raster
order over the P x P grid; each patch is flattened (row, col, channel).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class PatchGrid:
    image_h: int
    image_w: int
    channels: int
    patch_size: int
    overlap: int | None = None  # None -> patch_size // 2
    padding: str = "zero"  # or "clamp"

    def __post_init__(self):
        P = self.patch_size
        if P < 1 or self.image_h % P or self.image_w % P:
            raise ValueError(f"image {self.image_h}x{self.image_w} not divisible by patch size {P}")
        if self.overlap is None:
            object.__setattr__(self, "overlap", P // 2)
        if self.overlap < 0:
            raise ValueError("overlap must be >= 0")
        if self.padding not in ("zero", "clamp"):
            raise ValueError(f"unknown padding {self.padding!r}")

    @property
    def rows(self) -> int:
        return self.image_h // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_w // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.rows * self.cols

    @property
    def window(self) -> int:
        return self.patch_size + 2 * self.overlap

    @property
    def patch_dim(self) -> int:
        return self.window**2 * self.channels

    def with_overlap(self, o: int) -> "PatchGrid":
        return PatchGrid(self.image_h, self.image_w, self.channels, self.patch_size, o, self.padding)

    def _gather_index(self) -> np.ndarray:
        """Flat source index per output entry; H*W*C marks a zero-padded sample."""
        H, W, C, P, o = self.image_h, self.image_w, self.channels, self.patch_size, self.overlap
        K = self.window
        r0 = np.repeat(np.arange(self.rows) * P - o, self.cols)
        c0 = np.tile(np.arange(self.cols) * P - o, self.rows)
        rr = r0[:, None, None] + np.arange(K)[None, :, None]  # [L, K, 1]
        cc = c0[:, None, None] + np.arange(K)[None, None, :]  # [L, 1, K]
        rr, cc = np.broadcast_arrays(rr, cc)
        if self.padding == "clamp":
            inside = np.ones(rr.shape, bool)
            rr, cc = np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)
        else:
            inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        flat = (np.clip(rr, 0, H - 1) * W + np.clip(cc, 0, W - 1)) * C
        idx = flat[..., None] + np.arange(C)
        idx = np.where(inside[..., None], idx, H * W * C)
        return idx.reshape(self.seq_len, -1)


_INDEX_CACHE: dict = {}


def _index(g: PatchGrid):
    key = (g, "gather")
    if key not in _INDEX_CACHE:
        _INDEX_CACHE[key] = g._gather_index()
    return _INDEX_CACHE[key]


def _check_image(g, img):
    if tuple(img.shape[-3:]) != (g.image_h, g.image_w, g.channels):
        raise T.ShapeError("image vs grid", img.shape, (g.image_h, g.image_w, g.channels))


def patchify(g: PatchGrid, img) -> T.Tensor:
    """[..., H, W, C] -> [..., L, (P+2o)^2 * C]; out-of-image samples per ``g.padding``."""
    img = T._lift(img)
    _check_image(g, img)
    lead = img.shape[:-3]
    flat = img.reshape(lead + (-1,))
    idx = _index(g)
    if g.overlap and g.padding == "zero":
        flat = T.concat([flat, T.Tensor(np.zeros(lead + (1,), dtype=img.dtype))], axis=-1)
    return T.take(flat, idx, axis=-1)


def depatchify(g: PatchGrid, patches) -> T.Tensor:
    """Inverse of non-overlapping patchify: [..., L, P^2 * C] -> [..., H, W, C]."""
    patches = T._lift(patches)
    P, C = g.patch_size, g.channels
    if patches.ndim < 2 or tuple(patches.shape[-2:]) != (g.seq_len, P * P * C):
        raise T.ShapeError("depatchify", patches.shape, (g.seq_len, P * P * C))
    key = (g, "scatter")
    if key not in _INDEX_CACHE:
        fwd = g.with_overlap(0)._gather_index().reshape(-1)
        inv = np.empty_like(fwd)
        inv[fwd] = np.arange(fwd.size)
        _INDEX_CACHE[key] = inv
    lead = patches.shape[:-2]
    flat = patches.reshape(lead + (-1,))
    return T.take(flat, _INDEX_CACHE[key], axis=-1).reshape(lead + (g.image_h, g.image_w, C))


def _centers(n: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def patch_positions(g: PatchGrid) -> np.ndarray:
    """Normalized (row, col) cell centers in raster order, shape [L, 2]."""
    r, c = np.meshgrid(_centers(g.rows), _centers(g.cols), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1)


def pixel_coords(P: int) -> np.ndarray:
    """Normalized (row, col) pixel centers within a P x P patch, shape [P^2, 2]."""
    if P < 1:
        raise ValueError("P must be >= 1")
    r, c = np.meshgrid(_centers(P), _centers(P), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1)


# ---------------------------------------------------------------------------
# PGM / PPM


def to_uint8(img) -> np.ndarray:
    """Map [-1, 1] to [0, 255], rounding half to even."""
    a = np.asarray(img.data if isinstance(img, T.Tensor) else img, dtype=np.float64)
    return np.clip(np.rint((a + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) / 127.5 - 1.0


def write_pnm(path, img, comment: str | None = None) -> None:
    """Binary PGM (C=1) or PPM (C=3) from a [-1, 1] image [H, W, C]."""
    a = to_uint8(img)
    if a.ndim == 2:
        a = a[..., None]
    H, W, C = a.shape
    if C not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {C}")
    magic = b"P5" if C == 1 else b"P6"
    head = magic + b"\n"
    if comment:
        head += b"# " + comment.encode("ascii") + b"\n"
    head += f"{W} {H}\n255\n".encode("ascii")
    Path(path).write_bytes(head + a.tobytes())


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end : end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"unsupported PNM header {tokens}")
    C = 1 if magic == "P5" else 3
    a = np.frombuffer(buf[pos : pos + H * W * C], dtype=np.uint8).reshape(H, W, C)
    return from_uint8(a)


def tile_grid(images: np.ndarray, cols: int | None = None) -> np.ndarray:
    """Tile [N, H, W, C] into one image; empty cells stay at -1."""
    n, H, W, C = images.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    out = -np.ones((rows * H, cols * W, C))
    for i in range(n):
        r, c = divmod(i, cols)
        out[r * H : (r + 1) * H, c * W : (c + 1) * W] = images[i]
    return out
