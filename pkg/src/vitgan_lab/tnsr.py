"""TNSR v1 tensor dump format and checkpoint directories.

A dump is one ASCII header line ``TNSR v1 <dtype> <ndim> <d0> <d1> ...``
followed by the raw little-endian scalars in row-major order.  A checkpoint
is a directory holding ``manifest.json`` plus one ``.tnsr`` file per tensor.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class TnsrError(ValueError):
    pass


def dumps(arr) -> bytes:
    arr = np.asarray(arr)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise TnsrError(f"unsupported dtype {name}")
    dims = " ".join(str(d) for d in arr.shape)
    header = f"TNSR v1 {name} {arr.ndim}" + (f" {dims}" if dims else "") + "\n"
    body = np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes()
    return header.encode("ascii") + body


def loads(buf: bytes) -> np.ndarray:
    nl = buf.find(b"\n")
    if nl < 0:
        raise TnsrError("missing header line")
    parts = buf[:nl].decode("ascii").split()
    if len(parts) < 4 or parts[0] != "TNSR" or parts[1] != "v1":
        raise TnsrError(f"bad header {buf[:nl]!r}")
    name, ndim = parts[2], int(parts[3])
    if name not in _DTYPES:
        raise TnsrError(f"unsupported dtype {name}")
    shape = tuple(int(d) for d in parts[4:])
    if len(shape) != ndim:
        raise TnsrError(f"header declares ndim {ndim} but lists {len(shape)} extents")
    body = buf[nl + 1 :]
    count = int(np.prod(shape)) if shape else 1
    expected = count * np.dtype(_DTYPES[name]).itemsize
    if len(body) != expected:
        raise TnsrError(f"payload has {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype=_DTYPES[name]).astype(name).reshape(shape)


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def _fname(name: str) -> str:
    return name.replace("/", "__") + ".tnsr"


def save_checkpoint(directory, tensors: dict, meta: dict | None = None) -> None:
    """Write ``tensors`` (name -> array) plus a manifest with ``meta``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in tensors.items():
        fn = _fname(name)
        save(d / fn, arr)
        files[name] = fn
    manifest = {"format": "TNSR v1", "tensors": files, "meta": meta or {}}
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    os.replace(tmp, d / "manifest.json")


def load_checkpoint(directory) -> tuple[dict, dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise TnsrError(f"no manifest.json in {d}") from None
    tensors = {name: load(d / fn) for name, fn in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {})
