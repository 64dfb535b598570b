"""Distribution distances for small image sets and a gradient-norm stability report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng


def _flat(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 1 or len(X) == 0:
        raise ValueError("empty sample set")
    return X.reshape(len(X), -1)


def _sqdist(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def median_bandwidth(X, Y=None) -> float:
    """Median pairwise distance over the pooled set (distinct pairs only)."""
    Z = _flat(X) if Y is None else np.concatenate([_flat(X), _flat(Y)])
    d = _sqdist(Z, Z)[np.triu_indices(len(Z), 1)]
    bw = float(np.sqrt(np.median(d))) if d.size else 1.0
    return bw if bw > 0 else 1.0


def mmd2(X, Y, bandwidth: float | None = None) -> float:
    """Biased squared MMD with k(a, b) = exp(-|a - b|^2 / (2 bw^2))."""
    X, Y = _flat(X), _flat(Y)
    if len(X) < 2 or len(Y) < 2:
        raise ValueError("mmd2 needs at least 2 samples per set")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch {X.shape[1]} vs {Y.shape[1]}")
    bw = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ValueError("bandwidth must be positive")
    s = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-s * _sqdist(X, X)).mean()
    kyy = np.exp(-s * _sqdist(Y, Y)).mean()
    kxy = np.exp(-s * _sqdist(X, Y)).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


def random_features(X, feature_seed: int = 0, feature_dim: int = 64) -> np.ndarray:
    """tanh of a seeded Gaussian projection scaled by 1/sqrt(input dim)."""
    X = _flat(X)
    d = X.shape[1]
    rng = Rng(feature_seed, "metrics/rff")
    proj = rng.normal((d, feature_dim)) / math.sqrt(d)
    bias = rng.uniform(-1.0, 1.0, feature_dim)
    return np.tanh(X @ proj + bias)


def _psd_sqrt(C):
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(mu1, C1, mu2, C2) -> float:
    """|mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}).

    tr (C1 C2)^{1/2} equals tr (S C2 S)^{1/2} with S = C1^{1/2}, and the
    latter is symmetric PSD, so both roots come from eigh.
    """
    S = _psd_sqrt(C1)
    M = S @ C2 @ S
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = np.asarray(mu1) - np.asarray(mu2)
    val = float(diff @ diff + np.trace(C1) + np.trace(C2) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def rffd(X, Y, feature_seed: int = 0, feature_dim: int = 64) -> float:
    """Frechet distance between Gaussian fits of seeded random features."""
    X, Y = _flat(X), _flat(Y)
    if len(X) < 2 or len(Y) < 2:
        raise ValueError("rffd needs at least 2 samples per set")
    fx = random_features(X, feature_seed, feature_dim)
    fy = random_features(Y, feature_seed, feature_dim)
    return frechet_distance(fx.mean(0), np.cov(fx, rowvar=False), fy.mean(0), np.cov(fy, rowvar=False))


# ---------------------------------------------------------------------------
# stability


class MetricsCsvError(ValueError):
    pass


def read_metrics_csv(path, column: str = "d_grad_norm") -> np.ndarray:
    """One column of a metrics CSV as float64; malformed rows raise with the line number."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MetricsCsvError(f"{path}:1: empty file")
    header = rows[0]
    if column not in header:
        raise MetricsCsvError(f"{path}:1: no column {column!r} in header")
    k = header.index(column)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise MetricsCsvError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            out.append(float(row[k]))
        except ValueError:
            raise MetricsCsvError(f"{path}:{lineno}: bad number {row[k]!r}") from None
    return np.array(out)


@dataclass
class SeriesSummary:
    label: str
    series: np.ndarray
    median: float
    max_ratio: float
    log_var: float
    nan_step: int | None
    spiking: bool


def summarize_series(series, spike_ratio: float = 10.0, label: str = "") -> SeriesSummary:
    s = np.asarray(series, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(s))
    nan_step = int(bad[0]) if bad.size else None
    ok = s[np.isfinite(s)]
    if ok.size == 0:
        return SeriesSummary(label, s, math.nan, math.inf, math.inf, nan_step, True)
    med = float(np.median(ok))
    ratio = float(ok.max() / med) if med > 0 else math.inf
    pos = ok[ok > 0]
    log_var = float(np.var(np.log(pos))) if pos.size else math.inf
    spiking = nan_step is not None or ratio > spike_ratio
    return SeriesSummary(label, s, med, ratio, log_var, nan_step, spiking)


@dataclass
class StabilityReport:
    configs: dict  # name -> list[SeriesSummary]
    spike_ratio: float

    def spiking_count(self, name: str) -> int:
        return sum(r.spiking for r in self.configs[name])

    def mean_log_var(self, name: str) -> float:
        return float(np.mean([r.log_var for r in self.configs[name]]))

    def more_stable(self, a: str, b: str) -> bool:
        """Fewer spiking seeds wins; ties go to the lower log-norm variance."""
        sa, sb = self.spiking_count(a), self.spiking_count(b)
        if sa != sb:
            return sa < sb
        return self.mean_log_var(a) < self.mean_log_var(b)

    def table(self) -> str:
        lines = ["config,seed,median,max_ratio,log_var,nan_step,spiking"]
        for name, rows in self.configs.items():
            for r in rows:
                nan = "" if r.nan_step is None else str(r.nan_step)
                lines.append(f"{name},{r.label},{r.median:.6g},{r.max_ratio:.6g},{r.log_var:.6g},{nan},{int(r.spiking)}")
        return "\n".join(lines)


def stability_analyze(paths: dict, spike_ratio: float = 10.0) -> StabilityReport:
    """``paths`` maps a config name to its per-seed metric CSVs (or raw series)."""
    out = {}
    for name, items in paths.items():
        if not items:
            raise ValueError(f"config {name!r} has no seeds")
        rows = []
        for i, it in enumerate(items):
            series = it if isinstance(it, (list, tuple, np.ndarray)) else read_metrics_csv(it)
            rows.append(summarize_series(series, spike_ratio, label=str(i)))
        out[name] = rows
    return StabilityReport(out, spike_ratio)
