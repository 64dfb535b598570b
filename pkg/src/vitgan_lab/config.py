"""Experiment configuration: strict JSON, canonical form, 64-bit FNV-1a hash."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import KINDS
from .models import DiscriminatorConfig, GeneratorConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    """Bad configuration; ``key`` is a dotted path to the offending entry."""

    def __init__(self, key: str, msg: str):
        self.key = key
        super().__init__(f"{key}: {msg}" if key else msg)


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# Discriminator regimes of the ablation grid: (spectral mode, kernel, R1 on)
DISC_REGIMES = {
    "R1": ("none", "dot_product", True),
    "SN": ("sn", "dot_product", False),
    "ISN": ("isn", "dot_product", False),
    "L2+ISN": ("isn", "l2_tied", False),
}

# desk-scale defaults: 8x8 grayscale, patch 2 (a 4x4 token grid)
TOY_GENERATOR = dict(blocks=2, width=32, heads=4, patch=2, image_size=8, channels=1, latent_dim=32)
TOY_DISCRIMINATOR = dict(blocks=1, width=32, heads=4, patch=2, image_size=8, channels=1)


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(**TOY_GENERATOR))
    discriminator: DiscriminatorConfig = field(default_factory=lambda: DiscriminatorConfig(**TOY_DISCRIMINATOR))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dataset: str = "gaussian_blobs"
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    eval_samples: int = 256
    sample_every: int = 500

    def __post_init__(self):
        if self.dataset not in KINDS:
            raise ConfigError("dataset", f"unknown dataset {self.dataset!r}; expected one of {KINDS}")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of non-negative integers")
        if self.eval_samples < 2:
            raise ConfigError("eval_samples", "must be >= 2")
        if self.sample_every < 0:
            raise ConfigError("sample_every", "must be >= 0")
        g, d = self.generator, self.discriminator
        if (g.image_size, g.channels) != (d.image_size, d.channels):
            raise ConfigError("discriminator.image_size", "generator and discriminator image shapes differ")

    def to_dict(self) -> dict:
        t = self.training.to_dict()
        t.pop("seed")
        return {
            "generator": self.generator.to_dict(),
            "discriminator": self.discriminator.to_dict(),
            "training": t,
            "dataset": self.dataset,
            "seeds": list(self.seeds),
            "out": self.out,
            "eval_samples": self.eval_samples,
            "sample_every": self.sample_every,
        }

    def dumps(self) -> str:
        return canonical_json(self.to_dict())

    def hash(self) -> str:
        """Identity of the experiment: everything except where it is written and which seeds run."""
        d = self.to_dict()
        d.pop("out")
        d.pop("seeds")
        return f"{fnv1a64(canonical_json(d).encode()):016x}"

    def training_for(self, seed: int) -> TrainingConfig:
        return dataclasses.replace(self.training, seed=seed)


_SECTIONS = {"generator": GeneratorConfig, "discriminator": DiscriminatorConfig, "training": TrainingConfig}
_TOP = {"generator", "discriminator", "training", "dataset", "seeds", "out", "eval_samples", "sample_every"}


def _check_type(key, val, typ):
    ok = {
        "int": isinstance(val, int) and not isinstance(val, bool),
        "float": isinstance(val, (int, float)) and not isinstance(val, bool),
        "bool": isinstance(val, bool),
        "str": isinstance(val, str),
    }
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    for t in ("int", "float", "bool", "str"):
        if name.startswith(t) or name == t:
            if name.endswith("| None") and val is None:
                return
            if not ok[t]:
                raise ConfigError(key, f"expected {name}, got {type(val).__name__}")
            return


def _build(section: str, cls, raw, base: dict | None = None):
    if not isinstance(raw, dict):
        raise ConfigError(section, "must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    if section == "training":
        names.pop("seed")
    kw = dict(base or {})
    for k, v in raw.items():
        if k not in names:
            raise ConfigError(f"{section}.{k}", "unknown key")
        _check_type(f"{section}.{k}", v, names[k].type)
        kw[k] = tuple(v) if k == "aug_set" else v
    try:
        return cls(**kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(section, str(e)) from None


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    for k in raw:
        if k not in _TOP:
            raise ConfigError(k, "unknown key")
    kw = {}
    bases = {"generator": TOY_GENERATOR, "discriminator": TOY_DISCRIMINATOR, "training": {}}
    for sec, cls in _SECTIONS.items():
        kw[sec] = _build(sec, cls, raw.get(sec, {}), bases[sec])
    for k in ("dataset", "out"):
        if k in raw:
            _check_type(k, raw[k], "str")
            kw[k] = raw[k]
    for k in ("eval_samples", "sample_every"):
        if k in raw:
            _check_type(k, raw[k], "int")
            kw[k] = raw[k]
    if "seeds" in raw:
        if not isinstance(raw["seeds"], list):
            raise ConfigError("seeds", "must be a list")
        kw["seeds"] = list(raw["seeds"])
    return ExperimentConfig(**kw)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def apply_regime(cfg: ExperimentConfig, regime: str, overlap: bool) -> ExperimentConfig:
    """Copy of ``cfg`` with one discriminator ablation cell applied."""
    if regime not in DISC_REGIMES:
        raise ConfigError("discriminators", f"unknown regime {regime!r}; expected one of {list(DISC_REGIMES)}")
    mode, kernel, r1 = DISC_REGIMES[regime]
    d = dataclasses.replace(cfg.discriminator, spectral=mode, kernel=kernel,
                            overlap=None if overlap else 0)
    t = dataclasses.replace(cfg.training, r1=r1)
    return dataclasses.replace(cfg, discriminator=d, training=t)


def set_aug_bundle(cfg: ExperimentConfig, on: bool) -> ExperimentConfig:
    """Toggle DiffAug and bCR together, the way the ablation tables treat them."""
    return dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, diffaug=on, bcr=on))
