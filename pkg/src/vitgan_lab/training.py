"""Adversarial training: losses, regularizers, Adam, EMA and the step loop.

One call to :func:`train_step` does one discriminator update and then one
generator update.  Each update runs on its own tape, so nothing recorded
for one can leak into the other.  Every random draw in a step comes from
a stream keyed by (seed, step, purpose), so the step is a pure function of
the state and the real batch.
"""

from __future__ import annotations

import collections
import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .augment import AUG_KINDS, AugmentDraw, apply_augment, draw_augment
from .models import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .rng import Rng
from .tensor import Tape, Tensor


class NonFiniteGradientError(FloatingPointError):
    """A gradient (or loss) went NaN/inf; carries the parameter name and step."""

    def __init__(self, name: str, step: int | None = None):
        self.name = name
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite gradient for {name}{where}")


@dataclass
class TrainingConfig:
    batch_size: int = 32
    lr: float = 0.002
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    bcr: bool = True
    bcr_lambda_real: float = 10.0
    bcr_lambda_fake: float = 10.0
    diffaug: bool = True
    aug_prob: float = 0.8
    aug_set: tuple = AUG_KINDS
    r1: bool = False
    r1_gamma: float = 10.0
    ema_decay: float = 0.999
    spectral_iters: int = 1
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.aug_set = tuple(self.aug_set)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        for name in ("adam_eps", "r1_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("bcr_lambda_real", "bcr_lambda_fake"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("adam_beta1", "adam_beta2", "aug_prob", "ema_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.adam_beta2 >= 1.0 or self.adam_beta1 >= 1.0:
            raise ValueError("Adam betas must be < 1")
        for k in self.aug_set:
            if k not in AUG_KINDS:
                raise ValueError(f"unknown augmentation {k!r}")
        if self.spectral_iters < 1:
            raise ValueError("spectral_iters must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["aug_set"] = list(self.aug_set)
        return d


# ---------------------------------------------------------------------------
# losses and regularizers


def nonsat_logistic_losses(real_logits, fake_logits):
    """(d_loss, g_loss) of the non-saturating logistic GAN objective."""
    real_logits, fake_logits = T._lift(real_logits), T._lift(fake_logits)
    d_loss = T.reduce_mean(T.softplus(-real_logits)) + T.reduce_mean(T.softplus(fake_logits))
    g_loss = T.reduce_mean(T.softplus(-fake_logits))
    return d_loss, g_loss


def _input_grad(disc, x: np.ndarray) -> np.ndarray:
    """d sum(D(x)) / dx for every sample at once (samples are independent)."""
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        out = T.reduce_sum(disc(xt))
        return tape.backward(out, wrt=[xt])[xt]


def r1_penalty(disc, real_batch, gamma: float) -> float:
    """(gamma / 2) * mean over the batch of ||grad_x D(x)||^2."""
    x = np.asarray(real_batch.data if isinstance(real_batch, Tensor) else real_batch)
    g = _input_grad(disc, x).astype(np.float64)
    per = np.sum(g.reshape(len(g), -1) ** 2, axis=1)
    return 0.5 * gamma * float(np.mean(per))


def r1_param_grads(disc, real_batch, gamma: float, params: dict):
    """R1 value and its gradient with respect to ``params``.

    The penalty is a function of an input gradient, and the tape is first
    order only.  Its parameter gradient is (gamma / B) times a Hessian-vector
    product, d/de grad_theta sum D(x + e g) at e = 0 with g = grad_x D fixed,
    which is taken by a central difference in e.
    """
    x = np.asarray(real_batch.data if isinstance(real_batch, Tensor) else real_batch)
    B = len(x)
    g = _input_grad(disc, x)
    g64 = g.astype(np.float64)
    value = 0.5 * gamma * float(np.mean(np.sum(g64.reshape(B, -1) ** 2, axis=1)))
    rms = float(np.sqrt(np.mean(g64**2)))
    if rms == 0.0:
        return value, {n: np.zeros_like(p.data) for n, p in params.items()}
    # step along g: small enough for the curvature error, large enough for rounding
    eps = (1e-6 if x.dtype == np.float64 else 1e-2) / rms
    sides = []
    for sgn in (1.0, -1.0):
        with Tape() as tape:
            out = T.reduce_sum(disc(Tensor((x + sgn * eps * g).astype(x.dtype))))
            gr = tape.backward(out, wrt=list(params.values()))
            sides.append({n: gr[p] for n, p in params.items()})
    coef = gamma / B / (2.0 * eps)
    grads = {n: (coef * (sides[0][n].astype(np.float64) - sides[1][n])).astype(params[n].dtype) for n in params}
    return value, grads


def _bcr_from_logits(clean, augmented, B: int, lam_real: float, lam_fake: float):
    diff = clean - augmented
    sq = T.square(diff)
    return T.scale(T.reduce_mean(sq[:B]), lam_real) + T.scale(T.reduce_mean(sq[B:]), lam_fake)


def bcr_penalty(disc, real, fake, rng: Rng, lam_real: float = 10.0, lam_fake: float = 10.0,
                kinds=AUG_KINDS, prob: float = 0.8, draw=None):
    """Balanced consistency penalty under one augmentation draw shared by both branches."""
    real, fake = T._lift(real), T._lift(fake)
    B = real.shape[0]
    if fake.shape != real.shape:
        raise T.ShapeError("bcr real vs fake", real.shape, fake.shape)
    _, H, W, _ = real.shape
    d = draw if draw is not None else draw_augment(rng, B, H, W, kinds, prob)
    both = T.concat([real, fake], axis=0)
    d2 = _stack_draw(d, d)
    logits = disc(T.concat([both, apply_augment(both, d2)], axis=0))
    return _bcr_from_logits(logits[: 2 * B], logits[2 * B :], B, lam_real, lam_fake)


def _stack_draw(a, b):
    cat = lambda x, y: np.concatenate([x, y], axis=0)
    return AugmentDraw(cat(a.brightness, b.brightness), cat(a.saturation, b.saturation),
                       cat(a.contrast, b.contrast), cat(a.shift, b.shift), cat(a.zoom, b.zoom),
                       cat(a.cutout, b.cutout), a.cutout_side, a.image_hw)


# ---------------------------------------------------------------------------
# optimizer and EMA


class Adam:
    """Adam with bias correction; moments live per parameter name."""

    def __init__(self, params: dict, lr=0.002, beta1=0.0, beta2=0.99, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros(p.shape) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape) for n, p in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, step_label: int | None = None):
        for n in params:
            if not np.all(np.isfinite(grads[n])):
                raise NonFiniteGradientError(n, step_label)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in params.items():
            g = grads[n].astype(np.float64)
            m = self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            v = self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)

    def state(self) -> dict:
        out = {"t": np.array(self.t)}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state(self, d: dict) -> None:
        self.t = int(d["t"])
        for n in self.m:
            self.m[n] = np.asarray(d[f"m/{n}"], dtype=np.float64)
            self.v[n] = np.asarray(d[f"v/{n}"], dtype=np.float64)


def adam_step(opt: Adam, params: dict, grads: dict, lr=None, beta1=None, beta2=None, eps=None):
    """Functional form of :meth:`Adam.step`; overrides apply to this call only."""
    saved = opt.lr, opt.beta1, opt.beta2, opt.eps
    opt.lr = saved[0] if lr is None else lr
    opt.beta1 = saved[1] if beta1 is None else beta1
    opt.beta2 = saved[2] if beta2 is None else beta2
    opt.eps = saved[3] if eps is None else eps
    try:
        opt.step(params, grads)
    finally:
        opt.lr, opt.beta1, opt.beta2, opt.eps = saved
    return params


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    """In place: ema <- decay * ema + (1 - decay) * params."""
    for n, p in params.items():
        cur = p.data if isinstance(p, Tensor) else np.asarray(p)
        if n not in ema:
            raise KeyError(f"EMA has no slot for {n}")
        if ema[n].shape != cur.shape:
            raise T.ShapeError(f"ema {n}", ema[n].shape, cur.shape)
        if decay == 1.0:
            continue
        ema[n] = (decay * ema[n] + (1.0 - decay) * cur).astype(ema[n].dtype)
    return ema


# ---------------------------------------------------------------------------
# state and step


@dataclass
class TrainState:
    gen: Generator
    disc: Discriminator
    ema: dict
    opt_g: Adam
    opt_d: Adam
    cfg: TrainingConfig
    rng: Rng
    step: int = 0
    history: collections.deque = field(default_factory=lambda: collections.deque(maxlen=256))

    def __post_init__(self):
        # module structure is fixed after construction; walk it once
        self.gparams = self.gen.parameters()
        self.dparams = self.disc.parameters()
        self.dspectral = [sw for _, sw in self.disc.named_spectral()]

    def ema_generator(self) -> Generator:
        """A copy of the generator carrying the averaged weights (sampling only)."""
        g = copy.deepcopy(self.gen)
        for n, p in g.parameters().items():
            p.data = self.ema[n].copy()
        return g


def init_train_state(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, tcfg: TrainingConfig) -> TrainState:
    root = Rng(tcfg.seed, "train")
    gen = Generator(gcfg, Rng(tcfg.seed, "init/generator"))
    disc = Discriminator(dcfg, Rng(tcfg.seed, "init/discriminator"))
    gp, dp = gen.parameters(), disc.parameters()
    opt_g = Adam(gp, tcfg.lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    opt_d = Adam(dp, tcfg.lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    ema = {n: p.data.copy() for n, p in gp.items()}
    return TrainState(gen, disc, ema, opt_g, opt_d, tcfg, root)


def _set_grad(params: dict, flag: bool):
    for p in params.values():
        p.requires_grad = flag


def _grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def _check_finite(value, name: str, step: int):
    if not np.all(np.isfinite(value)):
        raise NonFiniteGradientError(name, step)


def train_step(state: TrainState, real_batch, cfg: TrainingConfig | None = None) -> dict:
    """One discriminator update then one generator update; returns the metrics record."""
    cfg = cfg or state.cfg
    gen, disc = state.gen, state.disc
    real = np.asarray(real_batch.data if isinstance(real_batch, Tensor) else real_batch, dtype=T.get_default_dtype())
    B, H, W, _ = real.shape
    step = state.step
    srng = state.rng.child(f"step{step}")
    zdim = gen.cfg.latent_dim
    dt = real.dtype
    gparams, dparams = state.gparams, state.dparams

    # -- discriminator update --------------------------------------------------
    _set_grad(gparams, False)
    _set_grad(dparams, True)
    with T.no_grad():
        fake = gen(srng.child("z_d").normal((B, zdim)).astype(dt)).data
    sigmas = [sw.power_iter_sigma(cfg.spectral_iters) for sw in state.dspectral]
    draw = None
    if cfg.diffaug or cfg.bcr:
        # one draw shared by the loss and the consistency term, real and fake alike
        draw = draw_augment(srng.child("aug_d"), B, H, W, cfg.aug_set, cfg.aug_prob)
    with Tape() as tape:
        both = Tensor(np.concatenate([real, fake], axis=0))
        groups = []
        if cfg.bcr or not cfg.diffaug:
            groups.append(both)
        if draw is not None:
            groups.append(apply_augment(both, _stack_draw(draw, draw)))
        # a single discriminator pass over all image groups
        logits = disc(T.concat(groups, axis=0) if len(groups) > 1 else groups[0])
        scored = logits[-2 * B :] if cfg.diffaug else logits[: 2 * B]
        d_loss, _ = nonsat_logistic_losses(scored[:B], scored[B:])
        total = d_loss
        bcr_val = 0.0
        if cfg.bcr:
            bcr = _bcr_from_logits(logits[: 2 * B], logits[2 * B :], B, cfg.bcr_lambda_real, cfg.bcr_lambda_fake)
            total = total + bcr
            bcr_val = float(bcr.data)
        _check_finite(total.data, "discriminator loss", step)
        gr = tape.backward(total, wrt=list(dparams.values()))
        dgrads = {n: gr[p] for n, p in dparams.items()}
    d_loss_val = float(d_loss.data)
    if cfg.r1:
        _, r1g = r1_param_grads(disc, real, cfg.r1_gamma, dparams)
        for n in dgrads:
            dgrads[n] = dgrads[n] + r1g[n]
    d_norm = _grad_norm(dgrads)
    state.opt_d.step(dparams, dgrads, step)

    # -- generator update -------------------------------------------------------
    _set_grad(dparams, False)
    _set_grad(gparams, True)
    with Tape() as tape:
        fake_t = gen(srng.child("z_g").normal((B, zdim)).astype(dt))
        if cfg.diffaug:
            fake_t = apply_augment(fake_t, draw_augment(srng.child("aug_g"), B, H, W, cfg.aug_set, cfg.aug_prob))
        g_loss = T.reduce_mean(T.softplus(-disc(fake_t)))
        _check_finite(g_loss.data, "generator loss", step)
        gr = tape.backward(g_loss, wrt=list(gparams.values()))
        ggrads = {n: gr[p] for n, p in gparams.items()}
    _set_grad(dparams, True)
    g_norm = _grad_norm(ggrads)
    state.opt_g.step(gparams, ggrads, step)
    ema_update(state.ema, gparams, cfg.ema_decay)

    state.step += 1
    rec = {
        "step": step,
        "d_loss": d_loss_val,
        "g_loss": float(g_loss.data),
        "bcr": bcr_val,
        "d_grad_norm": d_norm,
        "g_grad_norm": g_norm,
        "sigma_min": min(sigmas) if sigmas else float("nan"),
        "sigma_max": max(sigmas) if sigmas else float("nan"),
    }
    state.history.append(rec)
    return rec


# ---------------------------------------------------------------------------
# metrics stream

METRIC_FIELDS = ("step", "d_loss", "g_loss", "bcr", "d_grad_norm", "g_grad_norm", "sigma_min", "sigma_max")


def format_record(rec: dict) -> list:
    return [str(rec["step"])] + [repr(float(rec[k])) for k in METRIC_FIELDS[1:]]


class MetricsWriter:
    """Append-only CSV of step records, flushed after every row."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(METRIC_FIELDS)
        self._fh.flush()

    def write(self, rec: dict):
        self._w.writerow(format_record(rec))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow(format_record(r))
    return buf.getvalue()
