"""Run one experiment seed end to end and write its artifacts.

Layout under ``<out>/<hash>/``::

    config.json            canonical config
    eval.csv               hash,seed,step,generator,mmd2,rffd (appended)
    seed<k>/metrics.csv    one row per step
    seed<k>/samples/       tiled PGM/PPM grids, config hash in the header comment
    seed<k>/checkpoint/    TNSR tensors + manifest.json
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as C
from . import tensor as T
from .data import SyntheticDataset
from .metrics import median_bandwidth, mmd2, rffd
from .models import Generator
from .patches import tile_grid, write_pnm
from .rng import Rng
from .tnsr import load_checkpoint, save_checkpoint
from .training import METRIC_FIELDS, MetricsWriter, NonFiniteGradientError, TrainState, init_train_state, train_step


@dataclass
class RunResult:
    hash: str
    seed: int
    status: str  # "ok" | "abort"
    steps_run: int
    mmd2_step0: float
    mmd2_final: float
    mmd2_final_raw: float
    rffd_final: float
    run_dir: str
    abort_step: int | None = None
    message: str = ""


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("VITGAN_LAB_THREADS", "1")))
    except ValueError:
        return 1


def experiment_dir(cfg: C.ExperimentConfig, out: str | None = None) -> Path:
    return Path(out or cfg.out) / cfg.hash()


class Evaluator:
    """Fixed held-out reals, fixed latents and a fixed kernel bandwidth per seed."""

    def __init__(self, cfg: C.ExperimentConfig, seed: int):
        g = cfg.generator
        self.held = SyntheticDataset(cfg.dataset, g.image_size, seed, "heldout").take(0, cfg.eval_samples, np.float64)
        self.bandwidth = median_bandwidth(self.held)
        self.z = Rng(seed, "eval/z").normal((cfg.eval_samples, g.latent_dim)).astype(T.get_default_dtype())

    def images(self, gen: Generator) -> np.ndarray:
        with T.no_grad():
            return np.asarray(gen(self.z).data, dtype=np.float64)

    def score(self, gen: Generator):
        x = self.images(gen)
        return mmd2(x, self.held, self.bandwidth), rffd(x, self.held)


def _append_eval(path: Path, h: str, seed: int, step: int, which: str, m: float, r: float):
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write("hash,seed,step,generator,mmd2,rffd\n")
        fh.write(f"{h},{seed},{step},{which},{m!r},{r!r}\n")


def save_train_state(path, state: TrainState, cfg: C.ExperimentConfig, seed: int) -> None:
    tensors = {}
    for k, v in state.gen.state_dict().items():
        tensors[f"gen/{k}"] = v
    for k, v in state.ema.items():
        tensors[f"ema/{k}"] = v
    for k, v in state.disc.state_dict().items():
        tensors[f"disc/{k}"] = v
    for tag, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for k, v in opt.state().items():
            tensors[f"{tag}/{k}"] = np.asarray(v, dtype=np.float64)
    meta = {"config": cfg.to_dict(), "hash": cfg.hash(), "seed": seed, "step": state.step}
    save_checkpoint(path, {k: np.atleast_1d(np.asarray(v)) for k, v in tensors.items()}, meta)


def load_generator(path, use_ema: bool = True):
    """(generator, experiment config, meta) from a checkpoint directory."""
    tensors, meta = load_checkpoint(path)
    try:
        cfg = C.from_dict(meta["config"])
    except KeyError as e:
        raise C.ConfigError("checkpoint", f"manifest lacks {e}") from None
    if cfg.hash() != meta.get("hash"):
        raise C.ConfigError("checkpoint", "config does not match the stored hash")
    gen = Generator(cfg.generator, Rng(int(meta["seed"]), "init/generator"))
    prefix = "ema/" if use_ema else "gen/"
    want = gen.state_dict()
    sd = {}
    for k, ref in want.items():
        key = prefix + k
        if key not in tensors:
            raise C.ConfigError("checkpoint", f"missing tensor {key}")
        arr = tensors[key].reshape(ref.shape) if tensors[key].size == ref.size else tensors[key]
        sd[k] = arr
    gen.load_state_dict(sd)
    return gen, cfg, meta


def write_samples(path, gen: Generator, z: np.ndarray, comment: str) -> None:
    with T.no_grad():
        imgs = np.asarray(gen(z).data, dtype=np.float64)
    write_pnm(path, tile_grid(imgs), comment)


def run_seed(cfg: C.ExperimentConfig, seed: int, out: str | None = None, log=None) -> RunResult:
    h = cfg.hash()
    root = experiment_dir(cfg, out)
    run_dir = root / f"seed{seed}"
    (run_dir / "samples").mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(cfg.dumps() + "\n")
    eval_csv = root / "eval.csv"

    tcfg = cfg.training_for(seed)
    state = init_train_state(cfg.generator, cfg.discriminator, tcfg)
    data = SyntheticDataset(cfg.dataset, cfg.generator.image_size, seed, "train")
    ev = Evaluator(cfg, seed)
    z_show = Rng(seed, "samples/z").normal((16, cfg.generator.latent_dim)).astype(T.get_default_dtype())

    m0, r0 = ev.score(state.gen)
    _append_eval(eval_csv, h, seed, 0, "ema", m0, r0)
    B = tcfg.batch_size
    status, abort_step, message = "ok", None, ""
    with MetricsWriter(run_dir / "metrics.csv") as mw:
        for step in range(tcfg.steps):
            try:
                rec = train_step(state, data.take(step * B, B), tcfg)
            except NonFiniteGradientError as e:
                status, abort_step, message = "abort", step, str(e)
                nan = {k: math.nan for k in METRIC_FIELDS}
                nan["step"] = step
                mw.write(nan)
                (run_dir / "abort.txt").write_text(f"{message}\n")
                if log:
                    log(f"[{h} seed{seed}] aborted at step {step}: {message}")
                break
            mw.write(rec)
            if cfg.sample_every and (step + 1) % cfg.sample_every == 0:
                write_samples(run_dir / "samples" / f"step{step + 1:06d}.pgm", state.ema_generator(), z_show,
                              f"config {h} seed {seed} step {step + 1} ema")

    ema_gen = state.ema_generator()
    m1, r1 = ev.score(ema_gen)
    m1_raw, r1_raw = ev.score(state.gen)
    _append_eval(eval_csv, h, seed, state.step, "ema", m1, r1)
    _append_eval(eval_csv, h, seed, state.step, "raw", m1_raw, r1_raw)
    save_train_state(run_dir / "checkpoint", state, cfg, seed)
    if log:
        log(f"[{h} seed{seed}] {status} after {state.step} steps: mmd2 {m0:.4g} -> {m1:.4g} (ema), {m1_raw:.4g} (raw)")
    return RunResult(h, seed, status, state.step, m0, m1, m1_raw, r1, str(run_dir), abort_step, message)


def _run_seed_job(args):
    text, seed, out = args
    return run_seed(C.loads(text), seed, out)


def run_many(jobs, log=None):
    """``jobs`` is a list of (config, seed, out); runs in up to VITGAN_LAB_THREADS processes."""
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [run_seed(c, s, o, log) for c, s, o in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        results = list(ex.map(_run_seed_job, [(c.dumps(), s, o) for c, s, o in jobs]))
    if log:
        for r in results:
            log(f"[{r.hash} seed{r.seed}] {r.status}: mmd2 {r.mmd2_step0:.4g} -> {r.mmd2_final:.4g}")
    return results
