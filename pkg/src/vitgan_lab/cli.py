"""Command-line front end.

Exit codes: 0 success, 1 configuration / usage error, 2 numeric abort
(a non-finite gradient during training).
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import runner, verify
from .data import SyntheticDataset
from .metrics import stability_analyze
from .patches import tile_grid, write_pnm
from .rng import Rng
from .tnsr import TnsrError, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numeric aborts here
    def error(self, message):
        raise UsageError(message)


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _load_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise C.ConfigError("training.steps", "must be >= 0")
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, steps=args.steps))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed])
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out=args.out)
    if getattr(args, "aug_bundle", None) is not None:
        cfg = C.set_aug_bundle(cfg, args.aug_bundle == "on")
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    results = runner.run_many([(cfg, s, cfg.out) for s in cfg.seeds], log=_log)
    print(f"config {cfg.hash()} -> {runner.experiment_dir(cfg)}")
    for r in results:
        extra = f" (aborted at step {r.abort_step})" if r.status == "abort" else ""
        print(f"seed {r.seed}: {r.status}{extra}, mmd2 {r.mmd2_step0:.4g} -> {r.mmd2_final:.4g}")
    return EXIT_ABORT if any(r.status == "abort" for r in results) else EXIT_OK


def cmd_verify(args) -> int:
    if args.suite not in list(verify.SUITES) + ["all"]:
        raise UsageError(f"unknown suite {args.suite!r}; expected one of {sorted(verify.SUITES) + ['all']}")
    rows = verify.run_suite(args.suite)
    print(verify.format_table(rows))
    n_fail = sum(not r.passed for r in rows)
    print(f"{len(rows) - n_fail}/{len(rows)} checks passed")
    return EXIT_OK if n_fail == 0 else EXIT_CONFIG


GRID_KEYS = {"base", "variants", "output_maps", "discriminators", "overlap", "aug_bundle"}


def load_grid(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise C.ConfigError("", f"invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise C.ConfigError("", "grid must be a JSON object")
    for k in raw:
        if k not in GRID_KEYS:
            raise C.ConfigError(k, "unknown key")
    base = C.from_dict(raw.get("base", {}))
    axes = {
        "variants": raw.get("variants", [base.generator.variant]),
        "output_maps": raw.get("output_maps", [base.generator.output_map]),
        "discriminators": raw.get("discriminators", ["L2+ISN"]),
        "overlap": raw.get("overlap", [True]),
        "aug_bundle": raw.get("aug_bundle", [None]),
    }
    for k, v in axes.items():
        if not isinstance(v, list) or not v:
            raise C.ConfigError(k, "must be a non-empty list")
    return base, axes


def grid_cells(base: C.ExperimentConfig, axes: dict):
    """(label, config) for every cell of the cartesian grid."""
    cells = []
    for var, om, reg, ov, ab in itertools.product(axes["variants"], axes["output_maps"], axes["discriminators"],
                                                  axes["overlap"], axes["aug_bundle"]):
        try:
            g = dataclasses.replace(base.generator, variant=var, output_map=om)
        except ValueError as e:
            raise C.ConfigError("variants", str(e)) from None
        cfg = C.apply_regime(dataclasses.replace(base, generator=g), reg, bool(ov))
        label = f"{var}+{om}/{reg}/overlap={'on' if ov else 'off'}"
        if ab is not None:
            cfg = C.set_aug_bundle(cfg, bool(ab))
            label += f"/aug={'on' if ab else 'off'}"
        cells.append((label, cfg))
    return cells


def cmd_ablate(args) -> int:
    base, axes = load_grid(args.config)
    if args.steps is not None:
        base = dataclasses.replace(base, training=dataclasses.replace(base.training, steps=args.steps))
    if args.seed is not None:
        base = dataclasses.replace(base, seeds=[args.seed])
    out = Path(args.out or base.out)
    cells = grid_cells(base, axes)
    jobs = [(cfg, s, str(out)) for _, cfg in cells for s in cfg.seeds]
    labels = [label for label, cfg in cells for _ in cfg.seeds]
    results = []
    for (cfg, s, o), label in zip(jobs, labels):
        try:
            results.append((label, cfg, runner.run_many([(cfg, s, o)], log=_log)[0], ""))
        except Exception as e:  # a broken cell is recorded, not fatal
            results.append((label, cfg, None, f"{type(e).__name__}: {e}"))
    out.mkdir(parents=True, exist_ok=True)
    header = "cell,hash,seed,status,mmd2_step0,mmd2_final,max_ratio,log_var,spiking"
    lines = [header]
    for label, cfg, r, err in results:
        if r is None:
            lines.append(f"{label},{cfg.hash()},,error: {err.replace(',', ';')},,,,,")
            continue
        rep = stability_analyze({label: [Path(r.run_dir) / "metrics.csv"]})
        row = rep.configs[label][0]
        lines.append(f"{label},{r.hash},{r.seed},{r.status},{r.mmd2_step0!r},{r.mmd2_final!r},"
                     f"{row.max_ratio!r},{row.log_var!r},{int(row.spiking)}")
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    table = _text_table([l.split(",") for l in lines])
    (out / "ablate.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def _text_table(rows) -> str:
    widths = [max(len(r[i]) if i < len(r) else 0 for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def cmd_lipschitz_probe(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    scales = [float(s) for s in args.scales.split(",")]
    kernels = ["dot_product", "l2_tied"] if args.kernel == "both" else [args.kernel]
    print("kernel,seed,scale,lipschitz,ratio_to_first")
    for k in kernels:
        for s in seeds:
            vals = verify.lipschitz_growth(s, k, scales, iters=args.iters)
            for sc, v in zip(scales, vals):
                print(f"{k},{s},{sc:g},{v:.6g},{v / vals[0]:.6g}")
    return EXIT_OK


def cmd_sample(args) -> int:
    gen, cfg, meta = runner.load_generator(args.checkpoint, use_ema=not args.no_ema)
    z = Rng(args.seed, "sample/z").normal((args.count, cfg.generator.latent_dim)).astype(np.float32)
    which = "raw" if args.no_ema else "ema"
    out = args.out or str(Path(args.checkpoint).parent / f"sample_{which}_{args.count}.pgm")
    runner.write_samples(out, gen, z, f"config {meta['hash']} seed {meta['seed']} step {meta['step']} {which}")
    print(out)
    return EXIT_OK


def cmd_export(args) -> int:
    if args.what == "dataset":
        cfg = _load_config(args)
        ds = SyntheticDataset(cfg.dataset, cfg.generator.image_size, cfg.seeds[0], "train")
        imgs = ds.take(0, args.count, np.float64)
        out = args.out or f"{cfg.dataset}_preview.pgm"
        write_pnm(out, tile_grid(imgs), f"config {cfg.hash()} dataset {cfg.dataset} seed {cfg.seeds[0]}")
        print(out)
        return EXIT_OK
    if not args.checkpoint:
        raise UsageError("export generator needs --checkpoint")
    gen, cfg, meta = runner.load_generator(args.checkpoint, use_ema=not args.no_ema)
    out = args.out or str(Path(args.checkpoint).parent / "generator_export")
    save_checkpoint(out, gen.state_dict(), {"config": cfg.to_dict(), "hash": meta["hash"], "seed": meta["seed"],
                                            "step": meta["step"], "weights": "raw" if args.no_ema else "ema"})
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vitgan-lab", description="Desk-scale ViT GAN experiments and oracle suites.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--out", help="output root (overrides the config)")
        sp.add_argument("--steps", type=int, help="training steps (overrides the config)")
        if seed:
            sp.add_argument("--seed", type=int, help="run this seed only")

    sp = sub.add_parser("train", help="train one config for each seed")
    common(sp)
    sp.add_argument("--aug-bundle", choices=("on", "off"), help="toggle DiffAug and bCR together")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("verify", help="run an oracle suite")
    sp.add_argument("suite", help="gradcheck | spectral | lipschitz | patch | all")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("ablate", help="train every cell of a grid config")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("lipschitz-probe", help="Jacobian norm of one attention layer across input scales")
    sp.add_argument("--kernel", choices=("dot_product", "l2_tied", "both"), default="both")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--scales", default="1,10,100")
    sp.add_argument("--iters", type=int, default=200)
    sp.set_defaults(fn=cmd_lipschitz_probe)

    sp = sub.add_parser("sample", help="tiled sample grid from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-ema", action="store_true", help="use the raw generator instead of the EMA copy")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("export", help="dataset preview grid or standalone generator weights")
    sp.add_argument("what", choices=("dataset", "generator"))
    common(sp)
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--checkpoint")
    sp.add_argument("--no-ema", action="store_true")
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, TnsrError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
