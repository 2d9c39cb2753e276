"""Command-line entry point: ``gslab {train,resume,intervene,sweep,eval,export}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .autodiff import BackwardError, DimensionError, SecondOrderError
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigKeyError, RunConfig, load as load_config
from .data import dump_points
from .evaluation import DEFAULT_THRESHOLDS
from .network import ConfigError
from .run import default_out_root, evaluate_checkpoint, resume_run, sweep, train_run
from .spectral import SpectralError
from .training import InterventionError, InterventionSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("gslab")


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _grid_item(text: str) -> tuple:
    key, sep, values = text.partition("=")
    if not sep or not key.strip() or not values.strip():
        raise argparse.ArgumentTypeError(f"expected key=v1,v2,..., got {text!r}")
    return key.strip(), [v.strip() for v in values.split(",")]


def _out_dir(args, config: Optional[RunConfig], default_name: str) -> Path:
    """``--out`` wins, then ``$GSL_OUT_DIR/<name>``, then the config's ``out_dir``."""
    if args.out:
        return Path(args.out)
    if config is not None and "GSL_OUT_DIR" not in os.environ:
        return Path(config.out_dir)
    return default_out_root() / default_name


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides({"seed": str(args.seed)})
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    run_dir = train_run(cfg, _out_dir(args, cfg, Path(args.config).stem), steps=args.steps)
    print(run_dir)
    return EXIT_OK


def cmd_resume(args) -> int:
    out = _out_dir(args, None, Path(args.checkpoint).parent.parent.name + "_resumed")
    print(resume_run(Path(args.checkpoint), out, steps=args.steps))
    return EXIT_OK


def cmd_intervene(args) -> int:
    spec = InterventionSpec(
        scale_lr_g=args.scale_lr_g,
        scale_lr_d=args.scale_lr_d,
        freeze=args.freeze or "none",
        reset_momentum=args.reset_momentum,
        set_hinge_margin=args.set_margin,
        set_d_steps=args.set_d_steps,
    )
    out = _out_dir(args, None, Path(args.checkpoint).parent.parent.name + "_intervened")
    print(resume_run(Path(args.checkpoint), out, steps=args.steps, spec=spec))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    grid: Dict[str, List[str]] = {}
    for key, values in args.grid or []:
        grid[key] = values
    if not grid:
        raise ConfigKeyError("grid", "at least one --grid key=v1,v2,... is required")
    summary = sweep(cfg, grid, _out_dir(args, None, Path(args.config).stem + "_sweep"), parallel=args.parallel,
                    eval_n=args.eval_n)
    print(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else Path(args.checkpoint).parent.parent / "eval"
    res = evaluate_checkpoint(Path(args.checkpoint), out, args.thresholds, args.n)
    print(f"modes_hit={res['modes_hit']} fd={res['fd']:.6g} hq_fraction={res['hq_fraction']:.4f}")
    print(out)
    return EXIT_OK


def cmd_export(args) -> int:
    """Dump EMA generator samples (untruncated) and the real mixture to points CSVs."""
    from .evaluation import generate
    from .data import sample_real
    from .latent import Stream, make_rng, sample as sample_latent
    from .run import standing_generator

    state = load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent.parent / "export"
    out.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    rng = make_rng(cfg.train.seed, Stream.EVAL)
    G = standing_generator(state)
    z = sample_latent(cfg.latent, args.n, rng)
    y = rng.integers(0, cfg.generator.num_classes, size=args.n)
    dump_points(out / "fake_points.csv", generate(G, z, y), y)
    xr, yr = sample_real(state.mixture, args.n, rng)
    dump_points(out / "real_points.csv", xr, yr)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gslab", description="Desk-scale GAN conditioning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a run from a config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("resume", help="continue a run from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--steps", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_resume)

    i = sub.add_parser("intervene", help="modify hyperparameters at a checkpoint and continue")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scale-lr-g", type=float, default=1.0)
    i.add_argument("--scale-lr-d", type=float, default=1.0)
    i.add_argument("--freeze", choices=["g", "d", "both"])
    i.add_argument("--reset-momentum", action="store_true")
    i.add_argument("--set-margin", type=float)
    i.add_argument("--set-d-steps", type=int)
    i.add_argument("--steps", type=int, required=True)
    i.add_argument("--out")
    i.set_defaults(func=cmd_intervene)

    s = sub.add_parser("sweep", help="one run per cell of a hyperparameter grid")
    s.add_argument("config")
    s.add_argument("--grid", action="append", type=_grid_item, metavar="KEY=V1,V2,...")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--eval-n", type=int, default=2000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="truncation sweep, coverage and memorization check")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--thresholds", type=_floats, default=list(DEFAULT_THRESHOLDS))
    e.add_argument("--n", type=int, default=10_000)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write generated and real points to CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--n", type=int, default=2000)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigKeyError as exc:
        print(f"config error: key '{exc.key}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, InterventionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, SpectralError, np.linalg.LinAlgError, BackwardError, DimensionError,
            SecondOrderError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
