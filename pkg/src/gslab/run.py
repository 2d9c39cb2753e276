"""Run orchestration: training with telemetry and checkpoints, resume,
interventions, evaluation and sweeps.

A run directory holds::

    config.snapshot      every effective key=value
    spectra.csv          one row per monitored weight per recorded step
    losses.csv           one row per recorded step
    checkpoints/         step_XXXXXXX.gsl periodic snapshots, final.gsl
    provenance.json      parent run and intervention (resumed runs only)
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, ConfigKeyError, KEYS
from .data import sample_real
from .evaluation import (DEFAULT_THRESHOLDS, d_memorization_check, frechet_distance, generate,
                         mode_coverage, truncation_sweep)
from .latent import Stream, make_rng, sample as sample_latent
from .network import compute_standing_stats
from .telemetry import Telemetry, detect_collapse, read_losses, read_spectra
from .training import (InterventionSpec, StepReport, TrainState, apply_intervention, ema_generator,
                       train_step)

log = logging.getLogger(__name__)


def default_out_root() -> Path:
    return Path(os.environ.get("GSL_OUT_DIR", "runs"))


def checkpoint_path(run_dir: Path, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:07d}.gsl"


def attach_telemetry(state: TrainState, run_dir: Optional[Path]) -> Telemetry:
    tcfg = state.config.telemetry
    tel = Telemetry(run_dir, tcfg.flush_every, tcfg.monitor_k)
    tel.states = state.monitor_states
    tel.ensure_states(state.monitored_weights(), state.monitor_rng)
    return tel


def run_steps(state: TrainState, tel: Optional[Telemetry], n_steps: int, run_dir: Optional[Path] = None,
              checkpoint_every: int = 0) -> List[StepReport]:
    """Advance ``n_steps`` training steps, recording telemetry and periodic checkpoints."""
    tcfg = state.config.telemetry
    reports = []
    for _ in range(n_steps):
        rep = train_step(state)
        reports.append(rep)
        if tel is not None and rep.step % tcfg.every == 0:
            snaps = tel.measure(rep.step, state.monitored_weights())
            tel.record(rep.step, snaps, rep)
        if run_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
            if tel is not None:
                tel.flush()
            save_checkpoint(state, checkpoint_path(run_dir, state.step))
        if tcfg.stop_on_collapse and tel is not None and len(tel.reports) > tcfg.collapse_window \
                and rep.step % tcfg.collapse_window == 0:
            hit = detect_collapse(tel.snapshots, tel.reports, tcfg.collapse_window, tcfg.collapse_factor)
            if hit is not None:
                log.warning("collapse detected at step %d; stopping", hit)
                break
    if tel is not None:
        tel.flush()
    return reports


def standing_generator(state: TrainState, seed_offset: int = 0):
    """EMA generator with freshly computed standing statistics."""
    cfg = state.config
    G = ema_generator(state)
    rng = make_rng(cfg.train.seed + seed_offset, Stream.STANDING)
    compute_standing_stats(
        G, cfg.telemetry.standing_passes, cfg.train.batch,
        lambda b: sample_latent(cfg.latent, b, rng, step=state.step),
        lambda b: rng.integers(0, cfg.generator.num_classes, size=b),
    )
    return G


def finalize(state: TrainState, run_dir: Path) -> Path:
    G = standing_generator(state)
    standing = [(bn.standing_mean, bn.standing_var) for bn in G.bns]
    state.ema_standing = standing
    path = Path(run_dir) / "checkpoints" / "final.gsl"
    save_checkpoint(state, path, ema_standing=standing)
    return path


def _prepare_dir(run_dir: Path, config: RunConfig) -> Path:
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    for name in ("spectra.csv", "losses.csv"):
        if (run_dir / name).exists():
            (run_dir / name).unlink()
    (run_dir / "config.snapshot").write_text(config.snapshot_text(), encoding="utf-8", newline="\n")
    return run_dir


def train_run(config: RunConfig, run_dir: Optional[Path] = None, steps: Optional[int] = None) -> Path:
    run_dir = Path(run_dir or config.out_dir)
    # the snapshot records the values actually in effect
    overrides = {"out_dir": str(run_dir)}
    if steps is not None:
        overrides["total_steps"] = str(steps)
    config = config.with_overrides(overrides)
    _prepare_dir(run_dir, config)
    state = TrainState(config)
    tel = attach_telemetry(state, run_dir)
    run_steps(state, tel, steps if steps is not None else config.train.total_steps, run_dir,
              config.telemetry.checkpoint_every)
    finalize(state, run_dir)
    return run_dir


def _copy_parent_rows(parent: Path, run_dir: Path, upto: int) -> None:
    """Seed a resumed run's CSVs with the parent's rows for steps < ``upto``."""
    for name in ("spectra.csv", "losses.csv"):
        src = parent / name
        if src.exists():
            lines = src.read_text(encoding="utf-8").splitlines()
            keep = [lines[0]] + [l for l in lines[1:] if int(l.split(",", 1)[0]) < upto]
            (run_dir / name).write_text("".join(l + "\n" for l in keep), encoding="utf-8", newline="\n")


def resume_run(checkpoint: Path, run_dir: Path, steps: Optional[int] = None,
               spec: Optional[InterventionSpec] = None) -> Path:
    """Continue training from a checkpoint, optionally after an intervention.

    Without ``steps`` the run continues to the config's ``total_steps``.
    """
    checkpoint = Path(checkpoint)
    state = load_checkpoint(checkpoint)
    parent_dir = checkpoint.parent.parent
    parent = {"parent_run": str(parent_dir.resolve()), "parent_checkpoint": str(checkpoint.resolve()),
              "parent_step": state.step}
    if spec is not None:
        apply_intervention(state, spec, parent)
    else:
        state.provenance = dict(state.provenance, **parent)
    run_dir = _prepare_dir(run_dir, state.config)
    _copy_parent_rows(parent_dir, run_dir, state.step)
    (run_dir / "provenance.json").write_text(json.dumps(state.provenance, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    tel = attach_telemetry(state, run_dir)
    n = steps if steps is not None else max(0, state.config.train.total_steps - state.step)
    run_steps(state, tel, n, run_dir, state.config.telemetry.checkpoint_every)
    finalize(state, run_dir)
    return run_dir


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_state(state: TrainState, thresholds: Sequence[float] = DEFAULT_THRESHOLDS, n: int = 10_000,
                   seed_offset: int = 0) -> dict:
    cfg = state.config
    seed = cfg.train.seed + seed_offset
    G = standing_generator(state, seed_offset)
    eval_rng = make_rng(seed, Stream.EVAL)
    reference, _ = sample_real(state.mixture, n, eval_rng)
    curve = truncation_sweep(G, cfg.latent, state.mixture, reference, thresholds, n, eval_rng,
                             cfg.generator.num_classes)
    z = sample_latent(cfg.latent, n, eval_rng)
    y = eval_rng.integers(0, cfg.generator.num_classes, size=n)
    x = generate(G, z, y)
    hits, hq = mode_coverage(x, state.mixture)
    fd = frechet_distance(x, reference)

    m = min(n, 2000)
    if state.train_set is not None:
        xt, yt = state.train_set[0][:m], state.train_set[1][:m]
    else:
        xt, yt = sample_real(state.mixture, m, make_rng(seed, Stream.DATA))
    xh, yh = sample_real(state.mixture, m, make_rng(seed, Stream.HELDOUT))
    zf = sample_latent(cfg.latent, m, eval_rng)
    yf = eval_rng.integers(0, cfg.generator.num_classes, size=m)
    xf = generate(state.G, zf, yf)
    train_acc, held_acc = d_memorization_check(lambda a, b: state.D(a, b, mode="eval"), (xt, yt), (xh, yh),
                                               (xf, yf))
    return {"curve": curve, "fd": fd, "modes_hit": hits, "hq_fraction": hq,
            "train_acc": train_acc, "heldout_acc": held_acc, "samples": (x, y)}


def _fmt(x) -> str:
    return "%.17g" % x


def write_eval(result: dict, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,fd,spread,hq_fraction\n")
        for t, fd, sp, hq in result["curve"].rows():
            fh.write(f"{_fmt(t)},{_fmt(fd)},{_fmt(sp)},{_fmt(hq)}\n")
    with open(out_dir / "memorization.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("train_acc,heldout_acc\n")
        fh.write(f"{_fmt(result['train_acc'])},{_fmt(result['heldout_acc'])}\n")
    with open(out_dir / "coverage.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fd,modes_hit,hq_fraction\n")
        fh.write(f"{_fmt(result['fd'])},{result['modes_hit']},{_fmt(result['hq_fraction'])}\n")


def evaluate_checkpoint(checkpoint: Path, out_dir: Path, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                        n: int = 10_000) -> dict:
    state = load_checkpoint(checkpoint)
    result = evaluate_state(state, thresholds, n)
    write_eval(result, out_dir)
    return result


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def expand_grid(grid: Mapping[str, Sequence[str]]) -> List[Dict[str, str]]:
    for key in grid:
        if key not in KEYS:
            raise ConfigKeyError(key, "unknown config key in sweep grid")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


SUMMARY_FIELDS = ["cell", "seed", "d_loss_real", "d_loss_fake", "g_loss", "fd", "modes_hit",
                  "hq_fraction", "collapse_step"]


def _run_cell(args) -> dict:
    index, base_text, overrides, seed, cell_dir, eval_n = args
    from .config import loads

    cfg = loads(base_text).with_overrides(dict(overrides, seed=str(seed), out_dir=str(cell_dir)))
    run_dir = train_run(cfg, Path(cell_dir))
    state = load_checkpoint(Path(run_dir) / "checkpoints" / "final.gsl")
    res = evaluate_state(state, DEFAULT_THRESHOLDS[:1], eval_n)
    losses = read_losses(Path(run_dir) / "losses.csv")
    tail = losses[-100:]
    try:
        collapse = detect_collapse(read_spectra(Path(run_dir) / "spectra.csv"), losses,
                                   cfg.telemetry.collapse_window, cfg.telemetry.collapse_factor)
    except ValueError:
        collapse = None
    row = {"cell": index, "seed": seed, **overrides,
           "d_loss_real": float(np.mean([r.d_loss_real for r in tail])),
           "d_loss_fake": float(np.mean([r.d_loss_fake for r in tail])),
           "g_loss": float(np.mean([r.g_loss for r in tail])),
           "fd": res["fd"], "modes_hit": res["modes_hit"], "hq_fraction": res["hq_fraction"],
           "collapse_step": "" if collapse is None else collapse}
    return row


def sweep(config: RunConfig, grid: Mapping[str, Sequence[str]], out_dir: Path, parallel: int = 1,
          eval_n: int = 2000) -> Path:
    """One isolated run per grid cell; writes ``summary.csv`` and returns its path."""
    cells = expand_grid(grid)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = config.snapshot_text()
    for cell in cells:  # validate every cell before launching anything
        config.with_overrides(cell)
    jobs = [(i, base, cell, config.train.seed + i, str(out_dir / f"cell_{i:03d}"), eval_n)
            for i, cell in enumerate(cells)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    keys = list(grid)
    path = out_dir / "summary.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS[:2] + keys + SUMMARY_FIELDS[2:], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
