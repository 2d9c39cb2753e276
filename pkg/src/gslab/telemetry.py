"""Per-step spectra and loss records, collapse detection, CSV export.

Floats are written with 17 significant digits so that re-parsing a CSV
returns the exact recorded doubles.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .spectral import SpectralState, top_k_singular
from .training import StepReport

SPECTRA_HEADER = "step,layer,sigma0,sigma1,sigma2,ratio01,fro_norm"
LOSSES_HEADER = "step,d_loss_real,d_loss_fake,g_loss,grad_norm_variance,skipped"


@dataclass
class SpectralSnapshot:
    step: int
    layer: str
    sigma0: float
    sigma1: float
    sigma2: float
    ratio01: float
    fro_norm: float

    @classmethod
    def from_sigmas(cls, step: int, layer: str, sigmas: Sequence[float], fro_norm: float) -> "SpectralSnapshot":
        s = list(sigmas) + [0.0] * (3 - len(sigmas))
        s0, s1, s2 = (float(x) for x in s[:3])
        ratio = s0 / s1 if s1 > 0 else float("inf")
        return cls(step, layer, s0, s1, s2, ratio, float(fro_norm))


def _f(x: float) -> str:
    return "%.17g" % x


def spectra_row(s: SpectralSnapshot) -> str:
    return ",".join([str(s.step), s.layer, _f(s.sigma0), _f(s.sigma1), _f(s.sigma2),
                     _f(s.ratio01), _f(s.fro_norm)])


def losses_row(r: StepReport) -> str:
    return ",".join([str(r.step), _f(r.d_loss_real), _f(r.d_loss_fake), _f(r.g_loss),
                     _f(r.grad_norm_variance), "1" if r.skipped else "0"])


class Telemetry:
    """In-memory record of a run plus an optional append-only CSV sink.

    ``states`` are the monitoring :class:`SpectralState` objects, separate
    from any used for normalization so that monitoring never feeds back
    into training.
    """

    def __init__(self, run_dir: Optional[Path] = None, flush_every: int = 100, k: int = 3):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.flush_every = max(1, flush_every)
        self.k = k
        self.states: Dict[str, SpectralState] = {}
        self.snapshots: List[SpectralSnapshot] = []
        self.reports: List[StepReport] = []
        self._pending_spectra: List[str] = []
        self._pending_losses: List[str] = []
        self._since_flush = 0
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            for name, header in (("spectra.csv", SPECTRA_HEADER), ("losses.csv", LOSSES_HEADER)):
                path = self.run_dir / name
                if not path.exists():
                    _write(path, [header])

    def ensure_states(self, weights: Dict[str, np.ndarray], rng: np.random.Generator) -> None:
        for name in sorted(weights):
            if name not in self.states:
                W = weights[name]
                st = SpectralState.create(W.shape, min(self.k, *W.shape), rng)
                top_k_singular(W, st, n_iters=50)
                self.states[name] = st

    def measure(self, step: int, weights: Dict[str, np.ndarray], n_iters: int = 1) -> List[SpectralSnapshot]:
        """Advance each monitoring state one sweep and snapshot the weights."""
        out = []
        for name in sorted(weights):
            W = weights[name]
            sig = top_k_singular(W, self.states[name], n_iters=n_iters)
            out.append(SpectralSnapshot.from_sigmas(step, name, sig, np.linalg.norm(W)))
        return out

    def record(self, step: int, snapshots: Sequence[SpectralSnapshot], report: StepReport) -> int:
        """Append one row per snapshot plus one loss row; returns rows added."""
        for s in snapshots:
            if s.step != step:
                raise ValueError("snapshot step does not match")
        self.snapshots.extend(snapshots)
        self.reports.append(report)
        self._pending_spectra.extend(spectra_row(s) for s in snapshots)
        self._pending_losses.append(losses_row(report))
        self._since_flush += 1
        if self._since_flush >= self.flush_every:
            self.flush()
        return len(snapshots) + 1

    def flush(self) -> None:
        self._since_flush = 0
        if self.run_dir is None:
            self._pending_spectra.clear()
            self._pending_losses.clear()
            return
        try:
            _append(self.run_dir / "spectra.csv", self._pending_spectra)
            _append(self.run_dir / "losses.csv", self._pending_losses)
        finally:
            self._pending_spectra.clear()
            self._pending_losses.clear()

    def sigma0_series(self) -> Dict[str, List[tuple]]:
        series: Dict[str, List[tuple]] = {}
        for s in self.snapshots:
            series.setdefault(s.layer, []).append((s.step, s.sigma0))
        return series


def _write(path: Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _append(path: Path, lines: Iterable[str]) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def export_csv(run_dir, snapshots: Sequence[SpectralSnapshot], reports: Sequence[StepReport]) -> tuple:
    """Write ``spectra.csv`` and ``losses.csv`` from scratch; returns both paths."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sp = run_dir / "spectra.csv"
    lo = run_dir / "losses.csv"
    _write(sp, [SPECTRA_HEADER] + [spectra_row(s) for s in snapshots])
    _write(lo, [LOSSES_HEADER] + [losses_row(r) for r in reports])
    return sp, lo


def read_spectra(path) -> List[SpectralSnapshot]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SPECTRA_HEADER:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for line in lines[1:]:
        st, layer, *vals = line.split(",")
        out.append(SpectralSnapshot(int(st), layer, *(float(v) for v in vals)))
    return out


def read_losses(path) -> List[StepReport]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != LOSSES_HEADER:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for line in lines[1:]:
        st, a, b, c, d, sk = line.split(",")
        out.append(StepReport(int(st), float(a), float(b), float(c), float(d), sk == "1"))
    return out


def detect_collapse(snapshots: Sequence[SpectralSnapshot], reports: Sequence[StepReport],
                    window: int = 200, factor: float = 3.0, smooth: int = 10) -> Optional[int]:
    """First step at which a collapse symptom appears, or None.

    A step is flagged when some layer's sigma0 exceeds ``factor`` times the
    median of its previous ``window`` values, or when the total D loss,
    averaged over the last ``smooth`` steps, exceeds the median of the
    ``window`` values before them by more than ``factor`` median absolute
    deviations.  The short average keeps ordinary minibatch noise from
    tripping the loss rule.  This is a heuristic: no single threshold
    separates healthy from collapsing runs.
    """
    if window < 10:
        raise ValueError("window must be >= 10")
    series = {}
    for s in snapshots:
        series.setdefault(s.layer, []).append((s.step, s.sigma0))
    longest = max([len(v) for v in series.values()] + [len(reports)])
    if longest < window:
        raise ValueError(f"series of length {longest} is shorter than window {window}")
    flagged = []
    for pts in series.values():
        steps = np.array([p[0] for p in pts])
        vals = np.array([p[1] for p in pts])
        for t in range(window, len(vals)):
            med = np.median(vals[t - window:t])
            if vals[t] > factor * med:
                flagged.append(int(steps[t]))
                break
    if reports:
        steps = np.array([r.step for r in reports])
        d = np.array([r.d_loss_real + r.d_loss_fake for r in reports])
        smooth = max(1, min(smooth, window))
        for t in range(window + smooth - 1, len(d)):
            recent = d[t - smooth + 1:t + 1].mean()
            past = d[t - smooth + 1 - window:t - smooth + 1]
            med = np.median(past)
            mad = np.median(np.abs(past - med))
            if mad > 0 and recent - med > factor * mad:
                flagged.append(int(steps[t]))
                break
    return min(flagged) if flagged else None
