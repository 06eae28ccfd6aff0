"""EMA-smoothed metric reports across runs.

For each run, a metric (``mean_entropy`` by default) is averaged over rounds
at each stage-relative ``(stage, step)``, then smoothed with

    s_0 = x_0,   s_t = alpha * x_t + (1 - alpha) * s_{t-1}.

The cross-run series averages the per-run raw means on the intersection of
their step grids and is smoothed the same way.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .metrics import HEADER, read_metrics

log = logging.getLogger(__name__)

TRAIN_STAGES = ("warmup", "stage1", "stage2")
METRICS = tuple(h for h in HEADER if h not in ("round", "stage", "step", "wall_ms"))


def ema(values: Sequence[float], alpha: float = 0.1) -> np.ndarray:
    if not (0.0 < alpha <= 1.0):
        raise InvalidInputError(f"alpha must lie in (0, 1], got {alpha}")
    x = np.asarray(values, dtype=np.float64)
    out = np.empty_like(x)
    if x.size == 0:
        return out
    out[0] = x[0]
    for t in range(1, x.size):
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1]
    return out


@dataclass
class Series:
    name: str
    stage: str
    steps: list[int]
    raw_mean: np.ndarray
    ema: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "raw_mean", "ema"))
        for s, r, e in zip(self.steps, self.raw_mean, self.ema):
            w.writerow((s, repr(float(r)), repr(float(e))))
        return buf.getvalue()


def round_averaged(path: str | Path, metric: str = "mean_entropy") -> dict[str, dict[int, float]]:
    """``{stage: {step: mean over rounds}}`` for the training stages of one run."""
    if metric not in METRICS:
        raise InvalidInputError(f"unknown metric {metric!r}; choose from {METRICS}")
    try:
        rows = read_metrics(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InvalidInputError(f"cannot read metrics {path}: {exc}") from None
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        v = getattr(r, metric)
        if r.stage in TRAIN_STAGES and v is not None:
            acc[r.stage][r.step].append(v)
    return {st: {k: float(np.mean(v)) for k, v in sorted(d.items())} for st, d in acc.items()}


def build_report(paths: Sequence[str | Path], alpha: float = 0.1, metric: str = "mean_entropy") -> tuple[list[Series], list[Series]]:
    """Return (per-run series, cross-run mean series), one entry per stage present."""
    if not paths:
        raise InvalidInputError("report needs at least one metrics file")
    ema([], alpha)  # validates alpha
    runs = [(Path(p).stem if Path(p).name != "metrics.csv" else Path(p).parent.name or "run", round_averaged(p, metric)) for p in paths]
    names = _unique([n for n, _ in runs])
    per_run, mean = [], []
    for stage in TRAIN_STAGES:
        present = [(n, r[stage]) for n, (_, r) in zip(names, runs) if stage in r]
        if not present:
            continue
        for name, series in present:
            steps = list(series)
            raw = np.array([series[s] for s in steps])
            per_run.append(Series(name, stage, steps, raw, ema(raw, alpha)))
        grids = [set(s) for _, s in present]
        common = sorted(set.intersection(*grids))
        if len(present) < len(runs) or any(g != set(common) for g in grids):
            msg = f"{stage}: step grids differ across runs; averaging over {len(common)} common steps"
            warnings.warn(msg, stacklevel=2)
            log.warning(msg)
        if common:
            raw = np.array([np.mean([s[k] for _, s in present]) for k in common])
            mean.append(Series("mean", stage, common, raw, ema(raw, alpha)))
    return per_run, mean


def _unique(names: list[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if seen[n] == 1 else f"{n}_{seen[n]}")
    return out


def plot_report(per_run: Sequence[Series], mean: Sequence[Series], path: str | Path, metric: str = "mean_entropy") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stages = [s for s in TRAIN_STAGES if any(x.stage == s for x in list(per_run) + list(mean))]
    fig, axes = plt.subplots(1, len(stages), figsize=(4.5 * len(stages), 3.4), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        for s in per_run:
            if s.stage == stage:
                ax.plot(s.steps, s.raw_mean, alpha=0.2)
                ax.plot(s.steps, s.ema, label=s.name)
        for s in mean:
            if s.stage == stage and len(per_run) > 1:
                ax.plot(s.steps, s.ema, "k--", label="mean")
        ax.set_title(stage)
        ax.set_xlabel("step")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, dpi=110)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def write_report(
    paths: Sequence[str | Path], out_dir: str | Path, alpha: float = 0.1, metric: str = "mean_entropy", plot: bool = True
) -> list[Path]:
    """Write ``<run>.<stage>.csv`` per run, ``mean.<stage>.csv``, and a PNG overview."""
    per_run, mean = build_report(paths, alpha, metric)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in list(per_run) + list(mean):
        p = out / f"{s.name}.{s.stage}.csv"
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(s.to_csv(), encoding="utf-8")
        os.replace(tmp, p)
        written.append(p)
    if plot:
        written.append(plot_report(per_run, mean, out / f"{metric}.png", metric))
    return written
