"""Metrics rows, the CSV writer, and the run manifest.

Floats are written with ``repr`` so a rerun with the same seed reproduces the
file byte for byte, except for the ``wall_ms`` column.
"""

from __future__ import annotations

import csv
import io
import json
import os
import subprocess
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import InvalidInputError, InvariantViolation

HEADER = (
    "round",
    "stage",
    "step",
    "mean_reward",
    "mean_entropy",
    "kl_value",
    "clipped_fraction",
    "grad_norm",
    "pass_rate_eval",
    "wall_ms",
)
STAGE_ORDER = {"warmup": 0, "stage1": 1, "stage2": 2, "eval": 3}


@dataclass(frozen=True)
class MetricsRow:
    round: int
    stage: str
    step: int
    mean_reward: float
    mean_entropy: float
    kl_value: float
    clipped_fraction: float
    grad_norm: float
    pass_rate_eval: float | None = None
    wall_ms: int = 0

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.round, STAGE_ORDER[self.stage], self.step)

    def cells(self) -> list[str]:
        def f(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.round),
            self.stage,
            str(self.step),
            f(self.mean_reward),
            f(self.mean_entropy),
            f(self.kl_value),
            f(self.clipped_fraction),
            f(self.grad_norm),
            f(self.pass_rate_eval),
            str(int(self.wall_ms)),
        ]

    @classmethod
    def from_cells(cls, cells: dict) -> "MetricsRow":
        def f(name):
            v = cells[name]
            return None if v == "" else float(v)

        return cls(
            int(cells["round"]),
            cells["stage"],
            int(cells["step"]),
            f("mean_reward"),
            f("mean_entropy"),
            f("kl_value"),
            f("clipped_fraction"),
            f("grad_norm"),
            f("pass_rate_eval"),
            int(cells["wall_ms"]),
        )


def format_rows(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow.from_cells(c) for c in reader]


class MetricsWriter:
    """Append-only metrics stream.

    Rows are written to ``<path>.tmp`` as they arrive and the file is renamed
    to ``path`` by :meth:`close`. On :meth:`abort` the partial stream is kept
    as ``<stem>.partial.csv`` for diagnosis and ``path`` is never created.
    """

    def __init__(self, path: str | Path | None):
        self.path = None if path is None else Path(path)
        self.rows: list[MetricsRow] = []
        self._fh = None
        if self.path is not None:
            self._tmp = self.path.with_name(self.path.name + ".tmp")
            self._fh = open(self._tmp, "w", encoding="utf-8", newline="")
            self._csv = csv.writer(self._fh, lineterminator="\n")
            self._csv.writerow(HEADER)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.key <= self.rows[-1].key:
            raise InvariantViolation(f"metrics key {row.key} does not follow {self.rows[-1].key}")
        self.rows.append(row)
        if self._fh is not None:
            self._csv.writerow(row.cells())
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            os.replace(self._tmp, self.path)

    def abort(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            os.replace(self._tmp, self.path.with_name(self.path.stem + ".partial.csv"))


def _code_version() -> str:
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+{sha}" if sha else __version__


@dataclass(frozen=True)
class RunManifest:
    config: dict
    seed: int
    code_version: str
    vocab_digest: str
    started_at: str

    @classmethod
    def create(cls, config: dict, seed: int, vocab_digest: str) -> "RunManifest":
        now = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return cls(config, seed, _code_version(), vocab_digest, now)

    def write(self, out_dir: str | Path) -> Path:
        """Write ``manifest.json`` once; refuses to overwrite an existing manifest."""
        path = Path(out_dir) / "manifest.json"
        if path.exists():
            raise InvalidInputError(f"{path} already exists; use a fresh output directory")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path


def write_run_end(out_dir: str | Path, status: str) -> None:
    """End timestamp lives in a sidecar so the manifest itself stays immutable."""
    path = Path(out_dir) / "run_end.json"
    now = datetime.now(timezone.utc).isoformat(timespec="seconds")
    path.write_text(json.dumps({"ended_at": now, "status": status}) + "\n", encoding="utf-8")
