"""Versioned JSON checkpoints with bit-exact weight round-trips.

Layout::

    {"version": 1,
     "vocab": [symbol, ...],
     "feature_dims": {"vocab_size", "max_position", "context_buckets", "n_features"},
     "weights": [hex-float, ...],            # row-major (feature, token)
     "rng_state": {...},
     "optimizer_state": {"t", "beta1", "beta2", "eps", "m": [...], "v": [...]} | null}

Weights are stored as ``float.hex`` strings, which are exact for every finite
double. Writes go to a temporary file first and are renamed into place.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .grpo import AdamState
from .policy import FeatureSpace, PolicyParams, Vocabulary

VERSION = 1


def _hex(a: np.ndarray) -> list[str]:
    return [float(x).hex() for x in np.asarray(a, dtype=np.float64).ravel()]


def _unhex(values, shape: tuple[int, ...], what: str) -> np.ndarray:
    try:
        flat = np.array([float.fromhex(s) for s in values], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"checkpoint {what}: {exc}") from None
    if flat.size != int(np.prod(shape)):
        raise InvalidInputError(f"checkpoint {what}: expected {int(np.prod(shape))} values, got {flat.size}")
    return flat.reshape(shape)


@dataclass
class Checkpoint:
    params: PolicyParams
    optimizer: AdamState | None = None
    rng_state: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        sp = self.params.space
        opt = None
        if self.optimizer is not None:
            o = self.optimizer
            opt = {"t": o.t, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "m": _hex(o.m), "v": _hex(o.v)}
        return {
            "version": VERSION,
            "vocab": list(self.params.vocab.symbols),
            "feature_dims": {
                "vocab_size": sp.vocab_size,
                "max_position": sp.max_position,
                "context_buckets": sp.context_buckets,
                "n_features": sp.n_features,
            },
            "weights": _hex(self.params.weights),
            "rng_state": self.rng_state,
            "optimizer_state": opt,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Checkpoint":
        if not isinstance(d, dict):
            raise InvalidInputError("checkpoint must be a JSON object")
        if d.get("version") != VERSION:
            raise InvalidInputError(f"checkpoint version {d.get('version')!r} is not supported (expected {VERSION})")
        try:
            vocab = Vocabulary(tuple(d["vocab"]))
            dims = d["feature_dims"]
            space = FeatureSpace(vocab.size, int(dims["max_position"]), int(dims["context_buckets"]))
            if int(dims["vocab_size"]) != vocab.size or int(dims["n_features"]) != space.n_features:
                raise InvalidInputError("checkpoint feature_dims disagree with the vocabulary")
            shape = (space.n_features, vocab.size)
            params = PolicyParams(_unhex(d["weights"], shape, "weights"), vocab, space)
            opt = None
            o = d.get("optimizer_state")
            if o is not None:
                opt = AdamState(
                    _unhex(o["m"], shape, "optimizer m"),
                    _unhex(o["v"], shape, "optimizer v"),
                    int(o["t"]),
                    float(o["beta1"]),
                    float(o["beta2"]),
                    float(o["eps"]),
                )
            return cls(params, opt, dict(d.get("rng_state") or {}))
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed checkpoint: missing or bad field {exc}") from None


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_text(path, json.dumps(ckpt.to_json(), sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"checkpoint not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InvalidInputError(f"checkpoint is not valid JSON: {exc}") from None
    return Checkpoint.from_json(d)
