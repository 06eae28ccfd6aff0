"""Run configuration: dataclasses, presets, and a strict JSON loader.

A config file is one JSON object with top-level keys ``rounds, mode, seed,
warmup_steps, stage1, stage2, curriculum, eval``. Missing keys fall back to
the ``toy`` preset; unknown keys are errors so typos cannot pass silently.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import InvalidInputError
from .grpo import ClipConfig, RegularizerConfig
from .rewards import RewardConfig
from .tasks import FAMILIES


class ConfigError(InvalidInputError):
    pass


@dataclass(frozen=True)
class StageConfig:
    steps: int = 100
    batch_size: int = 16
    group_size: int = 8
    temperature: float = 1.0
    clip: ClipConfig = field(default_factory=ClipConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    max_response_len: int = 8
    lr: float = 5e-2
    kl_coeff: float = 1e-3
    adv_eps: float = 1e-6

    def __post_init__(self):
        for name in ("batch_size", "group_size", "max_response_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        for name in ("temperature", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        RegularizerConfig(self.kl_coeff, self.adv_eps)

    @property
    def reg(self) -> RegularizerConfig:
        return RegularizerConfig(self.kl_coeff, self.adv_eps)


@dataclass(frozen=True)
class CurriculumConfig:
    families: tuple[str, ...] = FAMILIES
    knowledge_size: int = 64
    tasks_per_round: int = 24
    band: tuple[float, float] = (0.1, 0.3)
    measure_k: int = 4
    variants_per_seed: int = 2
    seed_file: str | None = None
    generator_url: str | None = None
    external_per_round: int = 0
    fixed_suite: bool = False

    def __post_init__(self):
        if not self.families or any(f not in FAMILIES for f in self.families):
            raise ConfigError(f"families must be a non-empty subset of {FAMILIES}")
        lo, hi = self.band
        if not (0.0 <= lo < hi <= 1.0):
            raise ConfigError("band must satisfy 0 <= low < high <= 1")
        for name in ("knowledge_size", "tasks_per_round", "measure_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.variants_per_seed < 0 or self.external_per_round < 0:
            raise ConfigError("variants_per_seed and external_per_round must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 4
    temperature: float = 0.7
    max_len: int = 8

    def __post_init__(self):
        if self.k < 1 or self.max_len < 1:
            raise ConfigError("k and max_len must be >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")


MODES = ("doge", "baseline")


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 3
    mode: str = "doge"
    seed: int = 0
    warmup_steps: int = 15
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be a 64-bit non-negative integer")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")

    @property
    def eval_k(self) -> int:
        return self.eval.k

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _toy() -> dict:
    return {
        "rounds": 3,
        "mode": "doge",
        "seed": 0,
        "warmup_steps": 15,
        "stage1": {
            "steps": 100,
            "batch_size": 16,
            "group_size": 4,
            "temperature": 0.9,
            "clip": {"eps_low": 0.2, "eps_high": 0.24},
            "reward": {"format_bonus": 0.1, "solver_samples": 4, "solver_temperature": 0.9, "solver_max_len": 8},
            "max_response_len": 8,
            "lr": 5e-2,
            "kl_coeff": 1e-3,
            "adv_eps": 1e-6,
        },
        "stage2": {
            "steps": 150,
            "batch_size": 16,
            "group_size": 8,
            "temperature": 1.0,
            "clip": {"eps_low": 0.2, "eps_high": 0.28},
            "reward": {"format_bonus": 0.1, "solver_samples": 4, "solver_temperature": 0.9, "solver_max_len": 8},
            "max_response_len": 8,
            "lr": 5e-2,
            "kl_coeff": 1e-3,
            "adv_eps": 1e-6,
        },
        "curriculum": {
            "families": ["lookup", "arith"],
            "knowledge_size": 64,
            "tasks_per_round": 24,
            "band": [0.1, 0.3],
            "measure_k": 4,
            "variants_per_seed": 2,
            "seed_file": None,
            "generator_url": None,
            "external_per_round": 0,
            "fixed_suite": False,
        },
        "eval": {"k": 4, "temperature": 0.7, "max_len": 8},
    }


def _paper(thinker_steps: int, batch: int) -> dict:
    d = _toy()
    for stage, steps, n, temp, hi in (("stage1", thinker_steps, 4, 0.9, 0.24), ("stage2", 150, 8, 1.0, 0.28)):
        d[stage].update(
            steps=steps, batch_size=batch, group_size=n, temperature=temp, max_response_len=4096, lr=1e-6,
            clip={"eps_low": 0.2, "eps_high": hi},
        )
        d[stage]["reward"]["solver_max_len"] = 4096
    d["eval"].update(max_len=4096)
    return d


PRESETS = {
    "toy": _toy,
    "paper-3b": lambda: _paper(100, 64),
    "paper-7b": lambda: _paper(150, 48),
}


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _check_scalar(value: Any, kind: type, where: str):
    if kind in (int, float) and isinstance(value, bool):
        raise ConfigError(f"{where}: expected {kind.__name__}, got bool")
    if not isinstance(value, _SCALARS[kind]):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {type(value).__name__}")
    return kind(value)


def _build(d: dict) -> RunConfig:
    def stage(s: dict, where: str) -> StageConfig:
        ints = ("steps", "batch_size", "group_size", "max_response_len")
        floats = ("temperature", "lr", "kl_coeff", "adv_eps")
        kw = {k: _check_scalar(s[k], int, f"{where}.{k}") for k in ints}
        kw.update({k: _check_scalar(s[k], float, f"{where}.{k}") for k in floats})
        c, r = s["clip"], s["reward"]
        kw["clip"] = _wrap(lambda: ClipConfig(*(_check_scalar(c[k], float, f"{where}.clip.{k}") for k in ("eps_low", "eps_high"))), f"{where}.clip")
        kw["reward"] = _wrap(
            lambda: RewardConfig(
                _check_scalar(r["format_bonus"], float, f"{where}.reward.format_bonus"),
                _check_scalar(r["solver_samples"], int, f"{where}.reward.solver_samples"),
                _check_scalar(r["solver_temperature"], float, f"{where}.reward.solver_temperature"),
                _check_scalar(r["solver_max_len"], int, f"{where}.reward.solver_max_len"),
            ),
            f"{where}.reward",
        )
        return _wrap(lambda: StageConfig(**kw), where)

    c = d["curriculum"]
    band = c["band"]
    if not (isinstance(band, list) and len(band) == 2):
        raise ConfigError("curriculum.band: expected [low, high]")
    fams = c["families"]
    if not (isinstance(fams, list) and all(isinstance(f, str) for f in fams)):
        raise ConfigError("curriculum.families: expected a list of strings")
    opt_str = lambda v, w: None if v is None else _check_scalar(v, str, w)  # noqa: E731
    curriculum = _wrap(
        lambda: CurriculumConfig(
            families=tuple(fams),
            knowledge_size=_check_scalar(c["knowledge_size"], int, "curriculum.knowledge_size"),
            tasks_per_round=_check_scalar(c["tasks_per_round"], int, "curriculum.tasks_per_round"),
            band=tuple(_check_scalar(b, float, "curriculum.band") for b in band),
            measure_k=_check_scalar(c["measure_k"], int, "curriculum.measure_k"),
            variants_per_seed=_check_scalar(c["variants_per_seed"], int, "curriculum.variants_per_seed"),
            seed_file=opt_str(c["seed_file"], "curriculum.seed_file"),
            generator_url=opt_str(c["generator_url"], "curriculum.generator_url"),
            external_per_round=_check_scalar(c["external_per_round"], int, "curriculum.external_per_round"),
            fixed_suite=_check_scalar(c["fixed_suite"], bool, "curriculum.fixed_suite"),
        ),
        "curriculum",
    )
    e = d["eval"]
    ev = _wrap(
        lambda: EvalConfig(
            _check_scalar(e["k"], int, "eval.k"),
            _check_scalar(e["temperature"], float, "eval.temperature"),
            _check_scalar(e["max_len"], int, "eval.max_len"),
        ),
        "eval",
    )
    return _wrap(
        lambda: RunConfig(
            rounds=_check_scalar(d["rounds"], int, "rounds"),
            mode=_check_scalar(d["mode"], str, "mode"),
            seed=_check_scalar(d["seed"], int, "seed"),
            warmup_steps=_check_scalar(d["warmup_steps"], int, "warmup_steps"),
            stage1=stage(d["stage1"], "stage1"),
            stage2=stage(d["stage2"], "stage2"),
            curriculum=curriculum,
            eval=ev,
        ),
        "config",
    )


def _wrap(make, where: str):
    try:
        return make()
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(where) else f"{where}: {msg}") from None
    except InvalidInputError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return _build(PRESETS[name]())


def config_from_dict(d: dict, base: str = "toy") -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return _build(_merge(PRESETS[base](), d, ""))


def load_config(source: str | Path) -> RunConfig:
    """Load ``source``: a JSON file path, or ``preset:<name>``."""
    source = str(source)
    if source.startswith("preset:"):
        return preset(source.split(":", 1)[1])
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {source}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(d)


def config_to_dict(cfg: RunConfig) -> dict:
    def conv(x):
        if dataclasses.is_dataclass(x):
            return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, tuple):
            return [conv(v) for v in x]
        return x

    return conv(cfg)
