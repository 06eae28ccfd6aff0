"""Verifiable rewards: format, correctness, the Solver pass-rate reward, mean@k.

Response grammar (token analog of a think block followed by a boxed answer)::

    <think> payload* </think> payload* <ans> payload+ </ans> [<eos>]

with exactly one think block and exactly one answer block. Any other special
token anywhere makes the response malformed.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, InvalidInputError
from .policy import PolicySnapshot, SequenceSample, Vocabulary, sample_batch
from .tasks import TaskInstance

DEFAULT_VOCAB = Vocabulary.default()


@dataclass(frozen=True)
class RewardConfig:
    format_bonus: float = 0.1
    solver_samples: int = 4
    solver_temperature: float = 0.9
    solver_max_len: int = 8

    def __post_init__(self):
        if not self.format_bonus >= 0:
            raise InvalidInputError("format_bonus must be >= 0")
        if self.solver_samples < 1:
            raise InvalidInputError("solver_samples must be >= 1")
        if not self.solver_temperature > 0:
            raise InvalidInputError("solver_temperature must be > 0")
        if self.solver_max_len < 1:
            raise InvalidInputError("solver_max_len must be >= 1")

    @property
    def max_reward(self) -> float:
        return 1.0 + self.format_bonus


@dataclass(frozen=True)
class ParsedResponse:
    has_think_block: bool
    think_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]
    well_formed: bool


def parse_response(tokens: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> ParsedResponse:
    toks = list(tokens)
    if toks and toks[-1] == vocab.eos:
        toks = toks[:-1]
    to, tc, ao, ac = vocab.think_open, vocab.think_close, vocab.ans_open, vocab.ans_close

    think: tuple[int, ...] = ()
    has_think = False
    if to in toks:
        i = toks.index(to)
        if tc in toks[i + 1 :]:
            j = toks.index(tc, i + 1)
            has_think = True
            think = tuple(toks[i + 1 : j])
    answer: tuple[int, ...] = ()
    if ao in toks:
        i = toks.index(ao)
        if ac in toks[i + 1 :]:
            answer = tuple(toks[i + 1 : toks.index(ac, i + 1)])

    payload = vocab.payload_ids
    counts = {m: toks.count(m) for m in (to, tc, ao, ac)}
    well_formed = (
        all(c == 1 for c in counts.values())
        and all(t in payload for t in toks if t not in counts)
        and toks[0] == to
        and toks[-1] == ac
        and toks.index(tc) < toks.index(ao)
        and len(answer) >= 1
    )
    return ParsedResponse(has_think, think, answer, bool(well_formed))


def format_reward(tokens: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> int:
    return int(parse_response(tokens, vocab).well_formed)


def correctness_reward(tokens: Sequence[int], gold: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> int:
    if not gold:
        raise InvalidInputError("gold answer must be non-empty")
    parsed = parse_response(tokens, vocab)
    return int(parsed.well_formed and parsed.answer_tokens == tuple(gold))


def app_reward(tokens: Sequence[int], gold: Sequence[int], cfg: RewardConfig, vocab: Vocabulary = DEFAULT_VOCAB) -> float:
    """``1[answer == gold] + format_bonus * format``."""
    parsed = parse_response(tokens, vocab)
    correct = parsed.well_formed and parsed.answer_tokens == tuple(gold)
    return float(correct) + cfg.format_bonus * float(parsed.well_formed)


def solver_prompt(task: TaskInstance, analysis: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Context, question, separator, then the analysis with its trailing EOS dropped."""
    a = list(analysis)
    if a and a[-1] == vocab.eos:
        a = a[:-1]
    return task.prompt + [vocab.sep] + a


def _check_solver(solver: PolicySnapshot) -> None:
    if solver.role != "solver":
        raise ContractViolation(f"context reward needs a solver snapshot, got role {solver.role!r}")
    solver.verify_frozen()


def context_rewards(
    analyses: Sequence[SequenceSample | Sequence[int]],
    tasks: Sequence[TaskInstance],
    solver: PolicySnapshot,
    cfg: RewardConfig,
    uniforms: np.ndarray,
) -> list[float]:
    """Batched :func:`context_reward`; ``uniforms[j]`` has shape (solver_samples, solver_max_len)."""
    _check_solver(solver)
    vocab = solver.vocab
    n, k = len(analyses), cfg.solver_samples
    if len(tasks) != n:
        raise InvalidInputError("one task per analysis required")
    if n == 0:
        return []
    uniforms = np.asarray(uniforms).reshape(n * k, -1)
    prompts = []
    for a, task in zip(analyses, tasks):
        toks = a.tokens if isinstance(a, SequenceSample) else a
        prompts += [solver_prompt(task, toks, vocab)] * k
    answers = sample_batch(solver.with_temperature(cfg.solver_temperature), prompts, cfg.solver_max_len, uniforms)
    scores = np.array([app_reward(s.tokens, tasks[i // k].gold, cfg, vocab) for i, s in enumerate(answers)])
    solver.verify_frozen()
    return scores.reshape(n, k).mean(axis=1).tolist()


def context_reward(
    analysis: SequenceSample | Sequence[int],
    task: TaskInstance,
    solver: PolicySnapshot,
    cfg: RewardConfig,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo pass rate (plus format bonus) of the frozen Solver given ``analysis``."""
    u = rng.random((cfg.solver_samples, cfg.solver_max_len))
    return context_rewards([analysis], [task], solver, cfg, u)[0]


@dataclass
class EvalResult:
    per_task: dict[str, float]
    per_family: dict[str, float]
    aggregate: float
    mean_entropy: float
    rates: list[float]

    def as_dict(self) -> dict:
        return {"aggregate": self.aggregate, "per_family": self.per_family, "per_task": self.per_task}


def mean_at_k(
    policy: PolicySnapshot,
    tasks: Sequence[TaskInstance],
    k: int,
    rng: np.random.Generator,
    max_len: int = 8,
) -> EvalResult:
    """Fraction of ``k`` samples answering correctly, per task and averaged over tasks."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if not tasks:
        raise InvalidInputError("mean@k needs at least one task")
    vocab = policy.vocab
    prompts = [t.prompt for t in tasks for _ in range(k)]
    samples = sample_batch(policy, prompts, max_len, rng.random((len(prompts), max_len)))
    hits = np.array([correctness_reward(s.tokens, tasks[i // k].gold, vocab) for i, s in enumerate(samples)])
    rates = hits.reshape(len(tasks), k).mean(axis=1)
    per_task: dict[str, float] = {}
    fam: dict[str, list[float]] = defaultdict(list)
    for t, r in zip(tasks, rates):
        per_task[t.id] = float(r)
        fam[t.family].append(float(r))
    entropy = float(np.mean(np.concatenate([s.step_entropies for s in samples])))
    return EvalResult(per_task, {f: float(np.mean(v)) for f, v in sorted(fam.items())}, float(rates.mean()), entropy, rates.tolist())
