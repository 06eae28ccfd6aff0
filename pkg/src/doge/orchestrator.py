"""The training loop: warmup, round handoff, Thinker stage, GRPO annealing.

One optimizer step is one batch of rollouts: the old snapshot is refreshed
from the current parameters before every step, so ratios are exactly 1 at
evaluation time and clipping only matters for the gradient's structure. The
reference snapshot for the KL term is taken once at the start of each stage.

All randomness comes from :mod:`doge.streams` keyed by (purpose, round,
stage, step), so a baseline run and a DoGe run with the same seed draw the
same stage-2 task batches and rollout uniforms.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import streams
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig, StageConfig
from .curriculum import (
    GeneratorClient,
    GeneratorError,
    PoolStore,
    ProblemRecord,
    load_records,
    measure_pass_rates,
    synth_tasks,
    update_seed_pool,
    variants,
)
from .errors import DogeError, InvariantViolation
from .grpo import AdamState, RolloutGroup, UpdateReport, apply_update, grpo_objective, with_advantages
from .metrics import MetricsRow, MetricsWriter
from .policy import PolicyParams, PolicySnapshot, Vocabulary, instruct_prior, sample_batch, snapshot
from .rewards import app_reward, context_rewards, format_reward, mean_at_k
from .tasks import TaskInstance, mask, synth_knowledge

log = logging.getLogger(__name__)

STAGES = ("warmup", "stage1", "stage2", "done")
KL_SLACK = 1e-12


@dataclass
class RoundState:
    round_index: int
    base: PolicySnapshot
    thinker: PolicyParams
    solver: PolicySnapshot
    stage: str = "stage1"

    def check_identity(self) -> None:
        if not (self.thinker.equals(self.base.params) and self.solver.params.equals(self.base.params)):
            raise InvariantViolation(f"round {self.round_index}: thinker, solver and base differ at round start")


def begin_round(prev: PolicyParams, t: int) -> RoundState:
    """Thinker and Solver both start as exact copies of ``prev``; the Solver is frozen."""
    base = snapshot(prev, "reference")
    state = RoundState(t, base, prev.copy(), snapshot(prev, "solver"), "stage1")
    state.check_identity()
    return state


@dataclass
class StageResult:
    params: PolicyParams
    optimizer: AdamState
    reports: list[UpdateReport] = field(default_factory=list)
    rows: list[MetricsRow] = field(default_factory=list)


def check_step_invariants(groups: Sequence[RolloutGroup], report: UpdateReport, vocab_size: int, max_reward: float) -> None:
    """Numeric invariants asserted after every update; violations abort the run."""
    ln_v = float(np.log(vocab_size))
    problems = []
    for g in groups:
        for s in g.samples:
            e = np.asarray(s.step_entropies)
            if e.size and (e.min() < 0.0 or e.max() > ln_v):
                problems.append(f"sample entropy outside [0, ln|V|]: [{e.min()}, {e.max()}]")
                break
        r = np.asarray(g.rewards)
        if r.min() < 0.0 or r.max() > max_reward:
            problems.append(f"reward outside [0, {max_reward}]: [{r.min()}, {r.max()}]")
    if not (0.0 <= report.mean_entropy <= ln_v):
        problems.append(f"mean_entropy {report.mean_entropy} outside [0, {ln_v}]")
    if not report.kl_value >= -KL_SLACK:
        problems.append(f"kl_value {report.kl_value} < 0")
    if not (0.0 <= report.clipped_fraction <= 1.0):
        problems.append(f"clipped_fraction {report.clipped_fraction} outside [0, 1]")
    if not np.isfinite(report.grad_norm):
        problems.append("non-finite gradient norm")
    if problems:
        raise InvariantViolation("; ".join(problems))


RewardFn = Callable[[list, list[TaskInstance], int], list[float]]


def _grpo_steps(
    params: PolicyParams,
    tasks: Sequence[TaskInstance],
    cfg: StageConfig,
    *,
    seed: int,
    round_index: int,
    stage: str,
    steps: int,
    reward_fn: RewardFn,
    prompt_fn: Callable[[TaskInstance], list[int]],
    max_reward: float,
    sink: Callable[[MetricsRow], None] | None = None,
    on_step: Callable[[int], None] | None = None,
    reward_scale: float = 1.0,
) -> StageResult:
    """Shared GRPO loop: sample tasks, roll out G responses each, score, update."""
    if not tasks:
        raise DogeError(f"round {round_index} {stage}: no tasks to train on")
    reference = snapshot(params, "reference", cfg.temperature)
    opt = AdamState.zeros_like(params.weights)
    result = StageResult(params, opt)
    G, n = cfg.group_size, min(cfg.batch_size, len(tasks))
    for step in range(steps):
        t0 = time.perf_counter()
        task_rng = streams.stage_stream(seed, streams.TASKS, round_index, stage, step)
        batch = [tasks[int(i)] for i in task_rng.choice(len(tasks), size=n, replace=False)]
        prompts = [prompt_fn(t) for t in batch for _ in range(G)]
        current = snapshot(params, "current", cfg.temperature)
        old = snapshot(params, "old", cfg.temperature)
        u = streams.stage_stream(seed, streams.ROLLOUT, round_index, stage, step).random((len(prompts), cfg.max_response_len))
        samples = sample_batch(current, prompts, cfg.max_response_len, u)
        rewards = reward_fn(samples, [t for t in batch for _ in range(G)], step)
        if reward_scale != 1.0:  # fault-injection hook for the invariant checks
            rewards = [r * reward_scale for r in rewards]
        groups = [
            with_advantages(RolloutGroup(prompts[i * G], samples[i * G : (i + 1) * G], rewards[i * G : (i + 1) * G]), cfg.adv_eps)
            for i in range(n)
        ]
        _, report, grad = grpo_objective(groups, current, old, reference, cfg.clip, cfg.reg, want_grad=True)
        check_step_invariants(groups, report, params.vocab.size, max_reward)
        params, opt = apply_update(params, grad, opt, cfg.lr)
        old.verify_frozen()
        reference.verify_frozen()
        row = MetricsRow(
            round_index,
            stage,
            step,
            float(np.mean(rewards)),
            report.mean_entropy,
            report.kl_value,
            report.clipped_fraction,
            report.grad_norm,
            None,
            int(round((time.perf_counter() - t0) * 1000)),
        )
        result.reports.append(report)
        result.rows.append(row)
        if sink is not None:
            sink(row)
        if on_step is not None:
            on_step(step)
    result.params, result.optimizer = params, opt
    return result


def _solver_prompt_task(task: TaskInstance) -> list[int]:
    return task.prompt


def warmup_format(
    params: PolicyParams,
    tasks: Sequence[TaskInstance],
    steps: int,
    cfg: StageConfig,
    seed: int = 0,
    sink: Callable[[MetricsRow], None] | None = None,
) -> StageResult:
    """GRPO on (context, question) prompts with the format reward only."""
    vocab = params.vocab

    def reward(samples, _tasks, _step):
        return [float(format_reward(s.tokens, vocab)) for s in samples]

    return _grpo_steps(
        params, tasks, cfg, seed=seed, round_index=0, stage="warmup", steps=steps,
        reward_fn=reward, prompt_fn=_solver_prompt_task, max_reward=1.0, sink=sink,
    )


def train_stage1(
    state: RoundState,
    tasks: Sequence[TaskInstance],
    cfg: StageConfig,
    seed: int = 0,
    sink: Callable[[MetricsRow], None] | None = None,
) -> StageResult:
    """Thinker training: analyses of the masked context, scored by the frozen Solver."""
    if state.stage != "stage1":
        raise InvariantViolation(f"train_stage1 called in stage {state.stage!r}")
    solver = state.solver
    solver_digest = solver.digest
    t = state.round_index
    k, L = cfg.reward.solver_samples, cfg.reward.solver_max_len

    def reward(samples, batch_tasks, step):
        u = streams.stage_stream(seed, streams.SOLVER, t, "stage1", step).random((len(samples), k, L))
        return context_rewards(samples, batch_tasks, solver, cfg.reward, u)

    def frozen(_step):
        solver.verify_frozen()
        if solver.params.digest() != solver_digest:
            raise InvariantViolation(f"round {t}: solver digest changed during stage 1")

    result = _grpo_steps(
        state.thinker, tasks, cfg, seed=seed, round_index=t, stage="stage1", steps=cfg.steps,
        reward_fn=reward, prompt_fn=lambda task: list(mask(task).tokens), max_reward=cfg.reward.max_reward,
        sink=sink, on_step=frozen,
    )
    frozen(-1)
    state.thinker = result.params
    state.stage = "stage2"
    return result


def train_stage2(
    params: PolicyParams,
    tasks: Sequence[TaskInstance],
    cfg: StageConfig,
    seed: int = 0,
    round_index: int = 0,
    sink: Callable[[MetricsRow], None] | None = None,
    reward_scale: float = 1.0,
) -> StageResult:
    """Standard GRPO on the full prompt with the answer reward."""
    vocab = params.vocab

    def reward(samples, batch_tasks, _step):
        return [app_reward(s.tokens, task.gold, cfg.reward, vocab) for s, task in zip(samples, batch_tasks)]

    return _grpo_steps(
        params, tasks, cfg, seed=seed, round_index=round_index, stage="stage2", steps=cfg.steps,
        reward_fn=reward, prompt_fn=_solver_prompt_task, max_reward=cfg.reward.max_reward, sink=sink,
        reward_scale=reward_scale,
    )


@dataclass
class RunResult:
    params: PolicyParams
    rows: list[MetricsRow]
    audit: list[dict]
    pools: PoolStore
    task_log: list[dict]


def default_base(vocab: Vocabulary | None = None) -> PolicyParams:
    return instruct_prior(vocab or Vocabulary.default())


def _records(tasks, round_index, provenance) -> list[ProblemRecord]:
    return [ProblemRecord(t, None, round_index, provenance) for t in tasks]


def _dedupe(records: Sequence[ProblemRecord]) -> list[ProblemRecord]:
    seen, out = set(), []
    for r in records:
        if r.task.id not in seen:
            seen.add(r.task.id)
            out.append(r)
    return out


class _Loop:
    """State carried through :func:`run`."""

    def __init__(self, config: RunConfig, suite, pools, out_dir, base, writer, fault):
        self.cfg = config
        self.seed = config.seed
        self.base = base if base is not None else default_base()
        self.vocab = self.base.vocab
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.writer = writer if writer is not None else MetricsWriter(None)
        self.fault = fault
        self.audit: list[dict] = []
        self.task_log: list[dict] = []
        cur = config.curriculum
        if pools is None:
            rng = streams.substream(self.seed, streams.CURRICULUM, 0, streams.STAGE_CODES["curriculum"], 0)
            pools = PoolStore(synth_knowledge(cur.knowledge_size, rng), [], cur.band)
        if cur.seed_file:
            seeds, rejected = load_records(cur.seed_file, self.vocab)
            for no, why in rejected:
                log.warning("seed file line %d rejected: %s", no, why)
            pools = PoolStore(pools.knowledge, list(pools.seeds) + seeds, pools.band)
        self.pools = pools
        self.suite = list(suite) if suite else None
        # Fixed for the whole run: the suite, else round 0's training tasks.
        self.eval_tasks: list[TaskInstance] | None = self.suite
        url = cur.generator_url
        self.client = GeneratorClient.from_env(url) if cur.external_per_round > 0 else None

    def emit(self, row: MetricsRow) -> None:
        self.writer.append(row)

    def record(self, round_index: int, event: str, **digests) -> None:
        self.audit.append({"round": round_index, "event": event, **digests})

    def checkpoint(self, name: str, params: PolicyParams, opt: AdamState | None, rng_state: dict) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / name, Checkpoint(params, opt, {"seed": self.seed, **rng_state}))

    def candidates(self, t: int) -> list[ProblemRecord]:
        cur = self.cfg.curriculum
        if self.suite and (cur.fixed_suite or t == 0):
            return _records(self.suite, t, "seed_init")
        rng = streams.substream(self.seed, streams.CURRICULUM, t, streams.STAGE_CODES["curriculum"], 1)
        seeds = list(self.pools.seeds)
        recs = list(seeds)
        recs += _records(variants(self.vocab, [r.task for r in seeds], cur.variants_per_seed, rng), t, "variant")
        if self.client is not None:
            try:
                for r in seeds[: max(1, cur.external_per_round)]:
                    payload = {"context": self.vocab.decode(r.task.context), "question": self.vocab.decode(r.task.question)}
                    got = self.client.generate("variant", payload, cur.external_per_round)
                    recs += _records(got, t, "external")
            except GeneratorError as exc:
                log.warning("external generator unavailable, continuing without it: %s", exc)
        fresh = max(0, cur.tasks_per_round - len(recs))
        recs += _records(synth_tasks(self.vocab, self.pools.knowledge, fresh, cur.families, rng), t, "knowledge_pool")
        return _dedupe(recs)

    def round_tasks(self, t: int, base: PolicySnapshot) -> list[ProblemRecord]:
        """Candidates minus those the round's base already solves too often."""
        cands = self.candidates(t)
        cur = self.cfg.curriculum
        if self.suite and cur.fixed_suite:
            return cands
        rng = streams.stage_stream(self.seed, streams.MEASURE, t, "curriculum", 0)
        measured = measure_pass_rates(base.with_temperature(self.cfg.eval.temperature), cands, cur.measure_k, rng, self.cfg.eval.max_len)
        kept = [r for r in measured if r.pass_rate <= cur.band[1]]
        if not kept:
            log.warning("round %d: every candidate is above the band; training on all of them", t)
            kept = measured
        return kept

    def update_pool(self, t: int, params: PolicyParams, records: Sequence[ProblemRecord]) -> None:
        cur = self.cfg.curriculum
        rng = streams.stage_stream(self.seed, streams.MEASURE, t, "curriculum", 1)
        policy = snapshot(params, "current", self.cfg.eval.temperature)
        measured = measure_pass_rates(policy, [replace(r, pass_rate=None) for r in records], cur.measure_k, rng, self.cfg.eval.max_len)
        self.pools = update_seed_pool(self.pools, measured, t)
        bad = self.pools.band_violations()
        if bad:
            raise InvariantViolation(f"round {t}: {len(bad)} seed records outside the band after update")


def run(
    config: RunConfig,
    suite: Sequence[TaskInstance] | None = None,
    pools: PoolStore | None = None,
    out_dir: str | Path | None = None,
    base: PolicyParams | None = None,
    writer: MetricsWriter | None = None,
    fault: str | None = None,
) -> RunResult:
    """Full loop: warmup once, then per round stage 1 (DoGe only), stage 2, pool update, eval."""
    loop = _Loop(config, suite, pools, out_dir, base, writer, fault)
    cfg = config
    try:
        params = loop.base.copy()
        warm_tasks = [r.task for r in loop.round_tasks(0, snapshot(params, "reference"))] if cfg.warmup_steps else []
        if cfg.warmup_steps:
            w = warmup_format(params, warm_tasks, cfg.warmup_steps, cfg.stage2, cfg.seed, loop.emit)
            params = w.params
            loop.checkpoint("round0_stage0.ckpt.json", params, w.optimizer, {"round": 0, "stage": "warmup", "steps": cfg.warmup_steps})
        loop.record(0, "warmup_end", params=params.digest())

        for t in range(cfg.rounds):
            state = begin_round(params, t)
            loop.record(t, "round_start", base=state.base.digest, thinker=state.thinker.digest(), solver=state.solver.digest)
            records = loop.round_tasks(t, state.base)
            tasks = [r.task for r in records]
            if loop.eval_tasks is None:
                loop.eval_tasks = list(tasks)
            loop.task_log.append({"round": t, "task_ids": [x.id for x in tasks]})

            if cfg.mode == "doge":
                try:
                    s1 = train_stage1(state, tasks, cfg.stage1, cfg.seed, loop.emit)
                except DogeError as exc:
                    raise type(exc)(f"round {t} stage1: {exc}") from exc
                loop.record(t, "stage1_end", thinker=s1.params.digest(), solver=state.solver.params.digest())
                loop.checkpoint(f"round{t}_stage1.ckpt.json", s1.params, s1.optimizer, {"round": t, "stage": "stage1", "steps": cfg.stage1.steps})
                stage2_start = s1.params
            else:
                stage2_start = state.thinker
            loop.record(t, "stage2_start", params=stage2_start.digest())
            try:
                s2 = train_stage2(
                    stage2_start, tasks, cfg.stage2, cfg.seed, t, loop.emit, reward_scale=100.0 if fault == "reward" else 1.0
                )
            except DogeError as exc:
                raise type(exc)(f"round {t} stage2: {exc}") from exc
            params = s2.params
            state.stage = "done"
            loop.record(t, "stage2_end", params=params.digest())
            loop.checkpoint(f"round{t}_stage2.ckpt.json", params, s2.optimizer, {"round": t, "stage": "stage2", "steps": cfg.stage2.steps})

            loop.update_pool(t, params, records)
            rng = streams.stage_stream(cfg.seed, streams.EVAL, t, "eval", 0)
            ev = mean_at_k(snapshot(params, "current", cfg.eval.temperature), loop.eval_tasks, cfg.eval.k, rng, cfg.eval.max_len)
            loop.emit(MetricsRow(t, "eval", 0, ev.aggregate, ev.mean_entropy, 0.0, 0.0, 0.0, ev.aggregate, 0))

        loop.checkpoint("final.ckpt.json", params, None, {"round": cfg.rounds, "stage": "done"})
        loop.writer.close()
    except BaseException:
        loop.writer.abort()
        raise
    return RunResult(params, loop.writer.rows, loop.audit, loop.pools, loop.task_log)
