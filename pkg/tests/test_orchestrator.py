from dataclasses import replace

import numpy as np
import pytest
from conftest import BIG, distinct_bucket_tasks

from doge.config import preset
from doge.curriculum import PoolStore
from doge.errors import ContractViolation, DogeError, InvariantViolation
from doge.grpo import RolloutGroup, UpdateReport
from doge.metrics import MetricsWriter, read_metrics
from doge.orchestrator import (
    begin_round,
    check_step_invariants,
    default_base,
    run,
    train_stage1,
    train_stage2,
    warmup_format,
)
from doge.policy import PolicyParams, SequenceSample, Vocabulary, step_distribution, snapshot
from doge.rewards import format_reward, mean_at_k, solver_prompt
from doge.tasks import mask

V = Vocabulary.default()


def small(rounds=1, s1=5, s2=5, warmup=3, **kw):
    cfg = preset("toy")
    return cfg.replace(
        rounds=rounds,
        warmup_steps=warmup,
        stage1=replace(cfg.stage1, steps=s1, batch_size=4),
        stage2=replace(cfg.stage2, steps=s2, batch_size=4),
        curriculum=replace(cfg.curriculum, tasks_per_round=8),
        **kw,
    )


# --- round start ----------------------------------------------------------------


def test_begin_round_copies():
    prev = default_base()
    state = begin_round(prev, 2)
    assert state.round_index == 2 and state.stage == "stage1"
    assert state.thinker.equals(prev) and state.solver.params.equals(prev) and state.base.params.equals(prev)
    state.thinker.weights[0, 0] += 1.0
    assert not state.thinker.equals(prev)
    assert state.solver.params.equals(prev) and state.base.params.equals(prev)
    with pytest.raises(InvariantViolation):
        state.check_identity()
    prev.weights[0, 1] += 1.0  # later edits to the source never leak into the snapshots
    state.solver.verify_frozen()
    assert state.solver.role == "solver" and state.base.role == "reference"


def test_solver_snapshot_is_read_only():
    state = begin_round(default_base(), 0)
    with pytest.raises(ValueError):
        state.solver.weights[0, 0] = 1.0


# --- stages -------------------------------------------------------------------


def test_zero_step_stages_are_identity():
    tasks = distinct_bucket_tasks(V, 4)
    cfg = small(s1=0, s2=0)
    base = default_base()
    state = begin_round(base, 0)
    s1 = train_stage1(state, tasks, cfg.stage1)
    assert s1.rows == [] and s1.params.equals(base) and state.stage == "stage2"
    s2 = train_stage2(s1.params, tasks, cfg.stage2)
    assert s2.rows == [] and s2.params.equals(base)
    w = warmup_format(base, tasks, 0, cfg.stage2)
    assert w.rows == [] and w.params.equals(base)


def test_stage1_requires_stage1_state():
    tasks = distinct_bucket_tasks(V, 4)
    state = begin_round(default_base(), 0)
    train_stage1(state, tasks, small(s1=1).stage1)
    with pytest.raises(InvariantViolation):
        train_stage1(state, tasks, small(s1=1).stage1)


def test_empty_task_list_is_an_error():
    with pytest.raises(DogeError):
        train_stage2(default_base(), [], small().stage2)


def test_solver_frozen_across_hundred_stage1_steps():
    tasks = distinct_bucket_tasks(V, 8)
    state = begin_round(default_base(), 0)
    digest = state.solver.params.digest()
    seen = []
    cfg = replace(small().stage1, steps=100, batch_size=4)
    res = train_stage1(state, tasks, cfg, seed=3, sink=lambda row: seen.append(state.solver.params.digest()))
    assert len(seen) == 100 and set(seen) == {digest}
    assert not res.params.equals(state.solver.params)
    assert [r.step for r in res.rows] == list(range(100))


def test_stage1_detects_tampered_solver():
    tasks = distinct_bucket_tasks(V, 4)
    state = begin_round(default_base(), 0)
    state.solver.weights.setflags(write=True)
    state.solver.weights[0, 0] += 1.0
    with pytest.raises(ContractViolation):
        train_stage1(state, tasks, small(s1=2).stage1)


def _two_analysis_world():
    """The Thinker emits analysis A or B with equal probability; the Solver only solves after A."""
    sp = PolicyParams.zeros(V).space
    a, b = V.id("A"), V.id("B")
    for t in distinct_bucket_tasks(V, 30, seed=11):
        rows = {sp.ctx_feature(mask(t).tokens), sp.ctx_feature(solver_prompt(t, [a], V)), sp.ctx_feature(solver_prompt(t, [b], V))}
        if len(rows) == 3:
            break
    params = PolicyParams.zeros(V)
    w = params.weights
    for prev, nxt in [(None, V.think_open), (V.think_open, V.think_close), (V.think_close, V.ans_open), (V.ans_close, V.eos)]:
        w[sp.prev_feature(prev), nxt] += 2 * BIG
    for d in range(10):
        w[sp.prev_feature(V.ans_open), V.id(str(d))] += 2 * BIG
        w[sp.prev_feature(V.id(str(d))), V.ans_close] += 2 * BIG
    wrong = V.id(str((int(V.symbols[t.gold[0]]) + 1) % 10))
    w[sp.ctx_feature(solver_prompt(t, [a], V)), t.gold[0]] += BIG
    w[sp.ctx_feature(solver_prompt(t, [b], V)), wrong] += BIG
    think_row = sp.ctx_feature(mask(t).tokens)
    w[think_row, a] += 4 * BIG
    w[think_row, b] += 4 * BIG
    w[sp.prev_feature(a), V.eos] += 8 * BIG
    w[sp.prev_feature(b), V.eos] += 8 * BIG
    return params, t


def test_two_analysis_world_thinker_learns_useful_analysis():
    params, task = _two_analysis_world()
    prompt = list(mask(task).tokens)
    p_a = lambda p: step_distribution(snapshot(p, "current", 1.0), prompt, [])[V.id("A")]
    assert p_a(params) == pytest.approx(0.5, abs=1e-6)
    state = begin_round(params, 0)
    cfg = replace(small().stage1, steps=10, batch_size=1, group_size=8, temperature=1.0)
    res = train_stage1(state, [task], cfg, seed=0)
    assert p_a(res.params) > 0.9
    # every analysis is well formed for the Solver, so rewards are 0.1 (B) or 1.1 (A)
    assert all(0.1 - 1e-9 <= r.mean_reward <= 1.1 + 1e-9 for r in res.rows)
    assert res.rows[-1].mean_reward > res.rows[0].mean_reward


def test_warmup_raises_format_rate_on_most_seeds():
    tasks = distinct_bucket_tasks(V, 16, seed=5)
    cfg = preset("toy").stage2
    base = default_base()

    def rate(p, s):
        snap = snapshot(p, "current", 1.0)
        rng = np.random.default_rng(s)
        from doge.policy import sample_sequence

        return np.mean([format_reward(sample_sequence(snap, t.prompt, 8, rng).tokens, V) for t in tasks for _ in range(8)])

    wins = 0
    for seed in range(3):
        after = warmup_format(base, tasks, 15, cfg, seed=seed).params
        wins += rate(after, 100 + seed) > rate(base, 100 + seed)
    assert wins >= 2


def test_stage2_learns_on_fixed_lookup_suite():
    tasks = distinct_bucket_tasks(V, 12, seed=2)
    base = default_base()
    cfg = replace(preset("toy").stage2, steps=80)
    before = mean_at_k(snapshot(base, "current", 0.7), tasks, 4, np.random.default_rng(0)).aggregate
    after = mean_at_k(snapshot(train_stage2(base, tasks, cfg).params, "current", 0.7), tasks, 4, np.random.default_rng(0)).aggregate
    assert after > before + 0.3


# --- invariants ---------------------------------------------------------------------


def _report(**kw):
    fields = dict(objective_value=0.0, policy_loss=0.0, kl_value=0.0, grad_norm=1.0, mean_entropy=0.5, clipped_fraction=0.0, n_tokens=1)
    fields.update(kw)
    return UpdateReport(**fields)


def _group(rewards=(0.0, 1.0), entropies=(0.1,)):
    s = SequenceSample([0], [V.eos], np.zeros(1), np.asarray(entropies))
    return RolloutGroup([0], [s] * len(rewards), list(rewards))


def test_invariants_accept_valid_step():
    check_step_invariants([_group()], _report(), V.size, 1.1)


@pytest.mark.parametrize(
    "group,report",
    [
        (_group(rewards=(0.0, 1.2)), _report()),
        (_group(rewards=(-0.1, 1.0)), _report()),
        (_group(entropies=(-1e-3,)), _report()),
        (_group(entropies=(10.0,)), _report()),
        (_group(), _report(mean_entropy=np.log(V.size) + 1e-6)),
        (_group(), _report(kl_value=-1e-6)),
        (_group(), _report(clipped_fraction=1.5)),
        (_group(), _report(grad_norm=float("nan"))),
        (_group(), _report(kl_value=float("nan"))),
    ],
)
def test_invariant_violations(group, report):
    with pytest.raises(InvariantViolation):
        check_step_invariants([group], report, V.size, 1.1)


def test_reward_fault_aborts_stage2():
    tasks = distinct_bucket_tasks(V, 4)
    with pytest.raises(InvariantViolation):
        train_stage2(default_base(), tasks, small().stage2, reward_scale=100.0)


# --- full loop ------------------------------------------------------------------------


def test_baseline_has_no_stage1_rows_and_doge_does():
    doge = run(small(rounds=2))
    base = run(small(rounds=2, mode="baseline"))
    stages = lambda res: {r.stage for r in res.rows}
    assert stages(doge) == {"warmup", "stage1", "stage2", "eval"}
    assert stages(base) == {"warmup", "stage2", "eval"}
    for res in (doge, base):
        keys = [r.key for r in res.rows]
        assert keys == sorted(keys) and len(set(keys)) == len(keys)
        assert [r.round for r in res.rows if r.stage == "eval"] == [0, 1]
    assert [e["event"] for e in base.audit].count("stage1_end") == 0


def test_paired_runs_share_warmup_and_round0_tasks():
    doge = run(small(seed=4))
    base = run(small(seed=4, mode="baseline"))
    strip = lambda rows: [replace(r, wall_ms=0) for r in rows if r.stage == "warmup"]
    assert strip(doge.rows) == strip(base.rows)
    assert doge.task_log[0] == base.task_log[0]


def test_run_is_deterministic_in_process():
    a, b = run(small(rounds=2, seed=9)), run(small(rounds=2, seed=9))
    assert [replace(r, wall_ms=0) for r in a.rows] == [replace(r, wall_ms=0) for r in b.rows]
    assert a.params.equals(b.params)
    c = run(small(rounds=2, seed=10))
    assert not a.params.equals(c.params)


def test_round_handoffs_in_audit():
    res = run(small(rounds=2))
    by = {(e["round"], e["event"]): e for e in res.audit}
    for t in range(2):
        start = by[(t, "round_start")]
        assert start["base"] == start["thinker"] == start["solver"]
        assert by[(t, "stage1_end")]["solver"] == start["solver"]
        assert by[(t, "stage2_start")]["params"] == by[(t, "stage1_end")]["thinker"]
    assert by[(1, "round_start")]["base"] == by[(0, "stage2_end")]["params"]


def test_seed_pool_stays_in_band():
    res = run(small(rounds=2))
    assert isinstance(res.pools, PoolStore)
    assert res.pools.band_violations() == []


def test_fixed_suite_trains_on_suite_every_round():
    suite = distinct_bucket_tasks(V, 6)
    cfg = small(rounds=2)
    cfg = cfg.replace(curriculum=replace(cfg.curriculum, fixed_suite=True))
    res = run(cfg, suite=suite)
    ids = [x.id for x in suite]
    assert [log["task_ids"] for log in res.task_log] == [ids, ids]


def test_failed_run_keeps_partial_metrics(tmp_path):
    writer = MetricsWriter(tmp_path / "metrics.csv")
    with pytest.raises(InvariantViolation, match="round 0 stage2"):
        run(small(), out_dir=tmp_path, writer=writer, fault="reward")
    assert not (tmp_path / "metrics.csv").exists()
    partial = read_metrics(tmp_path / "metrics.partial.csv")
    assert partial and {r.stage for r in partial} <= {"warmup", "stage1"}
    assert (tmp_path / "round0_stage1.ckpt.json").exists()
