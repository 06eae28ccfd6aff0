"""``doge`` command line: train, eval, gradcheck, report, pool.

Exit codes: 0 success, 1 gradcheck exceedance or generic failure, 2 invalid
input, 3 numeric or invariant abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import streams
from .checkpoint import atomic_write_text, load_checkpoint
from .config import config_to_dict, load_config
from .curriculum import PoolStore, ProblemRecord, load_records, measure_pass_rates, save_records, synth_tasks, update_seed_pool
from .errors import ContractViolation, DogeError, InvalidInputError, InvariantViolation, NumericError
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import MetricsWriter, RunManifest, write_run_end
from .orchestrator import default_base, run
from .policy import snapshot
from .report import write_report
from .rewards import mean_at_k
from .tasks import synth_knowledge

log = logging.getLogger("doge")


def _records_or_fail(path: str, vocab) -> list[ProblemRecord]:
    if not Path(path).is_file():
        raise InvalidInputError(f"pool file not found: {path}")
    records, rejected = load_records(path, vocab)
    for no, why in rejected:
        log.warning("%s:%d rejected: %s", path, no, why)
    return records


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.rounds is not None:
        cfg = cfg.replace(rounds=args.rounds)
    base = default_base()
    suite = None
    if args.suite:
        suite = [r.task for r in _records_or_fail(args.suite, base.vocab)]
        if not suite:
            raise InvalidInputError(f"suite {args.suite} has no valid records")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    RunManifest.create(config_to_dict(cfg), cfg.seed, base.vocab.digest()).write(out)
    writer = MetricsWriter(out / "metrics.csv")
    try:
        result = run(cfg, suite=suite, out_dir=out, base=base, writer=writer, fault=args.inject_fault)
    except BaseException as exc:
        write_run_end(out, f"aborted: {type(exc).__name__}")
        raise
    atomic_write_text(out / "audit.json", json.dumps({"audit": result.audit, "tasks": result.task_log}, indent=1) + "\n")
    save_records(out / "seed_pool.jsonl", result.pools.seeds, base.vocab)
    write_run_end(out, "ok")
    final = next((r for r in reversed(result.rows) if r.stage == "eval"), None)
    print(json.dumps({"out": str(out), "rows": len(result.rows), "final_eval": None if final is None else final.pass_rate_eval}))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    records = _records_or_fail(args.tasks, ckpt.params.vocab)
    if not records:
        raise InvalidInputError(f"no valid tasks in {args.tasks}")
    if args.k < 1:
        raise InvalidInputError("--k must be >= 1")
    policy = snapshot(ckpt.params, "current", args.temperature)
    result = mean_at_k(policy, [r.task for r in records], args.k, streams.substream(args.seed, streams.EVAL), args.max_len)
    print(json.dumps({"k": args.k, **result.as_dict()}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise InvalidInputError("--trials must be >= 1")
    res = run_gradcheck(args.trials, args.seed, corrupt=args.corrupt)
    print(
        f"max_rel_error={res.max_rel_error:.3e} trials={res.trials} "
        f"clipped_tokens={res.clipped_tokens} (A>0: {res.clipped_pos}, A<0: {res.clipped_neg}) tolerance={TOLERANCE:g}"
    )
    if res.passed:
        return 0
    atomic_write_text(args.dump, json.dumps(res.worst) + "\n")
    print(f"gradient check FAILED; worst instance written to {args.dump}", file=sys.stderr)
    return 1


def cmd_report(args) -> int:
    for p in args.metrics:
        if not Path(p).is_file():
            raise InvalidInputError(f"metrics file not found: {p}")
    written = write_report(args.metrics, args.out, args.alpha, args.metric, plot=not args.no_plot)
    for p in written:
        print(p)
    return 0


def _band(args) -> tuple[float, float]:
    if args.band:
        return tuple(args.band)
    if args.config:
        return load_config(args.config).curriculum.band
    return (0.1, 0.3)


def cmd_pool(args) -> int:
    vocab = default_base().vocab
    if args.pool_cmd == "synth":
        cfg = load_config(args.config) if args.config else load_config("preset:toy")
        seed = cfg.seed if args.seed is None else args.seed
        rng = streams.substream(seed, streams.CURRICULUM, 0)
        knowledge = synth_knowledge(cfg.curriculum.knowledge_size, rng)
        n = args.n or cfg.curriculum.tasks_per_round
        tasks = synth_tasks(vocab, knowledge, n, cfg.curriculum.families, rng)
        save_records(args.out, [ProblemRecord(t) for t in tasks], vocab)
        if args.knowledge_out:
            atomic_write_text(args.knowledge_out, "".join(json.dumps(k.as_dict()) + "\n" for k in knowledge))
        print(json.dumps({"written": len(tasks), "out": args.out}))
    elif args.pool_cmd == "measure":
        ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
        params = ckpt.params if ckpt else default_base()
        records = _records_or_fail(args.inp, params.vocab)
        if args.k < 1:
            raise InvalidInputError("--k must be >= 1")
        policy = snapshot(params, "current", args.temperature)
        measured = measure_pass_rates(policy, records, args.k, streams.substream(args.seed, streams.MEASURE), args.max_len)
        save_records(args.out, measured, params.vocab)
        print(json.dumps({"measured": len(measured), "out": args.out}))
    elif args.pool_cmd == "update":
        band = _band(args)
        measured = _records_or_fail(args.inp, vocab)
        missing = [r.task.id for r in measured if r.pass_rate is None]
        if missing:
            raise InvalidInputError(f"{len(missing)} records lack pass_rate; run `pool measure` first")
        seeds = _records_or_fail(args.seeds, vocab) if args.seeds else []
        store = update_seed_pool(PoolStore([], seeds, band), measured, args.round)
        if store.band_violations():
            raise InvariantViolation(f"{len(store.band_violations())} retained records outside band {band}")
        save_records(args.out, store.seeds, vocab)
        print(json.dumps({"retained": len(store.seeds), "evicted_or_skipped": len(measured) + len(seeds) - len(store.seeds), "out": args.out}))
    elif args.pool_cmd == "import":
        if not Path(args.inp).is_file():
            raise InvalidInputError(f"input not found: {args.inp}")
        records, rejected = load_records(args.inp, vocab)
        for no, why in rejected:
            print(f"line {no} rejected: {why}", file=sys.stderr)
        save_records(args.out, records, vocab)
        print(json.dumps({"imported": len(records), "rejected": len(rejected), "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doge", description="Decoupled Thinker/Solver GRPO on toy verifiable tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True, help="JSON config file or preset:<toy|paper-3b|paper-7b>")
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("doge", "baseline"))
    t.add_argument("--seed", type=int)
    t.add_argument("--rounds", type=int)
    t.add_argument("--suite", help="pool file used as a fixed task suite")
    t.add_argument("--inject-fault", choices=("reward",), help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mean@k of a checkpoint on a pool file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", required=True)
    e.add_argument("--k", type=int, default=4)
    e.add_argument("--temperature", type=float, default=0.7)
    e.add_argument("--max-len", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the surrogate gradient")
    g.add_argument("--trials", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dump", default="gradcheck_worst.json", help="where to write the worst instance on failure")
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="EMA-smoothed series from metrics CSVs")
    r.add_argument("--metrics", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--alpha", type=float, default=0.1)
    r.add_argument("--metric", default="mean_entropy")
    r.add_argument("--no-plot", action="store_true")
    r.set_defaults(func=cmd_report)

    pool = sub.add_parser("pool", help="seed/knowledge pool maintenance")
    ps = pool.add_subparsers(dest="pool_cmd", required=True)
    s = ps.add_parser("synth")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--knowledge-out")
    m = ps.add_parser("measure")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--checkpoint")
    m.add_argument("--k", type=int, default=4)
    m.add_argument("--temperature", type=float, default=0.7)
    m.add_argument("--max-len", type=int, default=8)
    m.add_argument("--seed", type=int, default=0)
    u = ps.add_parser("update")
    u.add_argument("--in", dest="inp", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--seeds", help="existing seed pool to update")
    u.add_argument("--config")
    u.add_argument("--band", type=float, nargs=2)
    u.add_argument("--round", type=int)
    i = ps.add_parser("import")
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    pool.set_defaults(func=cmd_pool)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, InvariantViolation, ContractViolation) as exc:
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except DogeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
