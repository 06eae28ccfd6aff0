import json

import pytest

from doge.cli import main
from doge.curriculum import ProblemRecord, load_records, save_records
from doge.policy import Vocabulary
from doge.tasks import make_task, render_context

V = Vocabulary.default()

SMALL = {
    "rounds": 1,
    "warmup_steps": 2,
    "stage1": {"steps": 3, "batch_size": 4},
    "stage2": {"steps": 3, "batch_size": 4},
    "curriculum": {"tasks_per_round": 6},
}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def out_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_train_writes_run_directory(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", small_config, "--out", str(out), "--seed", "3"]) == 0
    res = out_json(capsys)
    assert res["rows"] > 0 and 0.0 <= res["final_eval"] <= 1.0
    for name in ("manifest.json", "metrics.csv", "audit.json", "seed_pool.jsonl", "run_end.json",
                 "round0_stage0.ckpt.json", "round0_stage1.ckpt.json", "round0_stage2.ckpt.json", "final.ckpt.json"):
        assert (out / name).is_file(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["config"]["rounds"] == 1
    # a second run into the same directory is refused, leaving the first intact
    assert main(["train", "--config", small_config, "--out", str(out)]) == 2


def test_train_baseline_mode(tmp_path, small_config):
    out = tmp_path / "run"
    assert main(["train", "--config", small_config, "--out", str(out), "--mode", "baseline"]) == 0
    assert not (out / "round0_stage1.ckpt.json").exists()
    assert "stage1" not in (out / "metrics.csv").read_text()


def test_train_fault_injection_exits_3(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", small_config, "--out", str(out), "--inject-fault", "reward"]) == 3
    assert "InvariantViolation" in capsys.readouterr().err
    assert (out / "metrics.partial.csv").exists() and not (out / "metrics.csv").exists()
    assert json.loads((out / "run_end.json").read_text())["status"].startswith("aborted")


def test_train_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage1": {"lr": -1}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", "preset:nope", "--out", str(tmp_path / "o2")]) == 2


def test_eval_and_version_mismatch(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    main(["train", "--config", small_config, "--out", str(out)])
    capsys.readouterr()
    tasks = tmp_path / "tasks.jsonl"
    assert main(["pool", "synth", "--out", str(tasks), "--n", "10", "--seed", "1"]) == 0
    capsys.readouterr()
    ckpt = out / "final.ckpt.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--tasks", str(tasks), "--k", "4"]) == 0
    res = out_json(capsys)
    assert res["k"] == 4 and 0.0 <= res["aggregate"] <= 1.0 and len(res["per_task"]) == 10
    # same seed, same numbers
    main(["eval", "--checkpoint", str(ckpt), "--tasks", str(tasks)])
    assert out_json(capsys) == res
    d = json.loads(ckpt.read_text())
    d["version"] = 99
    ckpt.write_text(json.dumps(d))
    assert main(["eval", "--checkpoint", str(ckpt), "--tasks", str(tasks)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.json"), "--tasks", str(tasks)]) == 2


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert main(["gradcheck", "--trials", "5"]) == 0
    assert "max_rel_error" in capsys.readouterr().out
    assert main(["gradcheck", "--trials", "0"]) == 2
    dump = tmp_path / "worst.json"
    assert main(["gradcheck", "--trials", "3", "--corrupt", "--dump", str(dump)]) == 1
    worst = json.loads(dump.read_text())
    assert worst["rel_error"] > 1e-5 and "groups" in worst["instance"] and "current" in worst["instance"]


def test_report_command(tmp_path, small_config, capsys):
    runs = []
    for seed in (0, 1):
        out = tmp_path / f"run{seed}"
        main(["train", "--config", small_config, "--out", str(out), "--seed", str(seed)])
        runs.append(str(out / "metrics.csv"))
    rep = tmp_path / "rep"
    assert main(["report", "--metrics", *runs, "--out", str(rep), "--alpha", "0.3"]) == 0
    assert (rep / "mean.stage2.csv").is_file() and (rep / "run0.stage1.csv").is_file()
    assert (rep / "mean_entropy.png").is_file()
    assert main(["report", "--metrics", str(tmp_path / "nope.csv"), "--out", str(rep)]) == 2
    assert main(["report", "--metrics", *runs, "--out", str(rep), "--alpha", "0"]) == 2


def _rec(rate, name="B"):
    t = make_task(V, "lookup", render_context(V, [("A", 3), ("B", 7)]), V.encode([name, "?"]))
    return ProblemRecord(t, rate)


def test_pool_update_and_idempotence(tmp_path, capsys):
    measured = tmp_path / "m.jsonl"
    save_records(measured, [_rec(0.25, "A"), _rec(0.0, "B")], V)
    once, twice = tmp_path / "once.jsonl", tmp_path / "twice.jsonl"
    assert main(["pool", "update", "--in", str(measured), "--out", str(once), "--band", "0.1", "0.3", "--round", "1"]) == 0
    assert main(["pool", "update", "--in", str(measured), "--out", str(twice), "--seeds", str(once), "--band", "0.1", "0.3", "--round", "1"]) == 0
    assert once.read_text() == twice.read_text()
    recs, _ = load_records(once, V)
    assert [r.pass_rate for r in recs] == [0.25] and recs[0].round_added == 1


def test_pool_update_requires_measurement(tmp_path):
    unmeasured = tmp_path / "u.jsonl"
    save_records(unmeasured, [_rec(None)], V)
    assert main(["pool", "update", "--in", str(unmeasured), "--out", str(tmp_path / "o.jsonl")]) == 2
    assert main(["pool", "update", "--in", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o.jsonl")]) == 2


def test_pool_measure_then_update(tmp_path, capsys):
    synth, measured, seeds = (tmp_path / n for n in ("s.jsonl", "m.jsonl", "seeds.jsonl"))
    assert main(["pool", "synth", "--out", str(synth), "--n", "30", "--seed", "2"]) == 0
    assert main(["pool", "measure", "--in", str(synth), "--out", str(measured), "--k", "4"]) == 0
    recs, _ = load_records(measured, V)
    assert len(recs) == 30 and all(r.pass_rate in (0.0, 0.25, 0.5, 0.75, 1.0) for r in recs)
    assert main(["pool", "update", "--in", str(measured), "--out", str(seeds)]) == 0
    kept, _ = load_records(seeds, V)
    assert all(0.1 <= r.pass_rate <= 0.3 for r in kept)


def test_pool_import_reports_rejections(tmp_path, capsys):
    good = _rec(None).to_json(V)
    src = tmp_path / "in.jsonl"
    src.write_text(json.dumps(good) + "\n" + json.dumps(dict(good, gold_tokens=["1"])) + "\n")
    assert main(["pool", "import", "--in", str(src), "--out", str(tmp_path / "out.jsonl")]) == 0
    cap = capsys.readouterr()
    assert "line 2 rejected" in cap.err
    assert json.loads(cap.out)["imported"] == 1


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2
