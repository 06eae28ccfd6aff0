"""Config loading, checkpoints, the metrics stream and EMA reports."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doge.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from doge.config import ConfigError, config_from_dict, config_to_dict, load_config, preset
from doge.errors import InvalidInputError, InvariantViolation
from doge.grpo import AdamState
from doge.metrics import HEADER, MetricsRow, MetricsWriter, RunManifest, format_rows, read_metrics, write_run_end
from doge.orchestrator import default_base
from doge.report import build_report, ema, round_averaged, write_report

# --- config -----------------------------------------------------------------------


def test_presets_load():
    toy = preset("toy")
    assert toy.rounds == 3 and toy.stage1.group_size == 4 and toy.stage2.group_size == 8
    assert toy.stage1.clip.eps_low == 0.2 and toy.stage1.clip.eps_high == 0.24
    assert toy.stage2.clip.eps_high == 0.28
    for name in ("paper-3b", "paper-7b"):
        cfg = load_config(f"preset:{name}")
        assert cfg.stage2.lr == 1e-6
    assert preset("paper-3b").stage1.steps == 100 and preset("paper-7b").stage1.steps == 150


def test_config_roundtrip_through_dict(tmp_path):
    cfg = preset("toy").replace(seed=17, mode="baseline")
    d = config_to_dict(cfg)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(d))
    assert load_config(path) == cfg


def test_config_partial_override():
    cfg = config_from_dict({"rounds": 5, "stage2": {"lr": 0.1, "clip": {"eps_high": 0.3}}})
    assert cfg.rounds == 5 and cfg.stage2.lr == 0.1 and cfg.stage2.clip.eps_high == 0.3
    assert cfg.stage2.clip.eps_low == preset("toy").stage2.clip.eps_low


@pytest.mark.parametrize(
    "override,where",
    [
        ({"roundz": 1}, "roundz"),
        ({"stage1": {"lr": "fast"}}, "stage1.lr"),
        ({"stage1": {"steps": True}}, "stage1.steps"),
        ({"stage2": {"clip": {"eps_low": -0.1}}}, "stage2.clip"),
        ({"curriculum": {"band": [0.3, 0.1]}}, "curriculum"),
        ({"mode": "both"}, "mode"),
        ({"eval": {"k": 0}}, "eval"),
    ],
)
def test_config_errors_name_the_field(override, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        config_from_dict(override)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config("preset:huge")


# --- checkpoints ----------------------------------------------------------------------


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    params = default_base()
    rng = np.random.default_rng(0)
    params.weights[:] += rng.normal(0, 1e-3, params.weights.shape)
    params.weights[0, 0] = 1e-310  # subnormal
    opt = AdamState(rng.normal(size=params.weights.shape), rng.random(params.weights.shape), 7)
    path = tmp_path / "x.ckpt.json"
    save_checkpoint(path, Checkpoint(params, opt, {"seed": 3, "round": 1}))
    back = load_checkpoint(path)
    assert back.params.weights.tobytes() == params.weights.tobytes()
    assert back.params.vocab == params.vocab and back.params.space == params.space
    assert back.optimizer.m.tobytes() == opt.m.tobytes() and back.optimizer.v.tobytes() == opt.v.tobytes()
    assert back.optimizer.t == 7 and back.rng_state == {"seed": 3, "round": 1}
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_without_optimizer(tmp_path):
    path = tmp_path / "x.json"
    save_checkpoint(path, Checkpoint(default_base()))
    assert load_checkpoint(path).optimizer is None


def test_checkpoint_rejects_bad_files(tmp_path):
    path = tmp_path / "x.json"
    save_checkpoint(path, Checkpoint(default_base()))
    d = json.loads(path.read_text())
    for mutate in (
        lambda d: d.update(version=2),
        lambda d: d.update(weights=d["weights"][:-1]),
        lambda d: d.update(weights=["zz"] * len(d["weights"])),
        lambda d: d["feature_dims"].update(n_features=3),
        lambda d: d.pop("vocab"),
    ):
        bad = json.loads(json.dumps(d))
        mutate(bad)
        path.write_text(json.dumps(bad))
        with pytest.raises(InvalidInputError):
            load_checkpoint(path)
    path.write_text("not json")
    with pytest.raises(InvalidInputError):
        load_checkpoint(path)
    with pytest.raises(InvalidInputError):
        load_checkpoint(tmp_path / "missing.json")


# --- metrics stream -----------------------------------------------------------------


def row(r, stage, step, **kw):
    return MetricsRow(r, stage, step, kw.get("reward", 0.5), kw.get("ent", 1.0), 0.0, 0.0, 0.0, kw.get("eval"), 3)


def test_metrics_header_and_roundtrip(tmp_path):
    rows = [row(0, "warmup", 0), row(0, "stage1", 0, ent=0.1 + 0.2), row(0, "stage2", 3), row(0, "eval", 0, eval=0.25)]
    w = MetricsWriter(tmp_path / "m.csv")
    for r in rows:
        w.append(r)
    assert not (tmp_path / "m.csv").exists()
    w.close()
    text = (tmp_path / "m.csv").read_text()
    assert text.splitlines()[0] == ",".join(HEADER)
    assert text == format_rows(rows)
    assert read_metrics(tmp_path / "m.csv") == rows


def test_metrics_keys_must_increase():
    w = MetricsWriter(None)
    w.append(row(0, "stage2", 0))
    with pytest.raises(InvariantViolation):
        w.append(row(0, "stage1", 5))
    with pytest.raises(InvariantViolation):
        w.append(row(0, "stage2", 0))
    w.append(row(1, "warmup", 0))


def test_metrics_abort_keeps_partial(tmp_path):
    w = MetricsWriter(tmp_path / "metrics.csv")
    w.append(row(0, "warmup", 0))
    w.abort()
    assert not (tmp_path / "metrics.csv").exists()
    assert read_metrics(tmp_path / "metrics.partial.csv") == [row(0, "warmup", 0)]


def test_read_metrics_checks_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics(p)


def test_manifest_is_write_once(tmp_path):
    m = RunManifest.create({"rounds": 1}, 5, "abc")
    m.write(tmp_path)
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["seed"] == 5 and d["vocab_digest"] == "abc" and d["config"] == {"rounds": 1}
    assert d["code_version"] and d["started_at"]
    with pytest.raises(InvalidInputError):
        m.write(tmp_path)
    write_run_end(tmp_path, "ok")
    assert json.loads((tmp_path / "run_end.json").read_text())["status"] == "ok"


# --- EMA and reports ------------------------------------------------------------------


def test_ema_examples():
    assert ema([0.0, 1.0], 0.5).tolist() == [0.0, 0.5]
    assert ema([2.0, 2.0, 2.0], 0.1).tolist() == [2.0, 2.0, 2.0]
    assert ema([1.0, 3.0], 1.0).tolist() == [1.0, 3.0]
    assert ema([], 0.3).size == 0
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(InvalidInputError):
            ema([1.0], bad)


@settings(max_examples=100, deadline=None)
@given(
    xs=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40),
    alpha=st.floats(0.01, 1.0),
)
def test_ema_recurrence(xs, alpha):
    s = ema(xs, alpha)
    assert s[0] == xs[0]
    for t in range(1, len(xs)):
        assert abs(s[t] - (alpha * xs[t] + (1 - alpha) * s[t - 1])) <= 1e-12 * max(1.0, abs(s[t]))
    assert min(xs) - 1e-9 <= s.min() and s.max() <= max(xs) + 1e-9


def _write_run(path, rounds, stage2_steps, offset=0.0):
    rows = []
    for t in range(rounds):
        if t == 0:
            rows += [row(0, "warmup", s, ent=1.0 + s + offset) for s in range(3)]
        for s in range(stage2_steps):
            rows.append(row(t, "stage2", s, ent=float(t + s) + offset))
        rows.append(row(t, "eval", 0, eval=0.5))
    path.write_text(format_rows(rows))
    return path


def test_round_averaged(tmp_path):
    p = _write_run(tmp_path / "a.csv", rounds=3, stage2_steps=4)
    avg = round_averaged(p)
    assert set(avg) == {"warmup", "stage2"}
    assert avg["stage2"] == {s: float(np.mean([t + s for t in range(3)])) for s in range(4)}
    assert avg["warmup"] == {0: 1.0, 1: 2.0, 2: 3.0}
    with pytest.raises(InvalidInputError):
        round_averaged(p, "wall_ms")


def test_report_mean_and_grid_mismatch(tmp_path):
    a = _write_run(tmp_path / "a.csv", 2, 4)
    b = _write_run(tmp_path / "b.csv", 2, 4, offset=1.0)
    per_run, mean = build_report([a, b], alpha=0.5)
    m2 = next(s for s in mean if s.stage == "stage2")
    ra = next(s for s in per_run if s.name == "a" and s.stage == "stage2")
    np.testing.assert_allclose(m2.raw_mean, ra.raw_mean + 0.5)
    np.testing.assert_allclose(m2.ema, ema(m2.raw_mean, 0.5))
    c = _write_run(tmp_path / "c.csv", 2, 6)
    with pytest.warns(UserWarning, match="step grids differ"):
        _, mean = build_report([a, c])
    assert next(s for s in mean if s.stage == "stage2").steps == [0, 1, 2, 3]


def test_write_report_files(tmp_path):
    (tmp_path / "run1").mkdir()
    a = _write_run(tmp_path / "run1" / "metrics.csv", 1, 5)
    out = tmp_path / "report"
    written = write_report([a], out, alpha=0.2)
    names = sorted(p.name for p in written)
    assert "run1.stage2.csv" in names and "mean.stage2.csv" in names and "mean_entropy.png" in names
    assert (out / "mean_entropy.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    lines = (out / "run1.stage2.csv").read_text().splitlines()
    assert lines[0] == "step,raw_mean,ema" and len(lines) == 6
    assert not any(p.suffix == ".tmp" for p in out.iterdir())
    with pytest.raises(InvalidInputError):
        write_report([], out)
