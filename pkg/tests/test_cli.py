import json
import subprocess
import sys

import numpy as np
import pytest

from autosegloss.cli import main, resolve_config
from autosegloss.net import save_checkpoint
from autosegloss.surrogate import LossSpec, identity_spec
from test_net import oracle_net

FAST = ["--steps", "2", "--samples", "2", "--iterations", "5", "--hidden", "6"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--seed", "7", "--count", "100", "--size", "16", "--classes", "3", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    assert main(["gen-data", "--seed", "3", "--count", "12", "--size", "10", "--out", str(d)]) == 0
    return d


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_layout_and_rerun(data_dir, tmp_path, capsys):
    assert len(list((data_dir / "train").glob("*.pgm"))) == 75
    assert len(list((data_dir / "holdout").glob("*.pgm"))) == 25
    assert main(["gen-data", "--seed", "7", "--count", "100", "--size", "16", "--classes", "3",
                 "--out", str(tmp_path)]) == 0
    assert "seed 7" in capsys.readouterr().out
    assert _tree_bytes(tmp_path) == _tree_bytes(data_dir)


def test_gen_data_rejects_one_class(tmp_path):
    assert main(["gen-data", "--classes", "1", "--out", str(tmp_path)]) == 2


def test_usage_errors():
    assert main([]) == 2
    assert main(["search"]) == 2  # --data missing
    assert main(["search", "--data", "x", "--metric", "nope"]) == 2


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--count", "4", "--out", str(blocker / "sub")]) == 2


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": "d", "steps": 3, "metric": "bf1", "tolerance": 0}))
    _, c, _ = resolve_config(["search", "--config", str(cfg), "--steps", "4"])
    assert c["steps"] == 4 and c["metric"] == "bf1" and c["tolerance"] == 0
    cfg.write_text(json.dumps({"data": "d", "stepz": 3}))
    assert main(["search", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"data": "d", "sigma": -1}))
    assert main(["search", "--config", str(cfg)]) == 2


@pytest.mark.parametrize("argv", [
    ["search", "--data", "d", "--steps", "3", "--family", "linear"],
    ["train", "--loss", "a.json", "--loss", "b.json", "--weights", "0.4,0.6", "--data", "d"],
    ["gen-data", "--out", "o", "--no-blur", "--noise", "0"],
    ["eval", "--checkpoint", "m", "--data", "d", "--metric", "bf1", "--tolerance", "1"],
    ["export-curve", "--loss", "l.json"],
])
def test_config_round_trip(argv, tmp_path, capsys):
    cmd, first, _ = resolve_config(argv)
    assert main(argv + ["--dump-config"]) == 0
    dumped = tmp_path / "dump.json"
    dumped.write_text(capsys.readouterr().out)
    _, second, _ = resolve_config([cmd, "--config", str(dumped)])
    assert second == first


def test_jobs_from_environment(monkeypatch):
    monkeypatch.setenv("ASL_JOBS", "3")
    assert resolve_config(["search", "--data", "d"])[1]["jobs"] == 3
    assert resolve_config(["search", "--data", "d", "--jobs", "1"])[1]["jobs"] == 1
    monkeypatch.setenv("ASL_JOBS", "many")
    assert main(["search", "--data", "d"]) == 2


def test_search_artifacts(small_data, tmp_path):
    out = tmp_path / "s"
    assert main(["search", "--data", str(small_data), "--out", str(out), "--seed", "1"] + FAST) == 0
    lines = (out / "trajectory.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"t", "mu", "scores", "mean_score", "max_score", "wall_ms"} <= set(rec)
    spec = json.loads((out / "loss.json").read_text())
    assert spec["seed"] == 1
    LossSpec.from_dict(spec)


def test_search_missing_dataset(tmp_path):
    assert main(["search", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path)] + FAST) == 2


def test_random_strategy_keeps_mu(small_data, tmp_path):
    assert main(["search", "--data", str(small_data), "--out", str(tmp_path), "--strategy", "random"] + FAST) == 0
    mus = [json.loads(l)["mu"] for l in (tmp_path / "trajectory.jsonl").read_text().splitlines()]
    assert all(m == mus[0] for m in mus)


def test_bf1_tolerance_recorded(small_data, tmp_path):
    tols = []
    for tol in ("0", "2"):
        out = tmp_path / tol
        assert main(["search", "--data", str(small_data), "--out", str(out), "--metric", "bf1",
                     "--tolerance", tol] + FAST) == 0
        tols.append(json.loads((out / "loss.json").read_text())["tolerance_px"])
    assert tols == [0, 2]


def test_search_numeric_failure_exit_code(small_data, tmp_path, monkeypatch):
    from autosegloss import search
    from autosegloss.errors import NumericError

    def boom(*a, **k):
        raise NumericError("non-finite PPO2 gradient", update_step=0)

    monkeypatch.setattr(search, "ppo2_update", boom)
    assert main(["search", "--data", str(small_data), "--out", str(tmp_path)] + FAST) == 3


def _write_spec(path, spec):
    path.write_text(spec.to_json())
    return str(path)


def test_train_report_and_eval_agree(small_data, tmp_path, capsys):
    loss = _write_spec(tmp_path / "l.json", identity_spec("miou"))
    out = tmp_path / "run"
    assert main(["train", "--loss", loss, "--data", str(small_data), "--out", str(out),
                 "--iterations", "10", "--hidden", "6", "--seed", "4"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 4
    assert set(report["metrics"]) == {"gacc", "macc", "miou", "fwiou", "biou", "bf1"}
    assert all(0.0 <= v <= 1.0 for v in report["metrics"].values())
    capsys.readouterr()
    for metric in ("miou", "bf1"):
        assert main(["eval", "--checkpoint", str(out / "model.asln"), "--data", str(out / "evalset"),
                     "--metric", metric]) == 0
        assert capsys.readouterr().out.strip() == f"{report['metrics'][metric]:.6f}"


def test_identity_spec_training_equals_naive(small_data, tmp_path):
    loss = _write_spec(tmp_path / "l.json", identity_spec("miou"))
    common = ["--data", str(small_data), "--iterations", "10", "--hidden", "6", "--seed", "2"]
    assert main(["train", "--loss", loss, "--out", str(tmp_path / "a")] + common) == 0
    assert main(["train", "--loss", "naive:miou", "--out", str(tmp_path / "b")] + common) == 0
    assert (tmp_path / "a" / "model.asln").read_bytes() == (tmp_path / "b" / "model.asln").read_bytes()


def test_combined_training(small_data, tmp_path):
    a = _write_spec(tmp_path / "a.json", identity_spec("miou"))
    b = _write_spec(tmp_path / "b.json", identity_spec("bf1"))
    common = ["--data", str(small_data), "--iterations", "5", "--hidden", "6"]
    assert main(["train", "--loss", a, "--loss", b, "--weights", "0.5,0.5", "--out", str(tmp_path / "c")] + common) == 0
    assert main(["train", "--loss", a, "--out", str(tmp_path / "s")] + common) == 0
    assert (tmp_path / "c" / "model.asln").read_bytes() != (tmp_path / "s" / "model.asln").read_bytes()
    assert main(["train", "--loss", a, "--loss", b, "--out", str(tmp_path / "x")] + common) == 2
    assert main(["train", "--loss", a, "--loss", b, "--weights", "0.5,0.7", "--out", str(tmp_path / "x")] + common) == 2


def test_train_malformed_spec(small_data, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"metric": "miou", "slots": []}')
    assert main(["train", "--loss", str(bad), "--data", str(small_data), "--out", str(tmp_path)]) == 2
    bad.write_text("not json")
    assert main(["train", "--loss", str(bad), "--data", str(small_data), "--out", str(tmp_path)]) == 2


def test_eval_perfect_checkpoint(tmp_path, capsys):
    data = tmp_path / "clean"
    assert main(["gen-data", "--seed", "1", "--count", "8", "--size", "12", "--noise", "0", "--no-blur",
                 "--out", str(data)]) == 0
    ckpt = tmp_path / "oracle.asln"
    ckpt.write_bytes(save_checkpoint(oracle_net(3)))
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--metric", "miou"]) == 0
    assert capsys.readouterr().out.strip() == "1.000000"


def test_eval_errors(small_data, tmp_path, capsys):
    missing = tmp_path / "none.asln"
    assert main(["eval", "--checkpoint", str(missing), "--data", str(small_data)]) == 2
    assert str(missing) in capsys.readouterr().err
    bad = tmp_path / "bad.asln"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["eval", "--checkpoint", str(bad), "--data", str(small_data)]) == 2


def test_export_curve(tmp_path):
    rng = np.random.default_rng(0)
    from test_surrogate import random_spec
    for name, spec in (("ident", identity_spec("biou")), ("rand", random_spec(rng, "miou"))):
        loss = _write_spec(tmp_path / f"{name}.json", spec)
        out = tmp_path / name
        assert main(["export-curve", "--loss", loss, "--out", str(out)]) == 0
        files = sorted(out.glob("slot_*.csv"))
        assert len(files) == len(spec.slots)
        for f in files:
            rows = f.read_text().strip().splitlines()
            assert rows[0] == "y,g" and rows[1] == "0,0" and rows[-1] == "1,1"
            vals = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
            assert len(vals) == 1001
            assert np.all(np.diff(vals[:, 1]) >= 0)
            if name == "ident":
                np.testing.assert_allclose(vals[:, 1], vals[:, 0], atol=1e-12)


def test_console_script_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "autosegloss.cli", "gen-data", "--count", "4", "--size", "8",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "autosegloss.cli", "gen-data", "--classes", "9", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2
