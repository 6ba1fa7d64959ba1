import json

import pytest

from app_paths import PRESETS_DIR
from main import EXIT_AUDIT_FAILED, EXIT_CONFIG, EXIT_MISSING_DIAGNOSTICS, resolve_config_path, run


@pytest.fixture(autouse=True)
def isolated_log(tmp_path, monkeypatch):
    monkeypatch.setenv("MNL_LAB_LOG", str(tmp_path / "test.log"))


@pytest.fixture
def smoke_file(tmp_path):
    path = tmp_path / "smoke.json"
    path.write_text(json.dumps({
        "name": "cli-smoke",
        "environment": {"n_items": 5, "capacity": 2, "dim": 3, "horizon": 8, "truth_hidden": 3},
        "schedule": {"t0": 4},
        "optimizer": {"iterations": 50, "per_round_iterations": 5},
        "policies": ["onl-mnl"],
        "seeds": [0],
        "audit": {"pairs": 100, "dims": [1], "caps": [1.0]},
    }), encoding="utf-8")
    return path


def test_run_then_audit(smoke_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(["run", str(smoke_file), "--out", str(out), "--no-progress"]) == 0
    assert (out / "aggregate.csv").exists()
    assert "final regret" in capsys.readouterr().out
    code = run(["audit", str(smoke_file), str(out)])
    assert code in (0, EXIT_AUDIT_FAILED)
    assert "# Audit: cli-smoke" in capsys.readouterr().out


def test_overrides_and_seed_range(smoke_file, tmp_path):
    out = tmp_path / "out"
    argv = ["run", str(smoke_file), "--out", str(out), "--no-progress",
            "--set", "policies=[\"uniform\"]", "--seed-range", "2..3"]
    assert run(argv) == 0
    assert sorted(p.name for p in out.glob("trace_*.csv")) == ["trace_uniform_2.csv", "trace_uniform_3.csv"]


def test_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"environment": {"n_items": 0}}), encoding="utf-8")
    assert run(["run", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert "environment.n_items" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run(["run", str(tmp_path / "absent.json")]) == EXIT_CONFIG


def test_audit_without_traces(smoke_file, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run(["audit", str(smoke_file), str(empty)]) == EXIT_MISSING_DIAGNOSTICS


def test_preset_names_resolve():
    assert resolve_config_path("gaussian_realizable") == PRESETS_DIR / "gaussian_realizable.json"
    assert resolve_config_path("realizable_n50_k10_d5") == PRESETS_DIR / "realizable_n50_k10_d5.toml"


def test_bad_threads(smoke_file, tmp_path):
    assert run(["run", str(smoke_file), "--out", str(tmp_path / "o"), "--threads", "0"]) == EXIT_CONFIG
