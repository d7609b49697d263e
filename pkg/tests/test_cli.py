import json
from pathlib import Path

import pytest
import yaml

from mfrbsde.cli import run

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def load(name):
    return yaml.safe_load((CONFIGS / name).read_text())


def write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def outputs(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())}


def test_validate_in_regime_config(tmp_path):
    out = tmp_path / "v"
    assert run(["validate", "--config", str(CONFIGS / "in_regime.yaml"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["all_passed"]
    assert len(rep["verdicts"]) >= 10 and all(v["passed"] is True for v in rep["verdicts"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"config_hash", "seed", "versions", "outputs", "exit_code"} <= manifest.keys()


@pytest.mark.parametrize("cfg", ["in_regime.yaml", "bounded_poisson.yaml"])
def test_solve_both_frameworks(tmp_path, cfg):
    out = tmp_path / "s"
    assert run(["solve", "--config", str(CONFIGS / cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["residuals"]["flat_off"] == 0.0
    if cfg.startswith("bounded"):
        assert json.loads((out / "bounded.json").read_text())["u_bound_holds"]


def test_snell_oracle_small_run(tmp_path):
    out = tmp_path / "o"
    assert run(["snell-oracle", "--seeds", "5", "--out", str(out)]) == 0
    assert json.loads((out / "oracle.json").read_text())["max_diff"] < 1e-10


@pytest.mark.parametrize("cmd, extra", [
    ("simulate", ["--paths", "4"]),
    ("chaos-check", ["--M", "3"]),
    ("stitch-check", ["--h-step", "0.1"]),
    ("sample-copies", ["--copies", "3", "--reps", "2"]),
])
def test_subcommands_succeed(tmp_path, cmd, extra):
    assert run([cmd, "--config", str(CONFIGS / "in_regime.yaml"), "--out", str(tmp_path / cmd), *extra]) == 0


def test_lln_study_on_two_atom(tmp_path):
    out = tmp_path / "l"
    code = run(["lln-study", "--config", str(CONFIGS / "two_atom.yaml"), "--out", str(out),
                "--n-list", "16,64,256,1024", "--reps", "100"])
    assert code == 0
    fit = json.loads((out / "lln.json").read_text())["fit"]
    assert -0.65 <= fit["slope"] <= -0.35


def test_identical_runs_are_byte_identical(tmp_path):
    args = ["--config", str(CONFIGS / "in_regime.yaml"), "--seed", "3"]
    for cmd in ("solve", "sample-copies"):
        run([cmd, *args, "--out", str(tmp_path / "a")])
        run([cmd, *args, "--out", str(tmp_path / "b")])
        assert outputs(tmp_path / "a") == outputs(tmp_path / "b")


def test_unknown_key_exits_two(tmp_path):
    data = load("in_regime.yaml")
    data["model"]["colour"] = "blue"
    out = tmp_path / "e"
    assert run(["solve", "--config", write(tmp_path, data), "--out", str(out)]) == 2
    assert json.loads((out / "error.json").read_text())["error"] == "ConfigError"


def test_missing_config_file_exits_two(tmp_path):
    assert run(["solve", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "e")]) == 2


def test_coarse_grid_exits_two_with_step(tmp_path):
    data = load("two_atom.yaml")
    data["model"]["M"] = 1
    out = tmp_path / "g"
    assert run(["solve", "--config", write(tmp_path, data), "--out", str(out)]) == 2
    assert json.loads((out / "error.json").read_text())["step"] == 0


def test_regime_refusal_exits_three_with_margin(tmp_path):
    data = load("in_regime.yaml")
    data["model"]["obstacle"].update(k1=0.3, k2=0.3, c0=-5.0)
    out = tmp_path / "r"
    assert run(["chaos-check", "--config", write(tmp_path, data), "--out", str(out), "--M", "2"]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["margin"] == pytest.approx(-0.055, abs=1e-15)


def test_budget_refusal_exits_four(tmp_path, monkeypatch):
    monkeypatch.setenv("MFRBSDE_BUDGET", "100")
    out = tmp_path / "b"
    assert run(["chaos-check", "--config", str(CONFIGS / "in_regime.yaml"), "--out", str(out), "--M", "3"]) == 4
    err = json.loads((out / "error.json").read_text())
    assert err["budget"] == 100 and err["required"] > 100


def test_nonconvergence_exits_five(tmp_path):
    data = load("in_regime.yaml")
    data["run"].update(max_iter=1, tol=1e-15)
    out = tmp_path / "c"
    assert run(["solve", "--config", write(tmp_path, data), "--out", str(out)]) == 5
    assert "residuals" in json.loads((out / "error.json").read_text())
