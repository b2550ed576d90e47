import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ospde.cli import main
from ospde.config import ConfigError, build_problem, build_run, config_hash, load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def zero_config():
    return load_config(CONFIGS / "zero.json")


# --------------------------------------------------------------------------- #
# config layer
# --------------------------------------------------------------------------- #


def test_hash_stable_under_reordering():
    a = {"problem": {"horizon": 1.0, "initial": 0}, "run": {"dt": 0.1, "paths": 3}}
    b = {"run": {"paths": 3, "dt": 0.1}, "problem": {"initial": 0, "horizon": 1.0}}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "run": {"dt": 0.2, "paths": 3}})


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda c: c["problem"].pop("domain"), "problem.domain"),
        (lambda c: c["problem"]["sigma"].update(kind="wavy"), "problem.sigma.kind"),
        (lambda c: c["problem"]["coefficients"].update(h=[{"form": "cubic"}]), "problem.coefficients.h[0].form"),
        (lambda c: c["problem"]["coefficients"]["lipschitz"].update(C=-1), "problem.coefficients.lipschitz"),
        (lambda c: c["problem"]["domain"].update(resolution=[2]), "problem.domain"),
        (lambda c: c["problem"].update(initial={"form": "poly", "expr": "x1*"}), "problem.initial.expr"),
    ],
)
def test_schema_errors_name_the_field(mutate, field):
    cfg = zero_config()
    mutate(cfg)
    with pytest.raises(ConfigError) as info:
        build_problem(cfg["problem"])
    assert info.value.path == field


def test_run_rejects_unknown_key():
    with pytest.raises(ConfigError) as info:
        build_run({"dt": 0.1, "steps": 3})
    assert info.value.path == "run.steps"


def test_config_matches_python_builder():
    import problems
    from ospde.solver import NoisePath, TimeMesh, simulate

    p = build_problem(load_config(CONFIGS / "picard.json")["problem"])
    ref = problems.picard_problem()
    mesh = TimeMesh(1.0, 20)
    path = NoisePath.generate(1, mesh, 1)
    a, b = simulate(p, 100.0, path, mesh), simulate(ref, 100.0, path, mesh)
    assert np.max(np.abs(a.states - b.states)) < 1e-12


def test_tabulated_and_bump_forms():
    cfg = zero_config()
    n = cfg["problem"]["domain"]["resolution"][0]
    cfg["problem"]["initial"] = {"form": "tabulated", "values": list(np.linspace(0, 1, n))}
    p = build_problem(cfg["problem"])
    assert np.allclose(p.initial_values(), np.linspace(0, 1, n))
    cfg["problem"]["initial"] = {"form": "bump", "center": [1.5], "width": 0.5}
    v = build_problem(cfg["problem"]).initial_values()
    assert v.max() <= 1.0 and v.min() == 0.0


# --------------------------------------------------------------------------- #
# CLI
# --------------------------------------------------------------------------- #


def test_validate_zero_problem(tmp_path, capsys):
    assert main(["validate", "--config", str(CONFIGS / "zero.json"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "violations.json").read_text())
    assert report["violations"] == []
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert report["manifest_id"] == manifest["manifest_id"]
    assert report["config_hash"] == manifest["config_hash"]


def test_validate_assumption_failure(tmp_path):
    cfg = zero_config()
    cfg["problem"]["obstacle"] = {"barrier": 1.0}
    code = main(["validate", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")])
    assert code == 4
    report = json.loads((tmp_path / "o" / "violations.json").read_text())
    assert [v["message"] for v in report["violations"]] == ["S0 <= xi violated"]


def test_schema_error_exit_code(tmp_path, capsys):
    cfg = zero_config()
    cfg["problem"]["sigma"]["kind"] = "wavy"
    assert main(["validate", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path)]) == 3
    assert "problem.sigma.kind" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "nope.json")]) == 3
    assert main(["simulate", "--out", str(tmp_path)]) == 3


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    assert main(["validate", "--config", str(p)]) == 3


def test_hormander_from_flags(tmp_path):
    assert main(["hormander", "--fields", "d1; x1*d2", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n0"] == 1 and report["eta"] == "1/2"
    assert "manifest_id" in report


def test_hormander_from_config(tmp_path):
    assert main(["hormander", "--config", str(CONFIGS / "grushin.json"), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["n0"] == 1


def test_example1_csv(tmp_path):
    assert main(["example1", "--modes", "8,16,32", "--paths", "500", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "example1.csv").open()))
    energies = [float(r["mean_energy"]) for r in rows]
    assert [int(r["modes"]) for r in rows] == [8, 16, 32]
    assert energies[0] < energies[1] < energies[2]


def test_example1_bad_modes(tmp_path):
    assert main(["example1", "--modes", "8,x", "--out", str(tmp_path)]) == 3


def test_simulate_reports(tmp_path):
    cfg = load_config(CONFIGS / "heat.json")
    cfg["run"]["dt"] = 1e-2
    cfg["run"]["export_every"] = 25
    assert main(["simulate", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 0
    out = tmp_path / "o"
    summary = json.loads((out / "summary.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    assert summary["manifest_id"] == manifest["manifest_id"]
    assert manifest["seeds"] == {"base_seed": 0, "paths": 1}
    assert (out / "trajectory_seed0.csv").read_text().startswith("step,t,x1,u,grad1,reflection\n")


def test_picard_reports(tmp_path):
    assert main(["picard", "--config", str(CONFIGS / "picard.json"), "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged"] and summary["max_ratio"] <= summary["theoretical_ratio"] + 0.1


def test_compare_reports(tmp_path):
    assert main(["compare", "--config", str(CONFIGS / "compare_drift.json"), "--paths", "3", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["violations"] == 0


def test_compare_precondition_exit_code(tmp_path):
    cfg = load_config(CONFIGS / "compare_drift.json")
    cfg["problem"], cfg["problem_b"] = cfg["problem_b"], cfg["problem"]
    assert main(["compare", "--config", str(write(tmp_path, cfg)), "--paths", "2", "--out", str(tmp_path / "o")]) == 4


def test_degiorgi_small_run(tmp_path):
    code = main(["degiorgi", "--config", str(CONFIGS / "degiorgi.json"), "--paths", "3", "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["eta"] == 0.25 and summary["alpha0"] == 0.3125
    assert summary["nonincreasing_all_paths"]
    assert not (tmp_path / "tail.csv").exists()


def test_negative_seed_rejected(tmp_path):
    assert main(["example1", "--seed", "-1", "--out", str(tmp_path)]) == 3


def test_reports_identical_across_runs(tmp_path):
    for tag in ("a", "b"):
        assert main(["example1", "--modes", "4,8", "--paths", "50", "--out", str(tmp_path / tag)]) == 0
    for name in ("example1.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
