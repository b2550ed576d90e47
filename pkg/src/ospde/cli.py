"""ospde command line: one subcommand per experiment.

Exit status: 0 success, 1 runtime failure, 2 usage error, 3 config schema
error, 4 assumption failure (validation, contraction or comparison ordering).
"""
from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (
    ComparisonPrecondition,
    comparison_test,
    example1_blowup,
    initial_excess,
    lambda_zero,
    parallel_map,
    run_ensemble,
    tail_and_moments,
)
from .config import ConfigError, build_problem, build_run, config_hash, load_config
from .discretize import discretize
from .model import check_contraction, validate_problem
from .solver import NoisePath, PicardDiverged, TimeMesh, path_seed, picard_solve, ratio_history, simulate, trajectory_csv
from .symbolic import ParseError, alpha_exponent, hormander_order, parse_fields

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_ASSUMPTION = 0, 1, 3, 4


class AssumptionFailure(RuntimeError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


class Outputs:
    """Collects report files; the manifest id hashes everything but the timestamp."""

    def __init__(self, out: Path, command: str, cfg_hash: str):
        self.out = out
        self.body = {
            "command": command,
            "config_hash": cfg_hash,
            "versions": {
                "ospde": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        }

    def record(self, **entries) -> None:
        """Add manifest entries; call before writing reports that cite the id."""
        self.body.update(_clean(entries))

    @property
    def manifest_id(self) -> str:
        text = json.dumps(self.body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def write_manifest(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        body = dict(self.body, manifest_id=self.manifest_id)
        body["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        (self.out / "manifest.json").write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")

    def text(self, name: str, content: str) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / name).write_text(content)

    def summary(self, name: str, data: dict) -> None:
        payload = dict(_clean(data), manifest_id=self.manifest_id, config_hash=self.body["config_hash"])
        self.text(name, json.dumps(payload, sort_keys=True, indent=2) + "\n")


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #


def _problem_and_run(args, cfg: dict):
    problem = build_problem(cfg.get("problem"), "problem")
    run = build_run(cfg.get("run"), "run")
    seed = run.base_seed if args.seed is None else args.seed
    paths = run.paths if args.paths is None else args.paths
    steps = max(1, int(round(problem.horizon / run.dt)))
    return problem, run, seed, paths, TimeMesh(problem.horizon, steps)


def _require_valid(problem, outputs: Outputs) -> None:
    violations = validate_problem(problem)
    if violations:
        outputs.summary("violations.json", {"violations": [v.__dict__ for v in violations]})
        raise AssumptionFailure("; ".join(f"{v.assumption}: {v.message}" for v in violations))


def cmd_validate(args, cfg, outputs: Outputs) -> int:
    problem = build_problem(cfg.get("problem"), "problem")
    violations = validate_problem(problem)
    report = check_contraction(problem.coeffs.lipschitz)
    outputs.summary(
        "violations.json",
        {"violations": [v.__dict__ for v in violations], "contraction": report.__dict__},
    )
    outputs.write_manifest()
    for v in violations:
        print(f"{v.assumption}: {v.message}")
    if violations:
        return EXIT_ASSUMPTION
    print("no violations")
    return EXIT_OK


def cmd_simulate(args, cfg, outputs: Outputs) -> int:
    problem, run, seed, paths, mesh = _problem_and_run(args, cfg)
    penalties = run.penalties or (run.penalty,)
    outputs.record(seeds={"base_seed": seed, "paths": paths}, mesh={"dt": mesh.dt, "steps": mesh.steps}, penalties=list(penalties))
    _require_valid(problem, outputs)
    disc = discretize(problem)

    def one(index: int):
        s = path_seed(seed, index)
        path = NoisePath.generate(s, mesh, problem.coeffs.J)
        rows = []
        for n in penalties:
            tr = simulate(problem, n, path, mesh, disc)
            rows.append([s, n, tr.energy(), tr.penalty_residual(), tr.reflection_mass(), float(np.max(np.abs(tr.states)))])
        return rows

    rows = [r for block in parallel_map(one, range(paths), args.workers) for r in block]
    outputs.text("paths.csv", _csv(["seed", "penalty", "energy", "penalty_residual", "reflection_mass", "sup_abs_u"], rows))
    if run.export_every > 0:
        path = NoisePath.generate(path_seed(seed, 0), mesh, problem.coeffs.J)
        tr = simulate(problem, penalties[-1], path, mesh, disc)
        outputs.text("trajectory_seed{}.csv".format(path_seed(seed, 0)), trajectory_csv(tr, disc.grid, run.export_every))
    means = {}
    for n in penalties:
        sel = [r for r in rows if r[1] == n]
        means[_fmt(n)] = {
            "energy": float(np.mean([r[2] for r in sel])),
            "penalty_residual": float(np.mean([r[3] for r in sel])),
        }
    outputs.summary("summary.json", {"paths": paths, "steps": mesh.steps, "dt": mesh.dt, "penalties": list(penalties), "means": means})
    outputs.write_manifest()
    print(f"simulated {paths} path(s) x {len(penalties)} penalty value(s)")
    return EXIT_OK


def cmd_picard(args, cfg, outputs: Outputs) -> int:
    problem, run, seed, _, mesh = _problem_and_run(args, cfg)
    outputs.record(seeds={"base_seed": seed, "paths": 1}, mesh={"dt": mesh.dt, "steps": mesh.steps}, penalty=run.penalty)
    _require_valid(problem, outputs)
    path = NoisePath.generate(seed, mesh, problem.coeffs.J)
    report = check_contraction(problem.coeffs.lipschitz)
    try:
        traj, history = picard_solve(problem, run.penalty, path, mesh, run.picard_tol, run.picard_max_iter)
        converged = True
    except PicardDiverged as exc:
        history, converged = exc.history, False
    dist = [s.distance for s in history[1:]]
    ratios = ratio_history(history)
    rows = [[m + 1, d, ratios[m - 1] if 1 <= m <= len(ratios) else ""] for m, d in enumerate(dist)]
    outputs.text("picard.csv", _csv(["iterate", "distance", "ratio"], rows))
    outputs.summary(
        "summary.json",
        {
            "converged": converged,
            "iterations": len(dist),
            "theoretical_ratio": report.ratio,
            "max_ratio": max(ratios) if ratios else None,
            "epsilon": report.epsilon,
            "gamma": report.gamma,
            "delta": report.delta,
        },
    )
    outputs.write_manifest()
    print(f"picard {'converged' if converged else 'did not converge'} after {len(dist)} iterate(s)")
    return EXIT_OK if converged else EXIT_RUNTIME


def cmd_compare(args, cfg, outputs: Outputs) -> int:
    problem, run, seed, paths, mesh = _problem_and_run(args, cfg)
    other = build_problem(cfg.get("problem_b"), "problem_b")
    outputs.record(seeds={"base_seed": seed, "paths": paths}, mesh={"dt": mesh.dt, "steps": mesh.steps}, penalty=run.penalty)
    try:
        stats = comparison_test(problem, other, [path_seed(seed, i) for i in range(paths)], mesh, run.compare_tol, run.penalty, args.workers)
    except ComparisonPrecondition as exc:
        raise AssumptionFailure(str(exc)) from exc
    outputs.summary(
        "summary.json",
        {
            "paths": stats.paths,
            "cells": stats.cells,
            "violations": stats.violations,
            "violation_fraction": stats.violation_fraction,
            "max_excess": stats.max_excess,
            "tol": run.compare_tol,
        },
    )
    outputs.write_manifest()
    print(f"violation fraction {stats.violation_fraction:.3g} over {stats.paths} paths")
    return EXIT_OK


def cmd_degiorgi(args, cfg, outputs: Outputs) -> int:
    problem, run, seed, paths, mesh = _problem_and_run(args, cfg)
    outputs.record(seeds={"base_seed": seed, "paths": paths}, mesh={"dt": mesh.dt, "steps": mesh.steps}, penalty=run.penalty)
    _require_valid(problem, outputs)
    fields = problem.sigma.fields
    if fields is None:
        raise ConfigError("problem.sigma", "De Giorgi runs need sigma given as vector fields")
    horm = hormander_order(fields, problem.domain.dim)
    if horm.eta is None:
        raise AssumptionFailure("Hormander condition fails for the sigma fields")
    eta = float(horm.eta)
    alpha0 = alpha_exponent(horm.eta, problem.domain.dim, run.k)
    lam0 = lambda_zero(initial_excess(problem))
    lam = run.degiorgi_lambda if run.degiorgi_lambda is not None else max(lam0, 1.0)
    ens = run_ensemble(problem, run.penalty, mesh, seed, paths, lam, run.levels, eta, args.workers)
    rows = [[r.seed, r.sup_plus] + list(r.levels) for r in ens.runs]
    outputs.text("levels.csv", _csv(["seed", "sup_plus"] + [f"V{m}" for m in range(run.levels + 1)], rows))
    lambdas = np.array(run.lambdas) if run.lambdas else np.linspace(0.0, max(float(ens.sups.max()), 1.0) * 1.05, 64)
    summary = {
        "lambda": lam,
        "lambda0": ens.lambda0,
        "eta": eta,
        "alpha0": float(alpha0),
        "n0": horm.n0,
        "n0_effective": horm.n0_eff,
        "nonincreasing_all_paths": all(bool(np.all(np.diff(r.levels) <= 0)) for r in ens.runs),
        "truncation_identities": all(r.nested and r.indicator_bound for r in ens.runs),
    }
    if paths >= 100:
        rep = tail_and_moments(ens, lambdas, run.p, float(alpha0))
        outputs.text("tail.csv", _csv(["lambda", "tail"], [[a, b] for a, b in zip(rep.lambdas, rep.tail)]))
        summary.update(
            c_prime=rep.c_prime,
            fit_r2=rep.r2,
            degenerate=rep.degenerate,
            moment_direct=rep.moment_direct,
            moment_layercake=rep.moment_layercake,
            moment_se=rep.moment_se,
        )
    outputs.summary("summary.json", summary)
    outputs.write_manifest()
    print(f"De Giorgi levels for {paths} path(s); eta={eta}, alpha0={float(alpha0):.6g}")
    return EXIT_OK


def _parse_modes(text: str) -> list[int]:
    try:
        modes = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("--modes", f"expected comma-separated integers, got {text!r}") from None
    if not modes or min(modes) < 1:
        raise ConfigError("--modes", "mode cutoffs must be positive integers")
    return modes


def cmd_example1(args, cfg, outputs: Outputs) -> int:
    spec = cfg.get("example1", {}) if cfg else {}
    modes = _parse_modes(args.modes) if args.modes else [int(m) for m in spec.get("modes", [8, 16, 32, 64, 128])]
    paths = args.paths if args.paths is not None else int(spec.get("paths", 500))
    seed = args.seed if args.seed is not None else int(spec.get("base_seed", 0))
    T = float(spec.get("T", 1.0))
    dt = float(spec.get("dt", 1e-2))
    pattern = spec.get("hbar", "inverse")
    if pattern == "zero":
        hbar = None
    elif pattern == "inverse":
        hbar = lambda k: 1.0 / k
    else:
        raise ConfigError("example1.hbar", f"unknown pattern {pattern!r}; use 'zero' or 'inverse'")
    outputs.record(seeds={"base_seed": seed, "paths": paths}, modes=modes, T=T, dt=dt)
    rep = example1_blowup(modes, hbar, T, dt, paths, seed)
    outputs.text(
        "example1.csv",
        _csv(["modes", "mean_energy", "bootstrap_se", "closed_form"], [[r.modes, r.mean, r.se, r.closed_form] for r in rep.rows]),
    )
    outputs.summary("summary.json", {"slope": rep.slope, "r2": rep.r2, "paths": paths, "T": T, "hbar": pattern})
    outputs.write_manifest()
    for r in rep.rows:
        print(f"N={r.modes}: E|w|^2 = {r.mean:.6g} (closed form {r.closed_form:.6g})")
    return EXIT_OK


def cmd_hormander(args, cfg, outputs: Outputs) -> int:
    if args.fields:
        texts = [t.strip() for t in args.fields.split(";") if t.strip()]
        dim = args.dim
        depth = 5
    else:
        spec = (cfg or {}).get("hormander")
        if spec is None:
            raise ConfigError("hormander", "give --fields or a 'hormander' section")
        texts = spec.get("fields")
        if not isinstance(texts, list):
            raise ConfigError("hormander.fields", "expected a list of strings")
        dim = spec.get("dim")
        depth = int(spec.get("depth_cap", 5))
    try:
        fields = parse_fields(texts, dim)
    except (ParseError, ValueError) as exc:
        raise ConfigError("hormander.fields", str(exc)) from exc
    d = fields[0].dim
    res = hormander_order(fields, d, depth)
    outputs.summary("report.json", dict(res.as_dict(), fields=[str(f) for f in fields], dim=d))
    outputs.write_manifest()
    if res.n0 is None:
        print(f"Hormander condition not met up to depth {depth}")
    else:
        print(f"n0 = {res.n0}, eta = {res.eta}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "picard": cmd_picard,
    "compare": cmd_compare,
    "degiorgi": cmd_degiorgi,
    "example1": cmd_example1,
    "hormander": cmd_hormander,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ospde", description="Obstacle SPDE experiments")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="JSON config file")
    ap.add_argument("--out", type=Path, default=Path("ospde_out"), help="output directory")
    ap.add_argument("--seed", type=int, help="base seed (overrides run.base_seed)")
    ap.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    ap.add_argument("--workers", type=int, default=1, help="worker processes for path-parallel runs")
    ap.add_argument("--modes", help="example1: comma-separated mode cutoffs")
    ap.add_argument("--fields", help="hormander: ';'-separated vector fields, e.g. 'd1; x1*d2'")
    ap.add_argument("--dim", type=int, help="hormander: ambient dimension for --fields")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", "must be non-negative")
        if args.paths is not None and args.paths < 1:
            raise ConfigError("--paths", "must be >= 1")
        if args.config and not args.config.is_file():
            raise ConfigError("--config", f"no such file: {args.config}")
        cfg = load_config(args.config) if args.config else {}
        needs_config = args.command in ("validate", "simulate", "picard", "compare", "degiorgi")
        if needs_config and not args.config:
            raise ConfigError("--config", f"'{args.command}' needs a config file")
        outputs = Outputs(args.out, args.command, config_hash(cfg))
        return COMMANDS[args.command](args, cfg, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionFailure as exc:
        print(f"assumption failure: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
