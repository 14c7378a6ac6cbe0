"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import oracle_minimize, tightness_report
from .builders import (
    Correspondence,
    RelativeRotationGraph,
    handeye_quat,
    handeye_so3,
    pointset_avg,
    random_problem,
    registration_problem,
    resectioning_problem,
    rotavg_quat,
    rotavg_so,
)
from .domains import DomainSpec, Kind
from .errors import (
    AssemblyFailed,
    ConfigError,
    OracleUnavailable,
    RotSdpError,
    SamplingFailed,
    SolverFailure,
)
from .problem import StandardFormProblem
from .sdp import SolverSettings, certificate_metrics, solve_relaxation

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("rotsdp")

APPLICATIONS = ("random", "registration", "resectioning", "handeye-so3", "handeye-quat", "rotavg-so",
                "rotavg-quat", "pointset")


class NumericalError(RotSdpError):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None


def _write(path, text):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None


def _settings(args) -> SolverSettings:
    s = SolverSettings(gap_tol=args.gap_tol, feas_tol=args.feas_tol, max_iter=args.max_iter, seed=args.seed)
    if s.gap_tol <= 0 or s.feas_tol <= 0 or s.max_iter < 1:
        raise ConfigError("solver tolerances must be positive")
    return s


def build_problem(application: str, data: dict | None, args=None) -> StandardFormProblem:
    """Problem from an application name and its JSON input (see README for schemas)."""
    if application == "random":
        spec = DomainSpec(Kind(args.kind), args.n)
        return random_problem(spec, seed=args.seed)
    if data is None:
        raise ConfigError(f"'{application}' needs --input")
    version = data.get("schema_version", 1)
    if version != 1:
        raise ConfigError(f"unsupported schema_version {version}")
    try:
        if application == "registration":
            return registration_problem([Correspondence.from_dict(c) for c in data["correspondences"]])
        if application == "resectioning":
            return resectioning_problem([(r["direction"], r["point"]) for r in data["rays"]])
        if application == "handeye-so3":
            return handeye_so3([(np.array(u, float), np.array(v, float)) for u, v in data["pairs"]])
        if application == "handeye-quat":
            return handeye_quat([(np.array(u, float), np.array(v, float)) for u, v in data["pairs"]])
        if application in ("rotavg-so", "rotavg-quat"):
            graph = RelativeRotationGraph.from_dict(data)
            if application == "rotavg-quat":
                return rotavg_quat(graph)
            p = np.asarray(graph.edges[0][2]).shape[0] if graph.edges else 3
            return rotavg_so(graph, p)
        if application == "pointset":
            return pointset_avg([np.array(X, float) for X in data["point_sets"]])
    except KeyError as exc:
        raise ConfigError(f"input is missing key {exc}") from None
    except (ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"invalid {application} input: {exc}") from None
    raise ConfigError(f"unknown application {application!r}")


def _load_problem(path) -> StandardFormProblem:
    data = _read_json(path)
    try:
        return StandardFormProblem.from_dict(data)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path} is not a problem file: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    data = _read_json(args.input) if args.input else None
    prob = build_problem(args.application, data, args)
    _write(args.out, prob.to_json(indent=1) + "\n")
    return EXIT_OK


def cmd_solve(args):
    prob = _load_problem(args.problem)
    sol = solve_relaxation(prob, _settings(args))
    out = {"solution": sol.to_dict()}
    if sol.optimal:
        out["certificate"] = certificate_metrics(sol, prob)
    _write(args.out, json.dumps(out, indent=1) + "\n")
    if not sol.optimal:
        raise NumericalError(f"solver ended with status {sol.status.value}")
    return EXIT_OK


def cmd_analyze(args):
    prob = _load_problem(args.problem)
    settings = _settings(args)
    sol = solve_relaxation(prob, settings)
    rep = tightness_report(prob, settings, seed=args.seed, solution=sol)
    out = rep.to_dict(include_solution=args.include_solution)
    out["certificate"] = certificate_metrics(sol, prob)
    out["application_cost"] = prob.cost_scale * rep.upper_bound + prob.cost_offset
    if args.oracle:
        try:
            val, _ = oracle_minimize(prob, seed=args.seed)
            out["oracle_value"] = val
        except OracleUnavailable as exc:
            out["oracle_value"] = None
            out["oracle_note"] = str(exc)
    _write(args.out, json.dumps(out, indent=1) + "\n")
    if args.spectrum:
        _write(args.spectrum, rep.spectrum_csv())
    return EXIT_OK


def cmd_counterexample(args):
    from .counterexamples import generate_counterexample, verify_bundle

    settings = _settings(args)
    bundle = generate_counterexample(args.structure, args.seed, settings=settings, fit_restarts=args.restarts)
    rep, _, gap = verify_bundle(bundle, seed=args.seed + 1, settings=settings)
    _write(args.out, bundle.to_json(indent=1) + "\n")
    log.info("%s bundle: re-verified %s, rank %d, witness gap %.3e", args.structure, rep.verdict.value,
             rep.rank, gap)
    return EXIT_OK


def cmd_experiment(args):
    from .experiments import ExperimentConfig, default_config, emit_outputs, parse_experiment, run_experiment

    exp = parse_experiment(args.name)
    if args.config:
        cfg = ExperimentConfig.load(args.config, experiment=exp)
    else:
        cfg = default_config(exp, full=args.full)
    overrides = {}
    if args.seed_given:
        overrides["seed"] = args.seed
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.workers is not None:
        overrides["workers"] = args.workers
    for key in ("gap_tol", "feas_tol", "max_iter"):
        if getattr(args, f"{key}_given"):
            overrides[key] = getattr(args, key)
    if args.full and args.config and args.trials is None:
        overrides["trials"] = default_config(exp, full=True).trials
    try:
        cfg = cfg.with_(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    res = run_experiment(cfg)
    try:
        emit_outputs(res, args.out)
    except OSError as exc:
        raise ConfigError(f"cannot write results to {args.out}: {exc}") from None
    failed = sum(not r.ok for r in res.records)
    log.info("%s: %d records, %d failures, %.1fs", cfg.experiment.value, len(res.records), failed, res.wall_time)
    if failed == len(res.records):
        raise NumericalError("every trial failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Given(argparse.Action):
    """Store the value and remember that the flag was given explicitly."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        setattr(namespace, f"{self.dest}_given", True)


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--gap-tol", type=float, default=1e-8, action=_Given, help="relative duality gap tolerance")
    common.add_argument("--feas-tol", type=float, default=1e-9, action=_Given, help="feasibility tolerance")
    common.add_argument("--max-iter", type=int, default=200, action=_Given, help="interior-point iteration cap")
    common.add_argument("--seed", type=int, default=0, action=_Given, help="random seed")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.set_defaults(gap_tol_given=False, feas_tol_given=False, max_iter_given=False, seed_given=False)

    p = argparse.ArgumentParser(prog="rotsdp", description="SDP relaxations over rotation domains")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="build a problem file from application data")
    g.add_argument("application", choices=APPLICATIONS)
    g.add_argument("--input", help="application data (JSON)")
    g.add_argument("--kind", choices=[k.value for k in Kind], default="SO3", help="domain for 'random'")
    g.add_argument("--n", type=int, default=1, help="copies for 'random'")
    g.add_argument("--out", help="output file (default stdout)")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", parents=[common], help="solve the relaxation of a problem file")
    s.add_argument("problem")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    a = sub.add_parser("analyze", parents=[common], help="rank and tightness verdict of the relaxation")
    a.add_argument("problem")
    a.add_argument("--out")
    a.add_argument("--oracle", action="store_true", help="also run the brute-force oracle")
    a.add_argument("--spectrum", help="write the eigenvalue spectrum as CSV")
    a.add_argument("--include-solution", action="store_true")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("counterexample", parents=[common], help="generate a verified non-tight instance")
    c.add_argument("--structure", choices=["generic", "handeye", "registration"], default="generic")
    c.add_argument("--restarts", type=int, default=50, help="fitting restarts")
    c.add_argument("--out")
    c.set_defaults(func=cmd_counterexample)

    e = sub.add_parser("experiment", parents=[common], help="run a batch experiment")
    e.add_argument("name")
    e.add_argument("--config", help="key = value config file")
    e.add_argument("--trials", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--full", action="store_true", help="full trial counts instead of desk-scale defaults")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, NumericalError, AssemblyFailed, SamplingFailed) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RotSdpError as exc:
        # remaining package errors are input problems (bad quaternion, unobservable translation, ...)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
