"""Batch experiments: rank histograms, noise sweeps, the application tightness
matrix and counterexample runs, with CSV/SVG output.

Seeding: trial ``t`` of setting ``k`` under master seed ``S`` draws all its
randomness from ``numpy.random.default_rng(trial_seed(S, k, t))`` where
``trial_seed`` hashes ``SeedSequence(S, spawn_key=(k, t))`` to a 64-bit
integer.  Records therefore do not depend on execution order or worker count.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import enum
import hashlib
import io
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import __version__
from .analysis import Verdict, tightness_report
from .builders import (
    Correspondence,
    RelativeRotationGraph,
    handeye_quat,
    handeye_so3,
    pointset_avg,
    random_problem,
    registration_problem,
    rotavg_quat,
    rotavg_so,
)
from .domains import DomainSpec, Kind, matrix_to_quat
from .errors import ConfigError, RotSdpError
from .sdp import SolverSettings, certificate_metrics, solve_relaxation

log = logging.getLogger(__name__)


class Experiment(str, enum.Enum):
    HIST_SO3 = "HistSO3"
    HIST_SO3X2 = "HistSO3x2"
    ROTAVG_SWEEP = "RotAvgSweep"
    POINTSET_SWEEP = "PointSetSweep"
    TABLE2_PROBE = "Table2Probe"
    COUNTEREXAMPLE_RUN = "CounterexampleRun"


_ALIASES = {
    "hist-so3": Experiment.HIST_SO3,
    "hist-so3x2": Experiment.HIST_SO3X2,
    "rotavg-sweep": Experiment.ROTAVG_SWEEP,
    "pointset-sweep": Experiment.POINTSET_SWEEP,
    "table2-probe": Experiment.TABLE2_PROBE,
    "counterexample-run": Experiment.COUNTEREXAMPLE_RUN,
}


def parse_experiment(name: str) -> Experiment:
    key = name.strip()
    for e in Experiment:
        if key.lower() == e.value.lower():
            return e
    if key.lower() in _ALIASES:
        return _ALIASES[key.lower()]
    raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(_ALIASES)}")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's records.

    File format: one ``key = value`` per line, ``#`` comments, lists
    comma-separated.  Keys are the field names below.
    """

    experiment: Experiment
    trials: int = 500
    seed: int = 0
    sigma: tuple = (0.0,)
    n_rotations: int = 4
    n_points: int = 100
    squeeze: float = 0.01
    structure: str = "generic"
    gap_tol: float = 1e-8
    feas_tol: float = 1e-9
    max_iter: int = 200
    margin_threshold: float = 10.0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "experiment", parse_experiment(str(getattr(self.experiment, "value", self.experiment))))
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not self.sigma or any(s < 0 or not np.isfinite(s) for s in self.sigma):
            raise ConfigError("noise levels must be finite and nonnegative")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.gap_tol <= 0 or self.feas_tol <= 0 or self.max_iter < 1:
            raise ConfigError("solver tolerances must be positive")
        if self.structure not in ("generic", "handeye", "registration"):
            raise ConfigError(f"unknown structure {self.structure!r}")

    @property
    def settings(self) -> SolverSettings:
        return SolverSettings(gap_tol=self.gap_tol, feas_tol=self.feas_tol, max_iter=self.max_iter,
                              seed=self.seed)

    def with_(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["experiment"] = self.experiment.value
        d["sigma"] = list(self.sigma)
        return d

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "experiment":
                v = v.value
            elif f.name == "sigma":
                v = ", ".join(repr(s) for s in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, experiment=None, **overrides) -> "ExperimentConfig":
        """Parse a config file.  ``experiment`` fills in a missing
        ``experiment`` key and must agree with it when present."""
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        try:
            parser.read_string("[config]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        raw = dict(parser["config"])
        if experiment is not None:
            exp = parse_experiment(getattr(experiment, "value", experiment))
            if "experiment" in raw and parse_experiment(raw["experiment"]) is not exp:
                raise ConfigError(f"config describes {raw['experiment']}, not {exp.value}")
            raw["experiment"] = exp.value
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "experiment" not in raw:
            raise ConfigError("config needs an 'experiment' key")
        kw = {}
        for name, value in raw.items():
            try:
                kw[name] = _convert(name, known[name].default, value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name}: {value!r} ({exc})") from None
        base = default_config(kw.pop("experiment"))
        return base.with_(**kw)

    @classmethod
    def load(cls, path, experiment=None, **overrides) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, experiment, **overrides)


def _convert(name, default, value):
    if not isinstance(value, str):
        return value
    value = value.strip()
    if name == "experiment":
        return parse_experiment(value)
    if name == "sigma":
        return tuple(float(v) for v in value.split(",") if v.strip())
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def default_config(experiment, full=False) -> ExperimentConfig:
    """Desk-scale defaults; ``full`` raises sweeps to 10,000 trials per noise level."""
    e = parse_experiment(getattr(experiment, "value", experiment))
    sweep = 10_000 if full else 500
    if e in (Experiment.HIST_SO3, Experiment.HIST_SO3X2):
        return ExperimentConfig(e, trials=1000)
    if e is Experiment.ROTAVG_SWEEP:
        return ExperimentConfig(e, trials=sweep, sigma=tuple(np.round(np.arange(11) * 0.1, 10)))
    if e is Experiment.POINTSET_SWEEP:
        return ExperimentConfig(e, trials=sweep, sigma=tuple(np.arange(9) * 0.25))
    if e is Experiment.TABLE2_PROBE:
        return ExperimentConfig(e, trials=sweep // 5 if not full else 1000, sigma=(0.01, 1.0))
    return ExperimentConfig(e, trials=20, n_rotations=1)


# ---------------------------------------------------------------------------
# records


RECORD_COLUMNS = ["setting", "sigma", "trial", "seed", "status", "rank", "margin", "lower_bound",
                  "upper_bound", "rel_gap", "verdict", "low_confidence", "min_eig_S", "duality_gap",
                  "sos_error", "flags"]


@dataclass
class TrialRecord:
    setting: str
    sigma: float
    trial: int
    seed: int
    status: str = "ok"
    rank: int = 0
    margin: float = float("nan")
    lower_bound: float = float("nan")
    upper_bound: float = float("nan")
    rel_gap: float = float("nan")
    verdict: str = ""
    low_confidence: bool = False
    min_eig_S: float = float("nan")
    duality_gap: float = float("nan")
    sos_error: float = float("nan")
    flags: str = ""
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def row(self):
        return [_fmt(getattr(self, c)) for c in RECORD_COLUMNS]

    @classmethod
    def from_row(cls, row: dict):
        return cls(
            setting=row["setting"],
            sigma=float(row["sigma"]),
            trial=int(row["trial"]),
            seed=int(row["seed"]),
            status=row["status"],
            rank=int(row["rank"]),
            margin=float(row["margin"]),
            lower_bound=float(row["lower_bound"]),
            upper_bound=float(row["upper_bound"]),
            rel_gap=float(row["rel_gap"]),
            verdict=row["verdict"],
            low_confidence=row["low_confidence"] == "1",
            min_eig_S=float(row["min_eig_S"]),
            duality_gap=float(row["duality_gap"]),
            sos_error=float(row["sos_error"]),
            flags=row["flags"],
        )


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


AGGREGATE_COLUMNS = ["setting", "sigma", "trials", "succeeded", "failed", "avg_rank", "min_rank",
                     "max_rank", "tight", "non_tight", "inconclusive", "low_confidence"]


def aggregate(records) -> tuple[list, list]:
    """Per-setting summary rows and ``(setting, sigma, rank, count)`` histogram rows,
    in order of first appearance of each setting."""
    groups = {}
    for r in records:
        groups.setdefault(r.setting, []).append(r)
    rows, hist = [], []
    for setting, rs in groups.items():
        ok = [r for r in rs if r.ok]
        ranks = [r.rank for r in ok]
        rows.append({
            "setting": setting,
            "sigma": rs[0].sigma,
            "trials": len(rs),
            "succeeded": len(ok),
            "failed": len(rs) - len(ok),
            "avg_rank": float(np.mean(ranks)) if ranks else float("nan"),
            "min_rank": min(ranks) if ranks else 0,
            "max_rank": max(ranks) if ranks else 0,
            "tight": sum(r.verdict == Verdict.TIGHT.value for r in ok),
            "non_tight": sum(r.verdict == Verdict.NON_TIGHT.value for r in ok),
            "inconclusive": sum(r.verdict == Verdict.INCONCLUSIVE.value for r in ok),
            "low_confidence": sum(r.low_confidence for r in ok),
        })
        for k in sorted(set(ranks)):
            hist.append({"setting": setting, "sigma": rs[0].sigma, "rank": k, "count": ranks.count(k)})
    return rows, hist


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    aggregates: list = field(default_factory=list)
    histogram: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates, self.histogram = aggregate(self.records)

    @property
    def failure_rate(self) -> float:
        return sum(not r.ok for r in self.records) / max(1, len(self.records))

    def by_setting(self):
        return {row["setting"]: row for row in self.aggregates}


# ---------------------------------------------------------------------------
# instance generators (each takes a numpy Generator)


def trial_seed(master: int, setting: int, trial: int) -> int:
    state = np.random.SeedSequence(int(master), spawn_key=(int(setting), int(trial))).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def _noise_rotation(rng, sigma, p=3):
    if p == 2:
        a = rng.normal(0.0, sigma) if sigma > 0 else 0.0
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    v = rng.normal(0.0, sigma, 3) if sigma > 0 else np.zeros(3)
    return Rotation.from_rotvec(v).as_matrix()


def _random_so(rng, p):
    if p == 2:
        a = rng.uniform(-np.pi, np.pi)
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return Rotation.random(random_state=rng).as_matrix()


def rotavg_instance(rng, n=4, sigma=0.0, p=2, quat=False):
    """Complete graph on ``n`` nodes; each measured relative rotation
    ``R_i^T R_j`` is perturbed by a rotation of ``N(0, sigma^2)`` angle(s)."""
    Rs = [_random_so(rng, p) for _ in range(n)]
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            Rij = Rs[i].T @ Rs[j] @ _noise_rotation(rng, sigma, p)
            edges.append((i, j, matrix_to_quat(Rij) if quat else Rij))
    g = RelativeRotationGraph(n, edges)
    return rotavg_quat(g) if quat else rotavg_so(g, p)


def pointset_instance(rng, n=4, sigma=0.0, n_points=100, squeeze=0.01, p=3):
    """``n`` noisy views of one squeezed Gaussian cloud; noise standard
    deviation is ``sigma`` times the RMS distance of the points to their centroid."""
    Y = rng.standard_normal((p, n_points))
    Y[-1] *= squeeze
    Yc = Y - Y.mean(axis=1, keepdims=True)
    rms = float(np.sqrt(np.mean(np.sum(Yc**2, axis=0))))
    sets = []
    for _ in range(n):
        R = _random_so(rng, p)
        t = rng.standard_normal((p, 1))
        X = R.T @ (Y - t) + sigma * rms * rng.standard_normal((p, n_points))
        sets.append(X)
    return pointset_avg(sets)


def registration_instance(rng, sigma=0.0, p=3, count=10):
    """Mixed point, line and plane correspondences with Gaussian noise on the targets."""
    R, t = _random_so(rng, p), rng.standard_normal(p)
    corrs = []
    kinds = ("point", "line", "plane") if p == 3 else ("point", "line")
    for k in range(count):
        x = rng.standard_normal(p)
        y = R @ x + t + sigma * rng.standard_normal(p)
        kind = kinds[k % len(kinds)]
        d = None
        if kind != "point":
            d = rng.standard_normal(p)
            d /= np.linalg.norm(d)
            if kind == "line":
                y = y + rng.standard_normal() * d
        corrs.append(Correspondence(x, y, kind, d))
    return registration_problem(corrs)


def handeye_instance(rng, sigma=0.0, count=8, quat=False):
    """Pairs ``U_i = X V_i X^T`` with ``U_i`` perturbed by rotation noise."""
    X = _random_so(rng, 3)
    pairs = []
    for _ in range(count):
        V = _random_so(rng, 3)
        U = X @ V @ X.T @ _noise_rotation(rng, sigma)
        pairs.append((matrix_to_quat(U), matrix_to_quat(V)) if quat else (U, V))
    return handeye_quat(pairs) if quat else handeye_so3(pairs)


def _solve_record(problem, cfg, setting, sigma, trial, seed):
    rec = TrialRecord(setting, float(sigma), trial, seed)
    t0 = time.perf_counter()
    try:
        sol = solve_relaxation(problem, cfg.settings)
        if sol.optimal:
            cert = certificate_metrics(sol, problem)
            rec.min_eig_S, rec.duality_gap, rec.sos_error = (
                cert["min_eig_S"], cert["duality_gap"], cert["sos_error"])
        rep = tightness_report(problem, cfg.settings, seed=seed % 2**32, solution=sol)
    except RotSdpError as exc:
        rec.status = type(exc).__name__
        rec.solve_time = time.perf_counter() - t0
        return rec
    rec.solve_time = time.perf_counter() - t0
    rec.rank = rep.rank
    rec.margin = float(rep.margin)
    rec.lower_bound = float(rep.lower_bound)
    rec.upper_bound = float(rep.upper_bound)
    rec.rel_gap = float(rep.rel_gap)
    rec.verdict = rep.verdict.value
    rec.low_confidence = bool(rep.rank > 1 and rep.margin < cfg.margin_threshold)
    rec.flags = ";".join(rep.flags)
    return rec


# ---------------------------------------------------------------------------
# table of application/parametrization cells

# (application, parametrization, expected label, builder(rng, sigma, cfg))
TABLE2_CELLS = [
    ("registration", "SO3", "Non-tight instances found", lambda g, s, c: registration_instance(g, s, 3)),
    ("registration", "SO2", "Always tight", lambda g, s, c: registration_instance(g, s, 2)),
    ("registration", "QUAT", "Always tight", None),
    ("handeye", "SO3", "Non-tight instances found", lambda g, s, c: handeye_instance(g, s)),
    ("handeye", "SO2", "Always tight", None),
    ("handeye", "QUAT", "Always tight", lambda g, s, c: handeye_instance(g, s, quat=True)),
    ("rotavg", "SO3", "Low noise", lambda g, s, c: rotavg_instance(g, c.n_rotations, s, 3)),
    ("rotavg", "SO2", "Low noise", lambda g, s, c: rotavg_instance(g, c.n_rotations, s, 2)),
    ("rotavg", "QUAT", "Low noise", lambda g, s, c: rotavg_instance(g, c.n_rotations, s, 3, quat=True)),
    ("pointset", "SO3", "Low noise",
     lambda g, s, c: pointset_instance(g, c.n_rotations, s, c.n_points, c.squeeze, 3)),
    ("pointset", "SO2", "Low noise",
     lambda g, s, c: pointset_instance(g, c.n_rotations, s, c.n_points, c.squeeze, 2)),
    ("pointset", "QUAT", "Not applicable", None),
]


def _settings_of(cfg: ExperimentConfig):
    """``(setting label, sigma, instance builder)`` for every setting of the experiment."""
    e = cfg.experiment
    if e is Experiment.HIST_SO3:
        return [("SO3^1", 0.0, lambda g, s, c: random_problem(DomainSpec(Kind.SO3, 1), g))]
    if e is Experiment.HIST_SO3X2:
        return [("SO3^2", 0.0, lambda g, s, c: random_problem(DomainSpec(Kind.SO3, 2), g))]
    if e is Experiment.ROTAVG_SWEEP:
        return [(f"sigma={s!r}", s, lambda g, s, c: rotavg_instance(g, c.n_rotations, s, 2)) for s in cfg.sigma]
    if e is Experiment.POINTSET_SWEEP:
        return [(f"sigma={s!r}", s,
                 lambda g, s, c: pointset_instance(g, c.n_rotations, s, c.n_points, c.squeeze, 3))
                for s in cfg.sigma]
    if e is Experiment.TABLE2_PROBE:
        out = []
        for app, par, _, build in TABLE2_CELLS:
            if build is None:
                continue
            for s in cfg.sigma:
                out.append((f"{app}/{par}/sigma={s!r}", s, build))
        return out
    raise ConfigError(f"{e.value} is not a trial-based experiment")


def _run_trial(args):
    cfg, k, trial = args
    setting, sigma, build = _settings_of(cfg)[k]
    seed = trial_seed(cfg.seed, k, trial)
    rng = np.random.default_rng(seed)
    try:
        problem = build(rng, sigma, cfg)
    except RotSdpError as exc:
        return TrialRecord(setting, float(sigma), trial, seed, status=type(exc).__name__)
    return _solve_record(problem, cfg, setting, sigma, trial, seed)


def run_trials(cfg: ExperimentConfig) -> ExperimentResult:
    """All trials of all settings, gathered in (setting, trial) order."""
    t0 = time.perf_counter()
    jobs = [(cfg, k, t) for k in range(len(_settings_of(cfg))) for t in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            records = list(pool.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (8 * cfg.workers))))
    else:
        records = [_run_trial(j) for j in jobs]
    res = ExperimentResult(cfg, records, wall_time=time.perf_counter() - t0)
    if cfg.experiment is Experiment.TABLE2_PROBE:
        res.tables["tightness_matrix"] = _table2_rows(cfg, res)
    return res


def run_histogram(spec: DomainSpec, trials=1000, seed=0, **kw) -> ExperimentResult:
    spec = DomainSpec(spec.kind, spec.n)
    if spec.kind is not Kind.SO3 or spec.n not in (1, 2):
        raise ConfigError("histograms are defined for SO3^1 and SO3^2")
    exp = Experiment.HIST_SO3 if spec.n == 1 else Experiment.HIST_SO3X2
    return run_trials(default_config(exp).with_(trials=trials, seed=seed, **kw))


def run_rotavg_sweep(sigma_grid, trials=500, seed=0, n=4, **kw) -> ExperimentResult:
    cfg = default_config(Experiment.ROTAVG_SWEEP).with_(sigma=tuple(sigma_grid), trials=trials, seed=seed,
                                                        n_rotations=n, **kw)
    return run_trials(cfg)


def run_pointset_sweep(sigma_grid, trials=500, seed=0, n=4, **kw) -> ExperimentResult:
    cfg = default_config(Experiment.POINTSET_SWEEP).with_(sigma=tuple(sigma_grid), trials=trials, seed=seed,
                                                          n_rotations=n, **kw)
    return run_trials(cfg)


def _table2_rows(cfg, res):
    agg = res.by_setting()
    rows = []
    for app, par, label, build in TABLE2_CELLS:
        for s in cfg.sigma:
            row = {"application": app, "parametrization": par, "sigma": s, "expected_label": label,
                   "trials": 0, "succeeded": 0, "tight_fraction": float("nan"), "max_rank": 0}
            if build is not None:
                a = agg[f"{app}/{par}/sigma={s!r}"]
                row.update(trials=a["trials"], succeeded=a["succeeded"], max_rank=a["max_rank"],
                           tight_fraction=a["tight"] / a["succeeded"] if a["succeeded"] else float("nan"))
            rows.append(row)
    return rows


def run_table2_probe(seed=0, trials=100, sigma=(0.01, 1.0), **kw) -> ExperimentResult:
    """Tightness frequency per (application, parametrization) cell; cells
    without a builder are listed with zero trials."""
    cfg = default_config(Experiment.TABLE2_PROBE).with_(seed=seed, trials=trials, sigma=tuple(sigma), **kw)
    return run_trials(cfg)


def run_counterexamples(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """``trials`` master seeds ``seed, seed+1, ...`` of the counterexample
    pipeline; each emitted bundle is re-verified with a different seed."""
    from .counterexamples import AssemblyFailed, generate_counterexample, verify_bundle

    t0 = time.perf_counter()
    records, bundles = [], {}
    for t in range(cfg.trials):
        s = cfg.seed + t
        rec = TrialRecord(cfg.structure, 0.0, t, s)
        t1 = time.perf_counter()
        try:
            b = generate_counterexample(cfg.structure, s, settings=cfg.settings)
            rep, _, gap = verify_bundle(b, seed=s + 1, settings=cfg.settings)
        except (AssemblyFailed, RotSdpError) as exc:
            rec.status = type(exc).__name__
            rec.solve_time = time.perf_counter() - t1
            records.append(rec)
            continue
        rec.solve_time = time.perf_counter() - t1
        rec.rank, rec.margin = rep.rank, float(rep.margin)
        rec.lower_bound, rec.upper_bound = float(rep.lower_bound), float(rep.upper_bound)
        rec.rel_gap, rec.verdict = float(gap), rep.verdict.value
        rec.low_confidence = bool(rep.margin < cfg.margin_threshold)
        records.append(rec)
        bundles[f"bundle_{cfg.structure}_{s}.json"] = b
    res = ExperimentResult(cfg, records, wall_time=time.perf_counter() - t0)
    res.artifacts["bundles"] = bundles
    return res


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    if cfg.experiment is Experiment.COUNTEREXAMPLE_RUN:
        return run_counterexamples(cfg)
    return run_trials(cfg)


# ---------------------------------------------------------------------------
# output


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) if isinstance(r, dict) else r[i] for i, c in enumerate(columns)])
    return buf.getvalue()


def _plot(result: ExperimentResult, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "rotsdp"
    cfg = result.config
    fig, ax = plt.subplots(figsize=(6, 3.2))
    e = cfg.experiment
    if e in (Experiment.ROTAVG_SWEEP, Experiment.POINTSET_SWEEP):
        xs = [a["sigma"] for a in result.aggregates]
        ys = [a["avg_rank"] for a in result.aggregates]
        ax.plot(xs, ys, color="tab:blue", linewidth=2)
        ax.set_xlabel("sigma (radians)" if e is Experiment.ROTAVG_SWEEP else "sigma (relative to signal)")
        ax.set_ylabel("Avg. rank")
        ax.set_xlim(min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1)
    elif e is Experiment.TABLE2_PROBE:
        rows = [r for r in result.tables.get("tightness_matrix", []) if r["trials"]]
        labels = [f"{r['application']}\n{r['parametrization']}\n{r['sigma']:g}" for r in rows]
        ax.bar(range(len(rows)), [r["tight_fraction"] for r in rows], color="tab:green")
        ax.set_xticks(range(len(rows)), labels, fontsize=5)
        ax.set_ylabel("Tight fraction")
        ax.set_ylim(0, 1.05)
    else:
        counts = {}
        for h in result.histogram:
            counts[h["rank"]] = counts.get(h["rank"], 0) + h["count"]
        ks = sorted(counts)
        ax.bar(ks, [counts[k] for k in ks], color="tab:blue")
        top = max(ks) if ks else 1
        ax.set_xticks(range(1, max(top, 1) + 1))
        ax.set_xlabel("Rank")
        ax.set_ylabel("Count")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_outputs(result: ExperimentResult, out_dir) -> dict:
    """Write records, aggregates, histogram, timings, plot and manifest to
    ``out_dir``.  Everything except ``timings.csv`` and ``manifest.json`` is a
    deterministic function of the config."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = {}

    def write(name, text):
        p = out / name
        p.write_text(text)
        files[name] = p

    write("records.csv", _csv_text(RECORD_COLUMNS, [r.row() for r in result.records]))
    write("aggregates.csv", _csv_text(AGGREGATE_COLUMNS, result.aggregates))
    write("histogram.csv", _csv_text(["setting", "sigma", "rank", "count"], result.histogram))
    write("timings.csv", _csv_text(["setting", "trial", "solve_time"],
                                   [[r.setting, str(r.trial), repr(r.solve_time)] for r in result.records]))
    for name, rows in result.tables.items():
        if rows:
            write(f"{name}.csv", _csv_text(list(rows[0]), rows))
    write("config.txt", result.config.to_text())
    for name, bundle in result.artifacts.get("bundles", {}).items():
        write(name, bundle.to_json(indent=1))
    plot = out / "plot.svg"
    _plot(result, plot)
    files["plot.svg"] = plot
    digests = {n: hashlib.sha256(p.read_bytes()).hexdigest() for n, p in sorted(files.items())
               if n not in ("timings.csv",)}
    manifest = {
        "config": result.config.to_dict(),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time_s": result.wall_time,
        "records": len(result.records),
        "failures": sum(not r.ok for r in result.records),
        "sha256": digests,
    }
    write("manifest.json", json.dumps(manifest, indent=2) + "\n")
    return files


def load_result(out_dir) -> ExperimentResult:
    """Read back an emitted run; aggregates are recomputed from the records
    and checked against the stored aggregate file."""
    out = Path(out_dir)
    cfg = ExperimentConfig.from_text((out / "config.txt").read_text())
    with open(out / "records.csv", newline="") as fh:
        records = [TrialRecord.from_row(r) for r in csv.DictReader(fh)]
    res = ExperimentResult(cfg, records)
    stored = (out / "aggregates.csv").read_text()
    if stored != _csv_text(AGGREGATE_COLUMNS, res.aggregates):
        raise ValueError("stored aggregates do not match the records")
    return res


__all__ = [
    "Experiment",
    "ExperimentConfig",
    "ExperimentResult",
    "TrialRecord",
    "aggregate",
    "default_config",
    "trial_seed",
    "rotavg_instance",
    "pointset_instance",
    "registration_instance",
    "handeye_instance",
    "run_histogram",
    "run_rotavg_sweep",
    "run_pointset_sweep",
    "run_table2_probe",
    "run_counterexamples",
    "run_experiment",
    "run_trials",
    "emit_outputs",
    "load_result",
    "TABLE2_CELLS",
]
