import json
import subprocess
import sys

import numpy as np
import pytest

from rotsdp.cli import main
from rotsdp.problem import StandardFormProblem


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def rot(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


@pytest.fixture
def inputs(tmp_path):
    rng = np.random.default_rng(0)
    d = lambda: (lambda v: (v / np.linalg.norm(v)).tolist())(rng.standard_normal(3))  # noqa: E731
    q = lambda: (lambda v: (v / np.linalg.norm(v)).tolist())(rng.standard_normal(4))  # noqa: E731
    return {
        "registration": write(tmp_path / "reg.json", {"correspondences": [
            {"x": rng.standard_normal(3).tolist(), "y": rng.standard_normal(3).tolist(), "kind": "line",
             "direction": d()} for _ in range(6)]}),
        "resectioning": write(tmp_path / "res.json", {"rays": [
            {"direction": d(), "point": rng.standard_normal(3).tolist()} for _ in range(6)]}),
        "handeye-so3": write(tmp_path / "he.json", {"pairs": [[rot(rng).tolist(), rot(rng).tolist()]
                                                              for _ in range(4)]}),
        "handeye-quat": write(tmp_path / "heq.json", {"pairs": [[q(), q()] for _ in range(4)]}),
        "rotavg-so": write(tmp_path / "ra.json", {"n": 3, "edges": [[0, 1, rot(rng).tolist()],
                                                                   [1, 2, rot(rng).tolist()]]}),
        "rotavg-quat": write(tmp_path / "raq.json", {"n": 3, "edges": [[0, 1, q()], [0, 2, q()]]}),
        "pointset": write(tmp_path / "ps.json", {"point_sets": [rng.standard_normal((3, 5)).tolist()
                                                               for _ in range(2)]}),
    }


@pytest.mark.parametrize("app", ["registration", "resectioning", "handeye-so3", "handeye-quat", "rotavg-so",
                                 "rotavg-quat", "pointset"])
def test_gen_then_analyze(app, inputs, tmp_path):
    prob_path = tmp_path / "p.json"
    assert main(["gen", app, "--input", inputs[app], "--out", str(prob_path)]) == 0
    prob = StandardFormProblem.from_json(prob_path.read_text())
    out = tmp_path / "a.json"
    assert main(["analyze", str(prob_path), "--out", str(out), "--spectrum", str(tmp_path / "s.csv")]) == 0
    rep = json.loads(out.read_text())
    assert rep["verdict"] in ("Tight", "NonTight", "Inconclusive")
    assert rep["application_cost"] == pytest.approx(prob.cost_scale * rep["upper_bound"] + prob.cost_offset)
    assert (tmp_path / "s.csv").read_text().startswith("index,eigenvalue")


def test_solve_and_oracle(tmp_path):
    p = tmp_path / "p.json"
    assert main(["gen", "random", "--kind", "SO2", "--n", "2", "--seed", "4", "--out", str(p)]) == 0
    assert main(["solve", str(p), "--out", str(tmp_path / "s.json")]) == 0
    sol = json.loads((tmp_path / "s.json").read_text())
    assert sol["solution"]["status"] == "Optimal"
    assert sol["certificate"]["min_eig_S"] >= -1e-7
    assert main(["analyze", str(p), "--oracle", "--out", str(tmp_path / "a.json")]) == 0
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["lower_bound"] <= rep["oracle_value"] + 1e-8


def test_exit_codes(tmp_path, inputs):
    p = tmp_path / "p.json"
    main(["gen", "random", "--kind", "SO3", "--n", "2", "--out", str(p)])
    assert main(["solve", str(p), "--max-iter", "1", "--out", str(tmp_path / "s.json")]) == 3
    assert main(["solve", str(tmp_path / "missing.json")]) == 2
    assert main(["solve", str(p), "--gap-tol", "0"]) == 2
    assert main(["gen", "nonsense"]) == 2
    assert main(["gen", "registration"]) == 2  # needs --input
    bad = write(tmp_path / "bad.json", {"correspondences": [{"x": [0, 0, 0]}]})
    assert main(["gen", "registration", "--input", bad]) == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["solve", str(tmp_path / "junk.json")]) == 2
    assert main([]) == 2


def test_experiment_with_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("experiment = rotavg-sweep\ntrials = 3\nsigma = 0, 0.4\n")
    out = tmp_path / "run"
    assert main(["experiment", "rotavg-sweep", "--config", str(cfg), "--seed", "2", "--out", str(out)]) == 0
    for name in ["records.csv", "aggregates.csv", "histogram.csv", "plot.svg", "manifest.json", "config.txt"]:
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["records"] == 6 and manifest["config"]["seed"] == 2
    cfg.write_text("experiment = pointset-sweep\n")
    assert main(["experiment", "rotavg-sweep", "--config", str(cfg), "--out", str(out)]) == 2
    cfg.write_text("experiment = rotavg-sweep\nbogus = 1\n")
    assert main(["experiment", "rotavg-sweep", "--config", str(cfg), "--out", str(out)]) == 2
    assert main(["experiment", "no-such-experiment", "--out", str(out)]) == 2


def test_counterexample_command(tmp_path):
    out = tmp_path / "b.json"
    assert main(["counterexample", "--structure", "generic", "--seed", "0", "--out", str(out)]) == 0
    b = json.loads(out.read_text())
    assert b["verification"]["verdict"] == "NonTight" and b["verification"]["rank"] == 6


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "rotsdp", "gen", "random", "--kind", "QUAT"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert StandardFormProblem.from_json(res.stdout).spec.kind.value == "QUAT"
