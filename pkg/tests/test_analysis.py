import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotsdp.analysis import (
    _fallback_rounding,
    RankPolicy,
    Verdict,
    classify,
    extract_solution,
    is_extreme_point,
    numerical_rank,
    oracle_minimize,
    refine_to_extreme_point,
    tightness_report,
)
from rotsdp.builders import random_problem
from rotsdp.domains import DomainSpec, Kind, embed, feasibility_residual, random_rotation
from rotsdp.errors import NotPSD, RoundingDegenerate
from rotsdp.experiments import rotavg_instance
from rotsdp.problem import StandardFormProblem
from rotsdp.sdp import solve_relaxation


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_rank_of_planted_spectrum(seed, k):
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.standard_normal((12, 12)))[0]
    lam = np.concatenate([rng.uniform(0.1, 1.0, k), rng.uniform(0, 1e-10, 12 - k)])
    info = numerical_rank(Q @ np.diag(lam) @ Q.T)
    assert info.rank == k
    assert info.margin >= 10


def test_rank_rejects_indefinite_matrices():
    with pytest.raises(NotPSD):
        numerical_rank(np.diag([1.0, -0.1]))
    assert numerical_rank(np.zeros((3, 3))).rank == 0


def test_rank_policy_floor_hides_tiny_eigenvalues():
    X = np.diag([1.0, 1e-3, 1e-9, 0.0])
    assert numerical_rank(X).rank == 2
    assert numerical_rank(X, RankPolicy(floor=1e-2)).rank == 1


@pytest.mark.parametrize("rank,gap,expected", [
    (1, 1e-9, Verdict.TIGHT),
    (1, 1e-3, Verdict.INCONCLUSIVE),
    (6, 1e-3, Verdict.NON_TIGHT),
    (2, 1e-7, Verdict.INCONCLUSIVE),
])
def test_classification(rank, gap, expected):
    assert classify(rank, gap) is expected


def test_rounding_without_homogenizing_coordinate():
    """X = blkdiag(2 r r^T, 1): the leading eigenvector and the first-moment
    column carry no usable direction, so the fallback must project r itself."""
    spec = DomainSpec(Kind.SO3, 1)
    r = embed(random_rotation(spec, np.random.default_rng(5)), spec)[:-1]
    X = np.zeros((10, 10))
    X[:9, :9] = 2 * np.outer(r, r)
    X[9, 9] = 1.0
    lifted = np.append(r, 0.0)
    prob = StandardFormProblem(-np.outer(lifted, lifted), spec)  # minimized at r, value -9
    with pytest.raises(RoundingDegenerate):
        extract_solution(X, prob)
    els, value = _fallback_rounding(X, prob, 1)
    np.testing.assert_allclose(embed(els, spec)[:-1], r, atol=1e-12)
    assert value == pytest.approx(-9.0)


def test_rank_one_feasible_point_is_extreme_and_mixture_is_not():
    spec = DomainSpec(Kind.SO3, 1)
    rng = np.random.default_rng(0)
    r1, r2 = (embed(random_rotation(spec, rng), spec) for _ in range(2))
    assert is_extreme_point(np.outer(r1, r1), spec)
    assert not is_extreme_point(0.5 * (np.outer(r1, r1) + np.outer(r2, r2)), spec)


def test_extraction_recovers_rank_one_solution():
    spec = DomainSpec(Kind.QUAT, 2)
    els = random_rotation(spec, np.random.default_rng(1))
    r = embed(els, spec)
    prob = random_problem(spec, seed=0)
    out, value = extract_solution(np.outer(r, r), prob)
    for a, b in zip(out, els):
        assert min(np.linalg.norm(a.coords - b.coords), np.linalg.norm(a.coords + b.coords)) < 1e-9
    assert value == pytest.approx(prob.objective(r))


@pytest.mark.parametrize("seed", range(5))
def test_tight_report_matches_oracle(seed):
    prob = random_problem(DomainSpec(Kind.SO3, 1), seed=seed)
    rep = tightness_report(prob, seed=seed)
    assert rep.verdict is Verdict.TIGHT and rep.rank == 1
    assert feasibility_residual(embed(rep.rounded_solution, prob.spec), prob.spec) < 1e-9
    val, _ = oracle_minimize(prob, seed=seed)
    assert rep.upper_bound == pytest.approx(val, abs=1e-6)
    assert rep.lower_bound <= val + 1e-8


def test_non_tight_two_copy_circle_has_rank_two():
    spec = DomainSpec(Kind.SO2, 2)
    found = 0
    for seed in range(60):
        prob = random_problem(spec, seed=seed)
        rep = tightness_report(prob, seed=seed)
        if rep.verdict is Verdict.NON_TIGHT:
            found += 1
            assert rep.rank == 2 and rep.margin >= 10
            val, _ = oracle_minimize(prob)
            assert rep.lower_bound < val - 1e-6  # a genuine gap, seen by the oracle
    assert found > 0


def test_refinement_reaches_rank_one_on_gauge_invariant_problem():
    prob = rotavg_instance(np.random.default_rng(3), n=4, sigma=0.0, p=3)
    sol = solve_relaxation(prob)
    assert numerical_rank(sol.X).rank > 1  # interior point solvers return the orbit average
    ref = refine_to_extreme_point(prob, sol, seed=0)
    assert numerical_rank(ref.X).rank == 1
    assert np.sum(prob.M * ref.X) == pytest.approx(sol.primal_obj, abs=1e-6)


def test_so2_oracle_matches_grid():
    prob = random_problem(DomainSpec(Kind.SO2, 1), seed=7)
    t = np.linspace(-np.pi, np.pi, 400_001)
    r = np.stack([np.cos(t), np.sin(t), np.ones_like(t)])
    grid = np.einsum("it,ij,jt->t", r, prob.M, r).min()
    val, els = oracle_minimize(prob)
    assert val == pytest.approx(grid, abs=1e-8)
    assert prob.evaluate(els) == pytest.approx(val)


def test_report_serializes():
    rep = tightness_report(random_problem(DomainSpec(Kind.SO3, 1), seed=0))
    d = rep.to_dict(include_solution=True)
    assert d["verdict"] == "Tight" and "solution" in d
    assert rep.spectrum_csv().startswith("index,eigenvalue\n")
