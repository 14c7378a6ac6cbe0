import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotsdp.builders import random_problem
from rotsdp.domains import DomainSpec, Kind, embed, random_rotation
from rotsdp.sdp import (
    SolverSettings,
    Status,
    certificate_matrix,
    certificate_metrics,
    reduce_constraints,
    solve_relaxation,
    solve_sdp,
    sos_certificate,
)


def random_sym(rng, n):
    A = rng.standard_normal((n, n))
    return (A + A.T) / 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_trace_constrained_minimum_is_smallest_eigenvalue(seed, n):
    C = random_sym(np.random.default_rng(seed), n)
    res = solve_sdp(C, np.eye(n)[None], np.array([1.0]))
    assert res.status is Status.OPTIMAL
    lam = np.linalg.eigvalsh(C)[0]
    assert res.primal_obj == pytest.approx(lam, abs=1e-7)
    assert res.dual_obj == pytest.approx(lam, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kkt_conditions_on_random_feasible_programs(seed):
    rng = np.random.default_rng(seed)
    n, m = 6, 4
    A = np.array([random_sym(rng, n) for _ in range(m)] + [np.eye(n)])
    X0 = rng.standard_normal((n, n))
    X0 = X0 @ X0.T
    X0 /= np.trace(X0)
    b = np.einsum("kij,ij->k", A, X0)  # strictly feasible by construction
    C = random_sym(rng, n)
    res = solve_sdp(C, A, b)
    assert res.status is Status.OPTIMAL
    assert np.abs(np.einsum("kij,ij->k", A, res.X) - b).max() < 1e-7
    np.testing.assert_allclose(res.Z, C - np.tensordot(res.y, A, axes=1), atol=1e-7)
    assert np.linalg.eigvalsh(res.X)[0] > -1e-9 and np.linalg.eigvalsh(res.Z)[0] > -1e-9
    assert np.sum(res.X * res.Z) < 1e-6
    assert res.primal_obj >= res.dual_obj - 1e-7


def test_duplicate_constraints_are_removed():
    A = np.array([np.eye(3), np.eye(3), np.diag([1.0, 0, 0])])
    red = reduce_constraints(A, np.array([1.0, 1.0, 0.2]))
    assert len(red.keep) == 2
    C = random_sym(np.random.default_rng(0), 3)
    a = solve_sdp(C, A[[0, 2]], np.array([1.0, 0.2]))
    b = solve_sdp(C, A, np.array([1.0, 1.0, 0.2]))
    assert a.primal_obj == pytest.approx(b.primal_obj, abs=1e-8)
    assert np.count_nonzero(b.y) == 2


def test_inconsistent_constraints_are_rejected():
    A = np.array([np.eye(3), np.eye(3)])
    with pytest.raises(ValueError):
        solve_sdp(np.eye(3), A, np.array([1.0, 2.0]))


def test_objective_scaling_is_equivariant():
    C = random_sym(np.random.default_rng(1), 5)
    a = solve_sdp(C, np.eye(5)[None], np.array([1.0]))
    b = solve_sdp(1e4 * C, np.eye(5)[None], np.array([1.0]))
    assert b.primal_obj == pytest.approx(1e4 * a.primal_obj, rel=1e-7)


def test_iteration_cap_is_reported():
    prob = random_problem(DomainSpec(Kind.SO3, 2), seed=0)
    sol = solve_relaxation(prob, SolverSettings(max_iter=2))
    assert sol.status is Status.MAX_ITER and not sol.optimal


def so2_grid_minimum(prob):
    t = np.linspace(-np.pi, np.pi, 200_001)
    r = np.stack([np.cos(t), np.sin(t), np.ones_like(t)])
    return np.einsum("it,ij,jt->t", r, prob.M, r).min()


@pytest.mark.parametrize("seed", range(10))
def test_so2_relaxation_is_exact(seed):
    prob = random_problem(DomainSpec(Kind.SO2, 1), seed=seed)
    sol = solve_relaxation(prob)
    assert sol.optimal
    assert sol.gamma == pytest.approx(so2_grid_minimum(prob), abs=1e-7)


@pytest.mark.parametrize("spec", [DomainSpec(Kind.SO3, 1), DomainSpec(Kind.QUAT, 2), DomainSpec(Kind.SO2, 2)],
                         ids=str)
def test_sos_certificate_identity_on_the_domain(spec):
    prob = random_problem(spec, seed=3)
    sol = solve_relaxation(prob)
    vecs = sos_certificate(sol, prob)
    rng = np.random.default_rng(4)
    for _ in range(20):
        r = embed(random_rotation(spec, rng), spec)
        lhs = prob.objective(r) - sol.gamma
        assert lhs == pytest.approx(sum(float(a @ r) ** 2 for a in vecs), abs=1e-8)
        assert lhs >= -1e-8  # gamma is a valid lower bound


def test_certificate_metrics_meet_thresholds():
    for spec in (DomainSpec(Kind.SO3, 1), DomainSpec(Kind.SO3, 2)):
        for seed in range(5):
            prob = random_problem(spec, seed=seed)
            sol = solve_relaxation(prob)
            m = certificate_metrics(sol, prob)
            assert m["min_eig_S"] >= -1e-7
            assert m["duality_gap"] <= 1e-7
            assert m["sos_error"] <= 1e-8
            np.testing.assert_allclose(certificate_matrix(prob, sol.gamma, sol.lam), sol.S, atol=1e-12)


def test_solution_serializes():
    sol = solve_relaxation(random_problem(DomainSpec(Kind.QUAT, 1), seed=0))
    d = sol.to_dict()
    assert d["status"] == "Optimal"
    assert np.asarray(d["X"]).shape == (5, 5)
