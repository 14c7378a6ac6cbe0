"""Rank and tightness analysis of relaxation solutions, plus brute-force oracles."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._linalg import svec, sym
from .domains import (
    DomainSpec,
    Kind,
    constraint_matrices,
    embed,
    feasibility_residual,
    homogenizer,
    project_to_variety,
    vec_quadratics,
)
from .errors import DegenerateInput, NotPSD, OracleUnavailable, RoundingDegenerate, SolverFailure
from .problem import GAUGE_INVARIANT, StandardFormProblem
from .sdp import SdpSolution, SolverSettings, solve_relaxation, solve_sdp


class Verdict(str, enum.Enum):
    TIGHT = "Tight"
    NON_TIGHT = "NonTight"
    INCONCLUSIVE = "Inconclusive"


TIGHT_GAP = 1e-6
NON_TIGHT_GAP = 1e-5


@dataclass(frozen=True)
class RankPolicy:
    """Rank = position of the largest gap in the log-spectrum among
    eigenvalues above ``floor * lambda_max``."""

    floor: float = 1e-7
    psd_tol: float = 1e-9


@dataclass
class RankInfo:
    rank: int
    spectrum: np.ndarray
    margin: float


def numerical_rank(X, policy: RankPolicy = RankPolicy()) -> RankInfo:
    w = np.linalg.eigvalsh(sym(np.asarray(X, dtype=float)))[::-1]
    top = w[0] if w.size else 0.0
    if w.size and w[-1] < -policy.psd_tol * max(1.0, top):
        raise NotPSD(f"matrix has eigenvalue {w[-1]:.3e}")
    if top <= 0:
        return RankInfo(0, w, np.inf)
    cutoff = policy.floor * top
    # eigenvalues under the floor count as the floor itself; the trailing
    # sentinel makes full rank expressible
    tail = w.clip(min=cutoff)
    logs = np.log(np.append(tail, cutoff))
    gaps = logs[:-1] - logs[1:]
    allowed = w >= cutoff
    gaps = np.where(allowed, gaps, -np.inf)
    k = int(np.argmax(gaps))
    return RankInfo(k + 1, w, float(np.exp(gaps[k])))


def _round_candidate(v, problem):
    spec = problem.spec
    if abs(v[-1]) < 1e-8 * np.linalg.norm(v):
        return None
    v = v / v[-1]
    try:
        els = project_to_variety(v[:-1], spec)
    except Exception:
        return None
    return els, problem.evaluate(els)


def extract_solution(X, problem: StandardFormProblem):
    """Round a relaxation solution to a feasible point.

    The leading eigenvector (scaled to unit homogenizing coordinate) is
    projected onto the domain; the last column of ``X`` is tried as well and
    the cheaper rounding is kept.  Always returns a feasible upper bound.
    """
    X = sym(np.asarray(X, dtype=float))
    w, V = np.linalg.eigh(X)
    cands = []
    lead = _round_candidate(V[:, -1], problem)
    if lead is not None:
        cands.append(lead)
    col = _round_candidate(X[:, -1], problem)
    if col is not None:
        cands.append(col)
    if not cands:
        raise RoundingDegenerate("no rounding candidate has a usable homogenizing coordinate")
    return min(cands, key=lambda c: c[1])


def _fallback_rounding(X, problem, k):
    # leading eigenvector has no homogenizing coordinate: project the top
    # eigenvectors with either sign and keep the cheapest feasible point
    V = np.linalg.eigh(sym(np.asarray(X, dtype=float)))[1][:, -k:]
    cands = []
    for v in V.T:
        for s in (1.0, -1.0):
            try:
                els = project_to_variety(s * v[:-1], problem.spec)
            except DegenerateInput:
                continue
            cands.append((els, problem.evaluate(els)))
    if not cands:
        raise RoundingDegenerate("no eigenvector of the solution can be projected onto the domain")
    return min(cands, key=lambda c: c[1])


def is_extreme_point(X, spec: DomainSpec, rank: int | None = None, tol=1e-6) -> bool:
    """A feasible ``X`` of rank k with range ``V`` is extreme iff the
    constraint maps ``Y -> tr(V^T A_i V Y)`` are injective on k x k symmetric Y."""
    if rank is None:
        rank = numerical_rank(X).rank
    if rank <= 1:
        return True
    V = np.linalg.eigh(sym(X))[1][:, -rank:]
    mats = _face_constraints(V, spec)
    s = np.linalg.svd(svec(mats), compute_uv=False)
    return int(np.sum(s > tol * s[0])) == rank * (rank + 1) // 2


def _face_constraints(V, spec):
    e = homogenizer(spec)
    A = np.concatenate([constraint_matrices(spec), np.outer(e, e)[None]])
    return np.einsum("ai,kab,bj->kij", V, A, V)


def _compress(A, b, tol):
    """Replace the constraints by an orthonormal basis of their dominant span.

    Projected constraints inherit the inaccuracy of the iterate, so
    combinations that vanish in exact arithmetic survive at the 1e-8 level and
    would pin the face to a slightly inconsistent subspace.
    """
    U, s, _ = np.linalg.svd(svec(A), full_matrices=False)
    k = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    P = U[:, :k].T / s[:k, None]
    return np.tensordot(P, A, axes=1), P @ b


def refine_to_extreme_point(problem, solution: SdpSolution, settings=None, seed=0, tries=3,
                            policy: RankPolicy = RankPolicy(), face_tol=1e-6) -> SdpSolution:
    """Move from a point of the optimal face to an extreme point of it.

    The interior-point iterate lies in the relative interior of the optimal
    face, so that face is ``{V Y V^T feasible}`` with ``V`` spanning the range
    of ``X``.  If this already pins ``X`` down it is returned; otherwise a
    random linear objective is minimized over the face ``tries`` times and the
    lowest-rank result is kept.
    """
    rk = numerical_rank(solution.X, policy).rank
    if rk <= 1 or is_extreme_point(solution.X, problem.spec, rk):
        return solution
    V = np.linalg.eigh(sym(solution.X))[1][:, -rk:]
    A = _face_constraints(V, problem.spec)
    b = np.zeros(A.shape[0])
    b[-1] = 1.0
    A, b = _compress(A, b, tol=face_tol)
    rng = np.random.default_rng(seed)
    best = None
    N = problem.spec.lifted_dim
    for _ in range(tries):
        G = rng.standard_normal((N, N))
        W = V.T @ (G @ G.T) @ V
        out = solve_sdp(W, A, b, settings)
        if out.status.value != "Optimal":
            continue
        X = sym(V @ out.X @ V.T)
        obj = float(np.sum(problem.M * X))
        if abs(obj - solution.primal_obj) > 1e-6 * max(1.0, abs(solution.primal_obj)):
            continue
        r = numerical_rank(X, policy).rank
        if best is None or r < best[0]:
            best = (r, X, obj)
    if best is None:
        out = SdpSolution(**{**solution.__dict__, "flags": solution.flags + ["refine_failed"]})
        return out
    _, X, obj = best
    return SdpSolution(
        X=X,
        gamma=solution.gamma,
        lam=solution.lam,
        S=solution.S,
        primal_obj=obj,
        dual_obj=solution.dual_obj,
        status=solution.status,
        iterations=solution.iterations,
        residuals=solution.residuals,
        flags=solution.flags + ["refined"],
    )


# ---------------------------------------------------------------------------
# oracles


def _so2_lift(angles, gauge):
    """Lifted vectors for a batch of angle tuples (shape (B, f))."""
    B = angles.shape[0]
    if gauge:
        angles = np.hstack([np.zeros((B, 1)), angles])
    cs = np.stack([np.cos(angles), np.sin(angles)], axis=-1).reshape(B, -1)
    return np.hstack([cs, np.ones((B, 1))])


def _quad_batch(M, R):
    return np.einsum("bi,ij,bj->b", R, M, R)


def _oracle_so2(problem, gauge, max_grid=2_000_000, polish=20):
    n = problem.spec.n
    f = n - 1 if gauge else n
    if f == 0:
        r = _so2_lift(np.zeros((1, 0)), gauge)[0]
        return float(problem.objective(r)), r
    steps = 360
    while steps ** f > max_grid:
        steps //= 2
    grid1 = np.linspace(-np.pi, np.pi, steps, endpoint=False)
    M = problem.M
    vals, pts = [], []
    if f == 1:
        A = grid1[:, None]
        v = _quad_batch(M, _so2_lift(A, gauge))
        vals.append(v)
        pts.append(A)
    else:
        rest = np.array(list(itertools.product(grid1, repeat=f - 1)))
        for a0 in grid1:
            A = np.hstack([np.full((rest.shape[0], 1), a0), rest])
            v = _quad_batch(M, _so2_lift(A, gauge))
            idx = np.argsort(v)[:polish]
            vals.append(v[idx])
            pts.append(A[idx])
    vals = np.concatenate(vals)
    pts = np.vstack(pts)
    order = np.argsort(vals)[:polish]

    def fun(a):
        r = _so2_lift(a[None], gauge)[0]
        return r @ M @ r

    def jac(a):
        r = _so2_lift(a[None], gauge)[0]
        g = 2 * M @ r
        off = 1 if gauge else 0
        out = np.empty(f)
        for k in range(f):
            c, s = np.cos(a[k]), np.sin(a[k])
            i = 2 * (k + off)
            out[k] = -s * g[i] + c * g[i + 1]
        return out

    best = (np.inf, None)
    for i in order:
        res = minimize(fun, pts[i], jac=jac, method="BFGS", options={"gtol": 1e-11, "maxiter": 500})
        if res.fun < best[0]:
            best = (float(res.fun), res.x)
    r = _so2_lift(best[1][None], gauge)[0]
    return best[0], r


def _blocks_from_quats(Q, kind, gauge):
    """Per-copy coordinates (B, n*block) for batches of quaternions (B, f, 4)."""
    B = Q.shape[0]
    if kind is Kind.QUAT:
        blocks = Q
        if gauge:
            blocks = np.concatenate([np.tile([1.0, 0, 0, 0], (B, 1, 1)), blocks], axis=1)
        return blocks.reshape(B, -1)
    H = vec_quadratics()
    blocks = np.einsum("kxy,bfx,bfy->bfk", H, Q, Q)
    if gauge:
        ident = np.eye(3).reshape(-1, order="F")
        blocks = np.concatenate([np.tile(ident, (B, 1, 1)), blocks], axis=1)
    return blocks.reshape(B, -1)


def _oracle_quat_param(problem, gauge, starts, iters, seed, polish=10):
    spec = problem.spec
    f = spec.n - 1 if gauge else spec.n
    M = problem.M
    kind = spec.kind
    H = vec_quadratics()
    if f == 0:
        r = np.append(_blocks_from_quats(np.zeros((1, 0, 4)), kind, gauge)[0], 1.0)
        return float(r @ M @ r), r
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((starts, f, 4))
    Q /= np.linalg.norm(Q, axis=-1, keepdims=True)
    off = 1 if gauge else 0
    bs = spec.block

    def value_grad(Q):
        B = Q.shape[0]
        r = np.hstack([_blocks_from_quats(Q, kind, gauge), np.ones((B, 1))])
        Mr = r @ M
        val = np.einsum("bi,bi->b", r, Mr)
        g = 2 * Mr[:, :-1].reshape(B, spec.n, bs)[:, off:, :]
        if kind is Kind.QUAT:
            gq = g
        else:
            gq = 2 * np.einsum("bfk,kxy,bfy->bfx", g, H, Q)
        gq = gq - np.sum(gq * Q, axis=-1, keepdims=True) * Q
        return val, gq

    step = np.full(starts, 0.1 / max(1.0, np.abs(M).max()))
    val, g = value_grad(Q)
    for _ in range(iters):
        Qn = Q - step[:, None, None] * g
        Qn /= np.linalg.norm(Qn, axis=-1, keepdims=True)
        vn, gn = value_grad(Qn)
        ok = vn <= val
        Q = np.where(ok[:, None, None], Qn, Q)
        val = np.where(ok, vn, val)
        g = np.where(ok[:, None, None], gn, g)
        step = np.where(ok, step * 1.2, step * 0.5)

    def fun(x):
        q = x.reshape(1, f, 4)
        q = q / np.linalg.norm(q, axis=-1, keepdims=True)
        v, _ = value_grad(q)
        return float(v[0])

    order = np.argsort(val)[:polish]
    best = (np.inf, None)
    for i in order:
        res = minimize(fun, Q[i].ravel(), method="BFGS", options={"gtol": 1e-12, "maxiter": 2000})
        if res.fun < best[0]:
            best = (float(res.fun), res.x)
        if val[i] < best[0]:
            best = (float(val[i]), Q[i].ravel())
    q = best[1].reshape(1, f, 4)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    r = np.append(_blocks_from_quats(q, kind, gauge)[0], 1.0)
    return float(r @ M @ r), r


def oracle_minimize(problem: StandardFormProblem, seed=0, starts=2000, iters=300):
    """Global minimum of ``r^T M r`` over the domain by exhaustive search.

    SO2: angle grid (1 degree where the grid has at most 2e6 points, coarser
    otherwise) plus local refinement of the best cells.  SO3 / QUAT:
    multistart projected gradient descent in quaternion coordinates with
    quasi-Newton polishing; probabilistic, not a certificate.  Averaging
    objectives are gauge-fixed by pinning the first rotation to the identity.
    Returns ``(value, elements)``.
    """
    spec = problem.spec
    gauge = problem.provenance in GAUGE_INVARIANT
    free = spec.n - (1 if gauge else 0)
    if spec.kind is Kind.SO2:
        if spec.n > 4:
            raise OracleUnavailable(f"no oracle for {spec}")
        val, r = _oracle_so2(problem, gauge)
    else:
        if free > 2:
            raise OracleUnavailable(f"no oracle for {spec}")
        val, r = _oracle_quat_param(problem, gauge, starts, iters, seed)
    els = project_to_variety(r[:-1], spec)
    return float(problem.evaluate(els)), els


# ---------------------------------------------------------------------------
# reports


@dataclass
class TightnessReport:
    rank: int
    eigen_spectrum: np.ndarray
    margin: float
    lower_bound: float
    upper_bound: float
    rel_gap: float
    verdict: Verdict
    rounded_solution: list
    solution: SdpSolution | None = None
    flags: list = field(default_factory=list)

    def to_dict(self, include_solution=False):
        d = {
            "rank": self.rank,
            "eigen_spectrum": [float(v) for v in self.eigen_spectrum],
            "margin": float(self.margin),
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "rel_gap": self.rel_gap,
            "verdict": self.verdict.value,
            "rounded_solution": [
                {"kind": el.kind.value, "coords": el.coords.tolist()} for el in self.rounded_solution
            ],
            "flags": list(self.flags),
        }
        if include_solution and self.solution is not None:
            d["solution"] = self.solution.to_dict()
        return d

    def spectrum_csv(self) -> str:
        lines = ["index,eigenvalue"]
        lines += [f"{i},{v:.17g}" for i, v in enumerate(self.eigen_spectrum)]
        return "\n".join(lines) + "\n"


def classify(rank, rel_gap) -> Verdict:
    if rank == 1 and rel_gap <= TIGHT_GAP:
        return Verdict.TIGHT
    if rank > 1 and rel_gap > NON_TIGHT_GAP:
        return Verdict.NON_TIGHT
    return Verdict.INCONCLUSIVE


def tightness_report(problem: StandardFormProblem, settings: SolverSettings | None = None,
                     policy: RankPolicy = RankPolicy(), seed=0, solution=None) -> TightnessReport:
    """Solve, refine to an extreme point, measure rank and round.

    Raises :class:`SolverFailure` when the solver does not reach optimality.
    """
    sol = solution if solution is not None else solve_relaxation(problem, settings)
    if not sol.optimal:
        raise SolverFailure(f"relaxation ended with status {sol.status.value}", sol)
    sol = refine_to_extreme_point(problem, sol, settings, seed=seed, policy=policy)
    info = numerical_rank(sol.X, policy)
    flags = list(sol.flags)
    try:
        els, upper = extract_solution(sol.X, problem)
    except RoundingDegenerate:
        els, upper = _fallback_rounding(sol.X, problem, max(info.rank, 1))
        flags.append("rounding_fallback")
    lower = sol.dual_obj
    rel_gap = (upper - lower) / max(1.0, abs(lower))
    if feasibility_residual(embed(els, problem.spec), problem.spec) > 1e-9:
        flags.append("rounding_infeasible")
    return TightnessReport(
        rank=info.rank,
        eigen_spectrum=info.spectrum,
        margin=info.margin,
        lower_bound=lower,
        upper_bound=upper,
        rel_gap=rel_gap,
        verdict=classify(info.rank, rel_gap),
        rounded_solution=els,
        solution=sol,
        flags=flags,
    )


__all__ = [
    "Verdict",
    "RankPolicy",
    "RankInfo",
    "numerical_rank",
    "extract_solution",
    "is_extreme_point",
    "refine_to_extreme_point",
    "oracle_minimize",
    "TightnessReport",
    "tightness_report",
    "classify",
]
