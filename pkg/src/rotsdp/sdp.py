"""Dense primal-dual interior-point solver for small semidefinite programs.

Primal:  min <C, X>  s.t.  <A_k, X> = b_k,  X PSD
Dual:    max b^T y   s.t.  C - sum_k y_k A_k = Z,  Z PSD

Infeasible-start path following with the HKM search direction and Mehrotra's
predictor-corrector.  Everything is dense; intended for matrices up to a few
dozen rows.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from ._linalg import independent_rows, psd_step_length, svec, sym
from .domains import constraint_matrices, homogenizer
from .errors import CertificateInvalid
from .problem import StandardFormProblem

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass(frozen=True)
class SolverSettings:
    gap_tol: float = 1e-8
    feas_tol: float = 1e-9
    max_iter: int = 200
    step_fraction: float = 0.98
    seed: int = 0

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class SdpResult:
    """Raw output of :func:`solve_sdp` in the caller's scaling."""

    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    primal_obj: float
    dual_obj: float
    status: Status
    iterations: int
    residuals: dict = field(default_factory=dict)


@dataclass
class Reduction:
    """Independent subset of a constraint system; dropped rows get multiplier 0."""

    keep: np.ndarray
    m_original: int

    def expand(self, y_reduced):
        y = np.zeros(self.m_original)
        y[self.keep] = y_reduced
        return y


def reduce_constraints(A, b=None, tol=1e-10) -> Reduction:
    A = np.asarray(A, dtype=float)
    rows = svec(A)
    if b is not None:
        rows = np.hstack([rows, np.asarray(b, float)[:, None]])
    return Reduction(independent_rows(rows, tol=tol), A.shape[0])


def _step(chol, d, frac):
    a = psd_step_length(chol, d)
    return min(1.0, frac * a)


def _is_pd(M):
    try:
        cholesky(M, lower=True)
    except LinAlgError:
        return False
    return True


def solve_sdp(C, A, b, settings: SolverSettings | None = None) -> SdpResult:
    """Solve the standard-form SDP.  ``A`` has shape ``(m, n, n)``.

    Dependent constraints are dropped first (their multipliers are reported
    as 0); an inconsistent system raises ``ValueError``.
    """
    s = settings or SolverSettings()
    C = sym(np.asarray(C, dtype=float))
    A = sym(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    red = reduce_constraints(A, b)
    if len(red.keep) < A.shape[0]:
        out = solve_sdp(C, A[red.keep], b[red.keep], s)
        out.y = red.expand(out.y)
        return out
    if len(independent_rows(svec(A))) < A.shape[0]:
        raise ValueError("inconsistent constraint system")
    m, n = A.shape[0], C.shape[0]

    # orthonormalize the constraint operator: A_o = T A with T = R^{-T}
    qmat, rmat = np.linalg.qr(svec(A).T)
    T = solve_triangular(rmat, np.eye(m), trans="T", lower=False)
    A = np.tensordot(T, A, axes=1)
    b = T @ b
    c_norm = np.linalg.norm(C)
    if c_norm == 0:
        c_norm = 1.0
    C = C / c_norm

    Avec = A.reshape(m, -1)

    def op(X):
        return Avec @ X.reshape(-1)

    def adj(y):
        return (y @ Avec).reshape(n, n)

    xi = max(10.0, np.sqrt(n), float(np.max(np.sqrt(n) * (1 + np.abs(b)))))
    X = xi * np.eye(n)
    Z = max(10.0, np.sqrt(n)) * np.eye(n)
    y = np.zeros(m)
    nb, nc = 1.0 + np.linalg.norm(b), 1.0 + np.linalg.norm(C)

    best = None
    status = Status.MAX_ITER
    it = 0
    res = {}
    for it in range(s.max_iter + 1):
        Rp = b - op(X)
        Rd = C - Z - adj(y)
        pobj, dobj = float(np.sum(C * X)), float(b @ y)
        mu = float(np.sum(X * Z)) / n
        res = {
            # measured in the caller's units, not the normalized ones
            "rel_gap": c_norm * abs(pobj - dobj) / (1.0 + c_norm * (abs(pobj) + abs(dobj))),
            "primal_infeas": float(np.linalg.norm(Rp)) / nb,
            "dual_infeas": float(np.linalg.norm(Rd)) / nc,
            "mu": mu,
        }
        merit = max(res["rel_gap"] / s.gap_tol, res["primal_infeas"] / s.feas_tol,
                    res["dual_infeas"] / s.feas_tol)
        log.debug("it=%d gap=%.2e pinf=%.2e dinf=%.2e mu=%.2e", it, res["rel_gap"],
                  res["primal_infeas"], res["dual_infeas"], mu)
        if best is None or merit < best[0]:
            best = (merit, X.copy(), y.copy(), Z.copy(), dict(res))
        if merit <= 1.0:
            status = Status.OPTIMAL
            break
        if it == s.max_iter:
            break
        try:
            Lx = cholesky(X, lower=True)
            Lz = cholesky(Z, lower=True)
            Lzi = solve_triangular(Lz, np.eye(n), lower=True)
            Zi = Lzi.T @ Lzi
            # H_ij = tr(A_i X A_j Z^-1) = <G_i, G_j> with G_i = Lz^-1 A_i Lx
            G = np.matmul(np.matmul(Lzi, A), Lx).reshape(m, -1)
            rH = np.linalg.qr(G.T, mode="r")
        except (LinAlgError, ValueError):
            status = Status.NUMERICAL_FAILURE
            break
        if np.min(np.abs(np.diag(rH))) <= 1e-300:
            status = Status.NUMERICAL_FAILURE
            break

        def solve_h(rhs):
            z = solve_triangular(rH, rhs, trans="T", lower=False)
            return solve_triangular(rH, z, lower=False)

        XRdZi = X @ Rd @ Zi

        def direction(gz):
            # gz = sigma*mu*Z^-1 - X - (second-order correction) Z^-1
            rhs = Rp - op(gz) + op(XRdZi)
            dy = solve_h(rhs)
            dZ = sym(Rd - adj(dy))
            dX = sym(gz - X @ dZ @ Zi)
            # X dZ Z^-1 loses accuracy as Z becomes singular; restore the
            # linearized primal equation exactly (the operator is orthonormal)
            dX = dX + adj(Rp - op(dX))
            return dX, dy, dZ

        with np.errstate(all="ignore"):
            dXa, dya, dZa = direction(-X)
        if not (np.isfinite(dXa).all() and np.isfinite(dZa).all()):
            status = Status.NUMERICAL_FAILURE
            break
        ap = _step(Lx, dXa, 1.0)
        ad = _step(Lz, dZa, 1.0)
        mu_aff = float(np.sum((X + ap * dXa) * (Z + ad * dZa))) / n
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0
        gz = sigma * mu * Zi - X - dXa @ dZa @ Zi
        with np.errstate(all="ignore"):
            dX, dy, dZ = direction(gz)
        if not (np.isfinite(dX).all() and np.isfinite(dZ).all() and np.isfinite(dy).all()):
            status = Status.NUMERICAL_FAILURE
            break
        ap = _step(Lx, dX, s.step_fraction)
        ad = _step(Lz, dZ, s.step_fraction)
        # round-off can leave a nominally interior step barely indefinite
        for _ in range(30):
            if ap < 1e-12 and ad < 1e-12:
                break
            Xn, Zn = sym(X + ap * dX), sym(Z + ad * dZ)
            if _is_pd(Xn) and _is_pd(Zn):
                break
            ap, ad = 0.5 * ap, 0.5 * ad
        else:
            ap = ad = 0.0
        if ap < 1e-12 and ad < 1e-12:
            status = Status.NUMERICAL_FAILURE
            break
        log.debug("   sigma=%.2e ap=%.2e ad=%.2e", sigma, ap, ad)
        X, Z = Xn, Zn
        y = y + ad * dy

    if status is not Status.OPTIMAL and best is not None:
        _, X, y, Z, res = best
    return SdpResult(
        X=X,
        y=(T.T @ y) * c_norm,
        Z=Z * c_norm,
        primal_obj=float(np.sum(C * X)) * c_norm,
        dual_obj=float(b @ y) * c_norm,
        status=status,
        iterations=it,
        residuals=res,
    )


# ---------------------------------------------------------------------------
# the rotation relaxation


@dataclass
class SdpSolution:
    X: np.ndarray
    gamma: float
    lam: np.ndarray
    S: np.ndarray
    primal_obj: float
    dual_obj: float
    status: Status
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def to_dict(self):
        return {
            "X": self.X.tolist(),
            "gamma": self.gamma,
            "lambda": self.lam.tolist(),
            "S": self.S.tolist(),
            "primal_obj": self.primal_obj,
            "dual_obj": self.dual_obj,
            "status": self.status.value,
            "iterations": self.iterations,
            "residuals": self.residuals,
            "flags": list(self.flags),
        }


def preprocess(problem: StandardFormProblem, extra=None):
    """Constraint system of the relaxation with dependent rows removed.

    Returns ``(A, b, reduction)`` where ``A`` stacks the domain constraints,
    any ``extra`` matrices, and ``e e^T`` last.
    """
    spec = problem.spec
    e = homogenizer(spec)
    mats = [constraint_matrices(spec)]
    if extra is not None and len(extra):
        mats.append(np.asarray(extra, dtype=float))
    mats.append(np.outer(e, e)[None])
    A_full = np.concatenate(mats)
    b_full = np.zeros(A_full.shape[0])
    b_full[-1] = 1.0
    red = reduce_constraints(A_full, b_full)
    return A_full[red.keep], b_full[red.keep], red


def certificate_matrix(problem: StandardFormProblem, gamma, lam) -> np.ndarray:
    A = constraint_matrices(problem.spec)
    e = homogenizer(problem.spec)
    return sym(problem.M - np.tensordot(lam, A, axes=1) - gamma * np.outer(e, e))


def solve_relaxation(problem: StandardFormProblem, settings: SolverSettings | None = None) -> SdpSolution:
    """Solve ``min tr(MX)`` s.t. ``tr(A_i X) = 0``, ``tr(e e^T X) = 1``, ``X`` PSD."""
    A, b, red = preprocess(problem)
    out = solve_sdp(problem.M, A, b, settings)
    y = red.expand(out.y)
    lam, gamma = y[:-1], float(y[-1])
    S = certificate_matrix(problem, gamma, lam)
    return SdpSolution(
        X=out.X,
        gamma=gamma,
        lam=lam,
        S=S,
        primal_obj=out.primal_obj,
        dual_obj=gamma,
        status=out.status,
        iterations=out.iterations,
        residuals=out.residuals,
    )


def sos_certificate(solution: SdpSolution, problem: StandardFormProblem | None = None, tol=1e-7):
    """Vectors ``a_j`` with ``sum_j a_j a_j^T = S``; then on the domain
    ``r^T M r - gamma = sum_j (a_j^T r)^2``."""
    S = solution.S if problem is None else certificate_matrix(problem, solution.gamma, solution.lam)
    w, V = np.linalg.eigh(sym(S))
    scale = max(1.0, float(np.abs(w).max())) if w.size else 1.0
    if w.size and w[0] < -tol * scale:
        raise CertificateInvalid(f"certificate has eigenvalue {w[0]:.3e}")
    keep = w > 1e-12 * scale
    return [V[:, j] * np.sqrt(w[j]) for j in np.flatnonzero(keep)[::-1]]


def certificate_metrics(solution: SdpSolution, problem: StandardFormProblem) -> dict:
    """Diagnostics of the dual certificate: smallest eigenvalue of ``S``,
    relative duality gap and the Frobenius error of the SOS factorization."""
    S = certificate_matrix(problem, solution.gamma, solution.lam)
    w = np.linalg.eigvalsh(S)
    gap = abs(solution.primal_obj - solution.gamma) / max(1.0, abs(solution.gamma))
    try:
        vecs = sos_certificate(solution, problem)
    except CertificateInvalid:
        err = float("inf")
    else:
        R = sum((np.outer(a, a) for a in vecs), np.zeros_like(S))
        err = float(np.linalg.norm(R - S))
    return {"min_eig_S": float(w[0]), "duality_gap": float(gap), "sos_error": err}
