"""Synthesis of objectives over SO(3) whose relaxation is not tight.

The construction intersects the lifted variety with three hyperplanes (eight
points), keeps six of them, and builds a quadratic form that vanishes to
second order there without being a combination of products of the linear
forms through the six points.  Adding the sum of squares of those linear forms
gives an objective that is nonnegative on the variety but has no
sum-of-squares certificate, so the relaxation returns a rank-6 extreme point.

Quadratic forms are compared modulo the ideal of the variety and the constant
``e e^T``: neither changes the relaxation gap, and both are needed to pick
positive semidefinite or hand-eye-shaped representatives.
"""
from __future__ import annotations

import enum
import functools
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.linalg import null_space, orth

from ._linalg import smat, svec, sym
from .analysis import TightnessReport, Verdict, oracle_minimize, tightness_report
from .builders import Correspondence, handeye_so3, registration_problem
from .domains import (
    DomainSpec,
    Kind,
    constraint_matrices,
    homogenizer,
    quat_to_matrix,
    tangent_basis,
    vec_quadratics,
)
from .errors import (
    AssemblyFailed,
    DegenerateSelection,
    FitFailed,
    InsufficientRealIntersections,
    NoStructuredM0,
    SamplingFailed,
    SolverFailure,
)
from .problem import Provenance, StandardFormProblem
from .sdp import SolverSettings, solve_sdp

log = logging.getLogger(__name__)

SO3 = DomainSpec(Kind.SO3, 1)
DEGREE = 8  # number of intersection points of SO(3) with three hyperplanes
CODIM = 6


class Structure(str, enum.Enum):
    GENERIC = "generic"
    HANDEYE = "handeye"
    REGISTRATION = "registration"


# ---------------------------------------------------------------------------
# intersection with hyperplanes


@functools.lru_cache(maxsize=None)
def _lift_quadratics():
    # r(q) = [vec(R(q)); |q|^2] is homogeneous quadratic in q
    H = np.concatenate([vec_quadratics(), np.eye(4)[None]])
    H.setflags(write=False)
    return H


def lift_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.einsum("kab,...a,...b->...k", _lift_quadratics(), q, q)


def _newton_batch(G, q, iters, damp):
    for _ in range(iters):
        Gq = np.einsum("iab,sb->sia", G, q)
        F = np.concatenate([np.einsum("sa,sia->si", q, Gq), (np.sum(q * q, 1) - 1.0)[:, None]], 1)
        J = np.concatenate([2.0 * Gq, 2.0 * q[:, None, :]], 1)
        bad = np.abs(np.linalg.det(J)) < 1e-14
        J[bad] += 1e-6 * np.eye(4)
        d = np.linalg.solve(J, F[..., None])[..., 0]
        if damp is not None:
            nd = np.linalg.norm(d, axis=1, keepdims=True)
            d = d * np.minimum(1.0, damp / np.maximum(nd, 1e-300))
        q = q - d
        q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q


def intersect_hyperplanes(h1, h2, h3, seed=0, starts=5000, iters=40, require=DEGREE):
    """Real points of SO(3) on which three linear forms vanish.

    Substituting the quaternion parametrization turns the three linear forms
    into quadrics on the unit 3-sphere; these are solved by damped Newton from
    ``starts`` random starts, followed by undamped polishing.  Roots are
    identified up to ``q ~ -q``.  Returns at most eight lifted points, sorted.
    Raises :class:`InsufficientRealIntersections` (with ``.points``) when
    fewer than ``require`` are found.
    """
    hs = np.vstack([h1, h2, h3]).astype(float)
    G = np.einsum("ik,kab->iab", hs, _lift_quadratics())
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((starts, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q = _newton_batch(G, q, iters, damp=0.5)
    q = _newton_batch(G, q, 4, damp=None)
    scale = np.linalg.norm(hs, axis=1)
    res = np.abs(np.einsum("sa,iab,sb->si", q, G, q) / scale).max(1)
    ok = np.isfinite(res) & (res < 1e-11)
    found: list[tuple[float, np.ndarray]] = []
    for x, rv in sorted(zip(q[ok], res[ok]), key=lambda t: t[1]):
        if all(min(np.linalg.norm(x - y), np.linalg.norm(x + y)) > 1e-6 for _, y in found):
            found.append((rv, x))
    found = found[:DEGREE]
    pts = [lift_quaternion(x) for _, x in found]
    pts.sort(key=lambda r: tuple(np.round(r, 8)))
    if len(pts) < require:
        err = InsufficientRealIntersections(f"found {len(pts)} real intersection points")
        err.points = pts
        raise err
    return pts


@dataclass
class HyperplaneSample:
    h: np.ndarray  # (3, 10)
    points: list
    attempts: int

    @property
    def acceptance_rate(self):
        return 1.0 / self.attempts


def sample_hyperplanes(seed, max_attempts=10_000, screen_starts=500, starts=5000) -> HyperplaneSample:
    """Gaussian linear forms whose intersection with SO(3) is eight real points.

    Each candidate is screened with ``screen_starts`` Newton starts; only
    candidates showing at least six real roots get the full multistart.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_attempts + 1):
        hs = rng.standard_normal((3, 10))
        sub = int(rng.integers(2**63))
        try:
            pts = intersect_hyperplanes(*hs, seed=sub, starts=screen_starts, require=CODIM)
        except InsufficientRealIntersections:
            continue
        if len(pts) < DEGREE:
            try:
                pts = intersect_hyperplanes(*hs, seed=sub, starts=starts)
            except InsufficientRealIntersections:
                continue
        log.info("hyperplanes accepted after %d attempts (rate %.4f)", attempt, 1.0 / attempt)
        return HyperplaneSample(hs, pts, attempt)
    raise SamplingFailed(f"no all-real intersection in {max_attempts} attempts")


def select_h0(points8, selected6) -> np.ndarray:
    """Unit linear form vanishing on the selected points, kept as far from zero
    as possible on the remaining two."""
    P = np.asarray(points8, dtype=float)
    sel = list(selected6)
    rest = [i for i in range(len(P)) if i not in sel]
    K = null_space(P[sel], rcond=1e-10)
    if K.shape[1] < 1:
        raise DegenerateSelection("selected points leave no vanishing linear form")
    a = [K.T @ P[j] for j in rest]
    norms = [np.linalg.norm(v) for v in a]
    if min(norms) < 1e-12:
        raise DegenerateSelection("an unselected point lies on every vanishing form")
    u = [v / n for v, n in zip(a, norms)]
    # the max-min of two |linear| functions on the sphere is attained at one of these
    cands = u + ([u[0] + u[1], u[0] - u[1]] if len(u) == 2 else [])
    best, h0 = -1.0, None
    for c in cands:
        nc = np.linalg.norm(c)
        if nc < 1e-12:
            continue
        c = c / nc
        val = min(abs(c @ v) for v in a)
        if val > best:
            best, h0 = val, K @ c
    if best <= 1e-4:
        raise DegenerateSelection(f"h0 nearly vanishes at an unselected point ({best:.2e})")
    return h0 / np.linalg.norm(h0)


# ---------------------------------------------------------------------------
# the second-order vanishing form


def vanishing_conditions(points) -> np.ndarray:
    """Rows ``svec(.)`` of the linear functionals ``r^T M r`` and ``t^T M r``
    (t tangent) whose kernel is the forms vanishing doubly at ``points``."""
    rows = []
    for r in points:
        r = np.asarray(r, dtype=float)
        rows.append(svec(np.outer(r, r)))
        for t in tangent_basis(r, SO3).T:
            rows.append(svec(sym(np.outer(t, r))))
    return np.array(rows)


def _product_basis(hs):
    hs = np.asarray(hs)
    k = hs.shape[0]
    return np.array([svec(sym(np.outer(hs[i], hs[j]))) for i in range(k) for j in range(i, k)])


@functools.lru_cache(maxsize=None)
def _quotient_basis():
    """Orthonormal basis (columns, svec coordinates) of span{A_i, e e^T}."""
    A = constraint_matrices(SO3)
    e = homogenizer(SO3)
    return orth(np.vstack([svec(A), svec(np.outer(e, e))]).T)


def modulo_ideal(M) -> np.ndarray:
    """svec of ``M`` with its component in span{A_i, e e^T} removed."""
    v = svec(np.asarray(M, dtype=float))
    Q = _quotient_basis()
    return v - Q @ (Q.T @ v)


@functools.lru_cache(maxsize=4)
def _registration_relations(samples=200, threshold=1e-8, seed=12345):
    """Linear relations satisfied by every point-to-line registration matrix
    with five correspondences (rows act on svec)."""
    rng = np.random.default_rng(seed)
    V = []
    for _ in range(samples):
        corrs = [_random_line_corr(rng) for _ in range(5)]
        V.append(svec(registration_problem(corrs).M))
    V = np.array(V)
    _, s, vt = np.linalg.svd(V)
    rank = int(np.sum(s > threshold * s[0]))
    out = vt[rank:]
    out.setflags(write=False)
    return out


def _random_line_corr(rng):
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    return Correspondence(rng.standard_normal(3), rng.standard_normal(3), "line", d)


def structure_relations(structure: Structure) -> np.ndarray:
    """Rows ``L`` with ``L @ svec(M) = 0`` for every objective of the given kind."""
    structure = Structure(structure)
    if structure is Structure.GENERIC:
        return np.zeros((0, 55))
    if structure is Structure.HANDEYE:
        rows = []
        for j in range(10):
            E = np.zeros((10, 10))
            E[9, j] = E[j, 9] = 1.0
            rows.append(svec(E))
        return np.array(rows)
    return np.array(_registration_relations())


def _max_min_eig(F0, Fs, settings=None):
    """max t s.t. F0 + sum_j w_j F_j - t I is PSD.  Returns (t, w)."""
    n = F0.shape[0]
    A = np.concatenate([-np.asarray(Fs), np.eye(n)[None]])
    b = np.zeros(A.shape[0])
    b[-1] = 1.0
    out = solve_sdp(F0, A, b, settings or SolverSettings())
    if out.status.value != "Optimal":
        raise NoStructuredM0(f"auxiliary eigenvalue problem ended with {out.status.value}")
    return float(out.y[-1]), out.y[:-1]


@dataclass
class M0Result:
    M0: np.ndarray
    min_eig: float
    alpha: float
    margin: float
    offset: float  # common value of r^T M0 r at the selected points


def find_M0(points6, structure=Structure.GENERIC, alpha=None, settings=None) -> M0Result:
    """Second-order vanishing form with the largest minimum eigenvalue.

    The admissible forms are ``a N + (products of the forms through the
    points)``, with ``N`` the unit direction of the doubly-vanishing forms
    orthogonal to those products and to the ideal.  Representatives are
    ``a N + sum b_k h_i h_j + sum l_i A_i + c e e^T`` with trace one and the
    structural relations.  ``|a|`` defaults to half the largest value that
    still admits a positive semidefinite representative (but at least 0.1);
    with ``a`` fixed, the representative maximizing the minimum eigenvalue is
    returned.  Its values at the points all equal ``c`` and its tangential
    gradients vanish there.
    """
    structure = Structure(structure)
    P6 = np.asarray(points6, dtype=float)
    hspan = null_space(P6, rcond=1e-10).T
    if hspan.shape[0] != 4:
        raise NoStructuredM0(f"selected points span an unexpected subspace ({hspan.shape[0]})")
    Dn = null_space(vanishing_conditions(P6), rcond=1e-9)
    A = constraint_matrices(SO3)
    e = homogenizer(SO3)
    prods = _product_basis(hspan)
    Q = orth(np.vstack([svec(A), prods, svec(np.outer(e, e))]).T)
    rest = Dn - Q @ (Q.T @ Dn)
    u, s, _ = np.linalg.svd(rest, full_matrices=False)
    if s.size == 0 or s[0] < 1e-6:
        raise NoStructuredM0("no doubly vanishing form outside the product span")
    N = smat(u[:, 0], 10)

    # coefficients: [a, products, ideal, constant]
    basis = np.concatenate([N[None], smat(prods, 10), A, np.outer(e, e)[None]])
    L = structure_relations(structure)
    trace = np.trace(basis, axis1=1, axis2=2)
    E = np.vstack([trace[None], L @ svec(basis).T]) if L.size else trace[None]
    g = np.zeros(E.shape[0])
    g[0] = 1.0
    block = slice(0, 9) if structure is Structure.HANDEYE else slice(0, 10)

    def affine(fixed):
        # coefficient vectors x = x0 + Z w satisfying E x = g and x[0] = fixed
        Ef = np.vstack([E, np.eye(basis.shape[0])[:1]]) if fixed is not None else E
        gf = np.append(g, fixed) if fixed is not None else g
        x0 = np.linalg.lstsq(Ef, gf, rcond=None)[0]
        if np.linalg.norm(Ef @ x0 - gf) > 1e-9:
            raise NoStructuredM0("structural relations are inconsistent with a trace-one form")
        Z = null_space(Ef, rcond=1e-10)
        F0 = np.tensordot(x0, basis, axes=1)[block, block]
        Fs = np.einsum("kj,kab->jab", Z, basis)[:, block, block]
        return x0, Z, F0, Fs

    if alpha is None:
        # largest |a| with a PSD representative: max a s.t. F(x) PSD
        x0, Z, F0, Fs = affine(None)
        amax = []
        for sgn in (1.0, -1.0):
            Aop = -Fs
            b = sgn * Z[0]
            out = solve_sdp(F0, Aop, b, settings or SolverSettings())
            amax.append(sgn * (x0[0] + Z[0] @ out.y) if out.status.value == "Optimal" else 0.0)
        sgn = 1.0 if amax[0] >= amax[1] else -1.0
        alpha = sgn * max(0.1, 0.5 * max(amax))
    x0, Z, F0, Fs = affine(alpha)
    t, w = _max_min_eig(F0, Fs, settings)
    a, M0 = alpha, sym(np.tensordot(x0 + Z @ w, basis, axes=1))
    if t < 0:
        raise NoStructuredM0(f"no positive semidefinite representative (max min eig {t:.3e})")
    if structure is Structure.HANDEYE:
        M0[9, :] = 0.0
        M0[:, 9] = 0.0
    vals = np.einsum("ki,ij,kj->k", P6, M0, P6)
    red = modulo_ideal(M0)
    ortho = np.linalg.norm(red - _project(red, prods))
    return M0Result(M0, t, a, ortho / np.linalg.norm(M0), float(np.mean(vals)))


def _project(v, rows):
    Q = orth(np.asarray(rows).T)
    return Q @ (Q.T @ v)


# ---------------------------------------------------------------------------
# assembly


def _witness(problem, report, seed):
    """Oracle minimum minus relaxation value, relative."""
    eta, _ = oracle_minimize(problem, seed=seed)
    gamma = report.lower_bound
    return eta, (eta - gamma) / max(1.0, abs(gamma))


def assemble(hs, M0, points6=None, seed=0, delta_max=1.0, halvings=20, settings=None,
             oracle=True):
    """``M = delta M0 + sum_i h_i h_i^T`` for the largest ``delta`` in
    ``(0, delta_max]`` (halving from ``delta_max``) that verifies non-tight with
    rank 6 and relative gap above 1e-5.

    The gap is measured against the multistart oracle when ``oracle`` is set,
    otherwise against the rounded upper bound.  Returns
    ``(M, delta, report, oracle_value)``.
    """
    H = np.asarray(hs, dtype=float)
    H = H / np.linalg.norm(H, axis=1, keepdims=True)
    M0 = np.asarray(M0.M0 if isinstance(M0, M0Result) else M0, dtype=float)
    base = H.T @ H
    delta = delta_max
    for _ in range(halvings + 1):
        M = sym(delta * M0 + base)
        prob = StandardFormProblem(M, SO3, Provenance.COUNTEREXAMPLE)
        try:
            rep = tightness_report(prob, settings, seed=seed)
        except SolverFailure:
            rep = None
        if rep is not None and rep.verdict is Verdict.NON_TIGHT and rep.rank == CODIM:
            eta = None
            if oracle:
                eta, gap = _witness(prob, rep, seed)
                ok = gap > 1e-5
            else:
                ok = rep.rel_gap > 1e-5
            if ok:
                return M, delta, rep, eta
        delta *= 0.5
    raise AssemblyFailed("no delta produced a rank-6 non-tight instance")


# ---------------------------------------------------------------------------
# fitting application data


class FitTarget:
    """Target of a data fit, compared modulo the ideal and up to a positive affine rescaling.

    With ``hs`` given, the target is the family
    ``(M - sum h_i h_i^T) + sum_ab G_ab h_a h_b^T`` with a free positive
    definite Gram ``G = L L^T`` (``L`` starts at the identity): the squared
    linear forms may be reweighted but stay a positive definite combination,
    which keeps the form nonnegative and non-SOS for small perturbations.
    """

    def __init__(self, M, hs=None):
        M = sym(np.asarray(M, dtype=float))
        if hs is None:
            self.base = modulo_ideal(M)
            self.q = None
            self.k = 0
        else:
            H = np.asarray(hs, dtype=float)
            self.k = H.shape[0]
            self.base = modulo_ideal(M - H.T @ H)
            self.q = np.array(
                [[modulo_ideal(sym(np.outer(H[a], H[b]))) for b in range(self.k)] for a in range(self.k)]
            )
        if np.linalg.norm(self.vector(self.init())[0]) < 1e-12:
            raise FitFailed("target is constant on the variety")

    @property
    def nparams(self):
        return self.k * self.k

    def init(self):
        return np.eye(self.k).ravel()

    def gram(self, z):
        L = z.reshape(self.k, self.k)
        return L @ L.T

    def vector(self, z):
        """Reduced target vector and a map pulling ``d loss / d vector`` back to ``z``."""
        if self.k == 0:
            return self.base, lambda g: np.zeros(0)
        L = z.reshape(self.k, self.k)
        v = self.base + np.einsum("ab,abk->k", L @ L.T, self.q)

        def back(g):
            Gam = np.einsum("abk,k->ab", self.q, g)
            return (2.0 * sym(Gam) @ L).ravel()

        return v, back


def _cosine_loss(M, target: FitTarget, z):
    """``|p/|p| - T/|T||^2`` for the reduced ``p`` of ``M``.  Returns the loss,
    its gradient w.r.t. ``M`` as a symmetric matrix and w.r.t. ``z``."""
    T, back = target.vector(z)
    nT = np.linalg.norm(T)
    p = modulo_ideal(M)
    n = np.linalg.norm(p)
    if n < 1e-14:
        return 2.0, np.zeros_like(M), np.zeros(target.nparams)
    c = p @ T / (n * nT)
    loss = 2.0 - 2.0 * c
    gp = -2.0 * (T / (n * nT) - c * p / n**2)
    Q = _quotient_basis()
    gp = gp - Q @ (Q.T @ gp)
    gT = -2.0 * (p / (n * nT) - c * T / nT**2)
    return float(loss), smat(gp, M.shape[0]), back(gT)


def _quats_to_mats(q):
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    v = np.einsum("kxy,mx,my->mk", vec_quadratics(), q, q)
    return v.reshape(-1, 3, 3).transpose(0, 2, 1)


def _quat_grad(gR, q):
    """Pull a gradient w.r.t. R(q/|q|) back to the raw coordinates ``q``."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    gk = gR.transpose(0, 2, 1).reshape(-1, 9)
    g = 2.0 * np.einsum("mk,kxy,my->mx", gk, vec_quadratics(), u)
    g = g - np.sum(g * u, axis=-1, keepdims=True) * u
    return g / n


def handeye_matrix(U, V):
    """Objective of ``sum ||U_i R - R V_i||^2`` for stacked rotations (m,3,3)."""
    m = U.shape[0]
    K = np.einsum("mpq,mij->piqj", V, U).reshape(9, 9)
    M = np.zeros((10, 10))
    M[:9, :9] = 2.0 * m * np.eye(9) - K - K.T
    return M


def handeye_loss(theta, target: FitTarget, m):
    """Loss and analytic gradient over ``theta = [u_1..u_m, v_1..v_m, z]``
    (quaternions, then the target's own parameters)."""
    u = theta[: 4 * m].reshape(m, 4)
    v = theta[4 * m: 8 * m].reshape(m, 4)
    U, V = _quats_to_mats(u), _quats_to_mats(v)
    loss, G, gz = _cosine_loss(handeye_matrix(U, V), target, theta[8 * m:])
    G4 = G[:9, :9].reshape(3, 3, 3, 3)
    gU = -2.0 * np.einsum("piqj,mpq->mij", G4, V)
    gV = -2.0 * np.einsum("piqj,mij->mpq", G4, U)
    return loss, np.concatenate([_quat_grad(gU, u).ravel(), _quat_grad(gV, v).ravel(), gz])


def registration_matrix(x, y, d):
    """Point-to-line registration objective (translation eliminated) for
    arrays of points ``x``, line points ``y`` and unit directions ``d``."""
    C, P, S, T = _registration_parts(x, y, d)
    return sym(np.einsum("iak,iab,ibl->kl", C, P, C) + S.T @ T)


def _registration_parts(x, y, d):
    k = x.shape[0]
    C = np.zeros((k, 3, 10))
    for a in range(3):
        C[:, :, 3 * a: 3 * a + 3] = x[:, a, None, None] * np.eye(3)
    C[:, :, 9] = -y
    P = np.eye(3) - np.einsum("ia,ib->iab", d, d)
    S = np.einsum("iab,ibk->ak", P, C)
    T = -np.linalg.solve(P.sum(0), S)
    return C, P, S, T


def registration_loss(theta, target: FitTarget, k=5):
    """Loss and analytic gradient over ``theta = [x (k,3), y (k,3), d (k,3), z]``;
    directions enter normalized."""
    x = theta[: 3 * k].reshape(k, 3)
    y = theta[3 * k: 6 * k].reshape(k, 3)
    draw = theta[6 * k: 9 * k].reshape(k, 3)
    dn = np.linalg.norm(draw, axis=1, keepdims=True)
    d = draw / dn
    C, P, S, T = _registration_parts(x, y, d)
    M = sym(np.einsum("iak,iab,ibl->kl", C, P, C) + S.T @ T)
    loss, G, gz = _cosine_loss(M, target, theta[9 * k:])
    # with U_i = C_i + T: dloss/dC_i = 2 P_i U_i G and dloss/dP_i = U_i G U_i^T
    U = C + T[None]
    gC = 2.0 * np.einsum("iab,ibk,kl->ial", P, U, G)
    gP = np.einsum("iak,kl,ibl->iab", U, G, U)
    gx = np.stack([np.einsum("iaa->i", gC[:, :, 3 * a: 3 * a + 3]) for a in range(3)], 1)
    gy = -gC[:, :, 9]
    gd = -2.0 * np.einsum("iab,ib->ia", gP, d)
    gd = (gd - np.sum(gd * d, 1, keepdims=True) * d) / dn
    return loss, np.concatenate([gx.ravel(), gy.ravel(), gd.ravel(), gz])


def numerical_gradient(fun: Callable, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (fun(theta + e)[0] - fun(theta - e)[0]) / (2 * h)
    return g


def gradient_descent(fun, theta, renormalize, max_iter=5000, tol=1e-15):
    """Gradient descent with Barzilai-Borwein trial steps, Armijo backtracking
    and renormalization of the constrained blocks after each step."""
    theta = renormalize(theta)
    f, g = fun(theta)
    step = 1e-2
    prev = None
    for _ in range(max_iter):
        if f <= tol or np.linalg.norm(g) < 1e-13:
            break
        if prev is not None:
            s_, y_ = theta - prev[0], g - prev[1]
            sy = s_ @ y_
            if sy > 0:
                step = min(1e3, (s_ @ s_) / sy)
        gg = g @ g
        while True:
            cand = renormalize(theta - step * g)
            fc, gc = fun(cand)
            if fc <= f - 1e-4 * step * gg or step < 1e-14:
                break
            step *= 0.5
        if step < 1e-14:
            break
        prev = (theta, g)
        theta, f, g = cand, fc, gc
    return theta, f


def _normalize_blocks(theta, start, size, count):
    theta = theta.copy()
    blk = theta[start: start + size * count].reshape(count, size)
    blk /= np.linalg.norm(blk, axis=1, keepdims=True)
    theta[start: start + size * count] = blk.ravel()
    return theta


@dataclass
class FitResult:
    data: Any
    residual: float
    problem: StandardFormProblem
    report: TightnessReport
    restarts: int


def _fit(loss, init, renorm, build, restarts, seed, settings, accept_tol=1e-10, max_iter=5000,
         oracle=True):
    """Best of ``restarts`` descents whose realized problem verifies non-tight
    with rank 6 (and, with ``oracle``, a witness gap above 1e-5); stops early
    once such a fit reaches ``accept_tol``."""
    rng = np.random.default_rng(seed)
    best = None
    for i in range(restarts):
        theta, f = gradient_descent(loss, init(rng), renorm, max_iter=max_iter)
        if best is not None and f >= best[0]:
            continue
        data, prob = build(theta)
        try:
            rep = tightness_report(prob, settings, seed=seed)
        except SolverFailure:
            continue
        if rep.verdict is not Verdict.NON_TIGHT or rep.rank != CODIM:
            continue
        if oracle and _witness(prob, rep, seed)[1] <= 1e-5:
            continue
        best = (f, data, prob, rep, i + 1)
        if f <= accept_tol:
            break
    if best is None:
        raise FitFailed(f"no restart out of {restarts} realized a certified non-tight instance")
    f, data, prob, rep, used = best
    return FitResult(data, f, prob, rep, used)


def fit_handeye(M, m=8, seed=0, restarts=50, settings=None, hs=None,
                oracle=True) -> FitResult:
    """Rotation pairs whose hand-eye objective matches ``M`` up to the ideal,
    a constant and a positive scale (and a reweighting of the squares of
    ``hs`` when given, see :class:`FitTarget`)."""
    target = FitTarget(M, hs)

    def loss(th):
        return handeye_loss(th, target, m)

    def renorm(th):
        return _normalize_blocks(th, 0, 4, 2 * m)

    def init(rng):
        return np.concatenate([rng.standard_normal(8 * m), target.init()])

    def build(th):
        U = _quats_to_mats(th[: 4 * m].reshape(m, 4))
        V = _quats_to_mats(th[4 * m: 8 * m].reshape(m, 4))
        pairs = list(zip(U, V))
        return pairs, handeye_so3(pairs)

    return _fit(loss, init, renorm, build, restarts, seed, settings, oracle=oracle)


def fit_registration(M, k=5, seed=0, restarts=50, settings=None, hs=None,
                     oracle=True) -> FitResult:
    """Point-to-line correspondences whose registration objective matches
    ``M`` in the same sense as :func:`fit_handeye`."""
    target = FitTarget(M, hs)

    def loss(th):
        return registration_loss(th, target, k)

    def renorm(th):
        return _normalize_blocks(th, 6 * k, 3, k)

    def init(rng):
        return np.concatenate([rng.standard_normal(9 * k), target.init()])

    def build(th):
        x = th[: 3 * k].reshape(k, 3)
        y = th[3 * k: 6 * k].reshape(k, 3)
        d = th[6 * k: 9 * k].reshape(k, 3)
        corrs = [Correspondence(x[i], y[i], "line", d[i] / np.linalg.norm(d[i])) for i in range(k)]
        return corrs, registration_problem(corrs)

    return _fit(loss, init, renorm, build, restarts, seed, settings, oracle=oracle)


# ---------------------------------------------------------------------------
# bundles


@dataclass
class CounterexampleBundle:
    structure: Structure
    seed: int
    h: np.ndarray  # (4, 10): h0, h1, h2, h3
    points8: np.ndarray
    selected6: list
    M0: np.ndarray
    delta: float
    M: np.ndarray
    verification: TightnessReport
    oracle_value: float | None = None
    fitted_data: Any = None
    fitted_M: np.ndarray | None = None
    fit_residual: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def verified_problem(self) -> StandardFormProblem:
        """The problem the verification refers to (the fitted one if any)."""
        M = self.fitted_M if self.fitted_M is not None else self.M
        return StandardFormProblem(M, SO3, Provenance.COUNTEREXAMPLE)

    def to_dict(self):
        fitted = None
        if self.fitted_data is not None:
            if self.structure is Structure.HANDEYE:
                fitted = {"pairs": [[np.asarray(U).tolist(), np.asarray(V).tolist()] for U, V in self.fitted_data]}
            else:
                fitted = {"correspondences": [c.to_dict() for c in self.fitted_data]}
        return {
            "structure": self.structure.value,
            "seed": self.seed,
            "h": np.asarray(self.h).tolist(),
            "points8": np.asarray(self.points8).tolist(),
            "selected6": list(map(int, self.selected6)),
            "M0": np.asarray(self.M0).tolist(),
            "delta": self.delta,
            "M": np.asarray(self.M).tolist(),
            "oracle_value": self.oracle_value,
            "fitted_data": fitted,
            "fitted_M": None if self.fitted_M is None else np.asarray(self.fitted_M).tolist(),
            "fit_residual": self.fit_residual,
            "verification": self.verification.to_dict(),
            "meta": self.meta,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        from .analysis import Verdict as _V

        structure = Structure(d["structure"])
        fitted = None
        if d.get("fitted_data"):
            fd = d["fitted_data"]
            if "pairs" in fd:
                fitted = [(np.array(U), np.array(V)) for U, V in fd["pairs"]]
            else:
                fitted = [Correspondence.from_dict(c) for c in fd["correspondences"]]
        v = d["verification"]
        rep = TightnessReport(
            rank=v["rank"],
            eigen_spectrum=np.array(v["eigen_spectrum"]),
            margin=v["margin"],
            lower_bound=v["lower_bound"],
            upper_bound=v["upper_bound"],
            rel_gap=v["rel_gap"],
            verdict=_V(v["verdict"]),
            rounded_solution=[],
            flags=v.get("flags", []),
        )
        return cls(
            structure=structure,
            seed=d["seed"],
            h=np.array(d["h"]),
            points8=np.array(d["points8"]),
            selected6=list(d["selected6"]),
            M0=np.array(d["M0"]),
            delta=d["delta"],
            M=np.array(d["M"]),
            verification=rep,
            oracle_value=d.get("oracle_value"),
            fitted_data=fitted,
            fitted_M=None if d.get("fitted_M") is None else np.array(d["fitted_M"]),
            fit_residual=d.get("fit_residual"),
            meta=d.get("meta", {}),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def generate_counterexample(structure=Structure.GENERIC, seed=0, max_subsets=28, fit_restarts=50,
                            settings=None, max_attempts=10_000) -> CounterexampleBundle:
    """Full pipeline: hyperplanes, point selection, M0, assembly and (for
    application structures) fitting of data.  Subsets of six points are tried
    in a seed-determined order."""
    structure = Structure(structure)
    rng = np.random.default_rng(seed)
    sample = sample_hyperplanes(int(rng.integers(2**63)), max_attempts=max_attempts)
    P8 = np.array(sample.points)
    subsets = list(itertools.combinations(range(DEGREE), CODIM))
    order = rng.permutation(len(subsets))[:max_subsets]
    failures = []
    for idx in order:
        sel = list(subsets[idx])
        try:
            h0 = select_h0(P8, sel)
            m0 = find_M0(P8[sel], structure, settings=settings)
            hs = np.vstack([h0, sample.h])
            M, delta, rep, eta = assemble(hs, m0, seed=seed, settings=settings)
            fitted = fitted_M = resid = None
            if structure is not Structure.GENERIC:
                fitter = fit_handeye if structure is Structure.HANDEYE else fit_registration
                hn = hs / np.linalg.norm(hs, axis=1, keepdims=True)
                fit = fitter(M, seed=seed, restarts=fit_restarts, settings=settings, hs=hn)
                fitted, fitted_M, resid, rep = fit.data, fit.problem.M, fit.residual, fit.report
                eta, _ = _witness(fit.problem, rep, seed)
        except (DegenerateSelection, NoStructuredM0, AssemblyFailed, FitFailed) as exc:
            failures.append(f"{sel}: {exc}")
            log.info("subset %s failed: %s", sel, exc)
            continue
        return CounterexampleBundle(
            structure=structure,
            seed=seed,
            h=hs,
            points8=P8,
            selected6=sel,
            M0=m0.M0,
            delta=delta,
            M=M,
            verification=rep,
            oracle_value=eta,
            fitted_data=fitted,
            fitted_M=fitted_M,
            fit_residual=resid,
            meta={
                "hyperplane_attempts": sample.attempts,
                "m0_min_eig": m0.min_eig,
                "m0_alpha": m0.alpha,
                "m0_margin": m0.margin,
                "subsets_tried": len(failures) + 1,
            },
        )
    raise AssemblyFailed("every point subset failed: " + "; ".join(failures[:3]))


def verify_bundle(bundle: CounterexampleBundle, seed=1, settings=None, oracle=True):
    """Independent re-solve of the bundle's problem.  Returns
    ``(report, oracle_value, witness_gap)``; the last two are None without oracle."""
    prob = bundle.verified_problem
    rep = tightness_report(prob, settings, seed=seed)
    if not oracle:
        return rep, None, None
    eta, gap = _witness(prob, rep, seed)
    return rep, eta, gap


def perturbed_problem(bundle: CounterexampleBundle, eps, rng) -> StandardFormProblem:
    """``M + eps * |M| * E`` for a random symmetric ``E`` of unit Frobenius norm.
    Non-tightness is an open condition, so small ``eps`` stays non-tight."""
    rng = np.random.default_rng(rng)
    M = bundle.verified_problem.M
    E = rng.standard_normal(M.shape)
    E = E + E.T
    E /= np.linalg.norm(E)
    return StandardFormProblem(M + eps * np.linalg.norm(M) * E, SO3, Provenance.COUNTEREXAMPLE)


__all__ = [
    "Structure",
    "perturbed_problem",
    "lift_quaternion",
    "intersect_hyperplanes",
    "sample_hyperplanes",
    "select_h0",
    "vanishing_conditions",
    "modulo_ideal",
    "structure_relations",
    "find_M0",
    "M0Result",
    "assemble",
    "FitTarget",
    "handeye_loss",
    "registration_loss",
    "numerical_gradient",
    "gradient_descent",
    "fit_handeye",
    "fit_registration",
    "FitResult",
    "CounterexampleBundle",
    "generate_counterexample",
    "verify_bundle",
    "handeye_matrix",
    "registration_matrix",
]
