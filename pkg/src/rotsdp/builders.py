"""Reduce registration, hand-eye and averaging problems to standard form.

Every builder returns a :class:`StandardFormProblem` whose quadratic form,
evaluated at a lifted feasible point, reproduces the application cost up to
the recorded ``cost_scale`` and ``cost_offset``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domains import (
    DomainSpec,
    Kind,
    RotationElement,
    quat_left,
    quat_multiply,
    quat_right,
    quaternion_matrix,
)
from .errors import DegenerateInput, InvalidQuaternion, TranslationUnobservable
from .problem import Provenance, StandardFormProblem

# vec([[c, -s], [s, c]]) = SO2_LIFT @ (c, s)
SO2_LIFT = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True, eq=False)
class Correspondence:
    """A measured point ``x`` matched to a point, line or plane through ``y``.

    ``direction`` is the unit line direction (``kind="line"``) or unit plane
    normal (``kind="plane"``).  Works in 2D (SO2) and 3D (SO3).
    """

    x: np.ndarray
    y: np.ndarray
    kind: str = "point"
    direction: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.kind not in ("point", "line", "plane"):
            raise ValueError(f"unknown correspondence kind {self.kind!r}")
        if self.kind != "point":
            d = np.asarray(self.direction, dtype=float)
            if abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise DegenerateInput(f"{self.kind} direction must have unit length")
            object.__setattr__(self, "direction", d)

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    @property
    def P(self) -> np.ndarray:
        p = self.dim
        if self.kind == "point":
            return np.eye(p)
        d = self.direction
        if self.kind == "line":
            return np.eye(p) - np.outer(d, d)
        return d[None, :]

    def to_dict(self):
        out = {"x": self.x.tolist(), "y": self.y.tolist(), "kind": self.kind}
        if self.direction is not None:
            out["direction"] = np.asarray(self.direction).tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(d["x"], d["y"], d.get("kind", "point"), d.get("direction"))


@dataclass
class RelativeRotationGraph:
    """``n`` nodes and measured relative rotations ``(i, j, R_ij)`` with the
    model ``R_i R_ij = R_j``.  Measurements are 2x2/3x3 matrices or unit
    quaternions."""

    n: int
    edges: list

    def __post_init__(self):
        for i, j, _ in self.edges:
            if not (0 <= i < self.n and 0 <= j < self.n) or i == j:
                raise ValueError(f"bad edge ({i}, {j}) for {self.n} nodes")

    def is_connected(self) -> bool:
        adj = {k: set() for k in range(self.n)}
        for i, j, _ in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        seen, todo = {0}, [0]
        while todo:
            k = todo.pop()
            for nb in adj[k] - seen:
                seen.add(nb)
                todo.append(nb)
        return len(seen) == self.n

    def to_dict(self):
        return {
            "n": self.n,
            "edges": [[int(i), int(j), np.asarray(m).tolist()] for i, j, m in self.edges],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n"]), [(int(i), int(j), np.array(m, dtype=float)) for i, j, m in d["edges"]])


def _as_matrix(R):
    if isinstance(R, RotationElement):
        return R.matrix
    return np.asarray(R, dtype=float)


def _lift(block, spec):
    """Embed an ambient quadratic form (no linear terms) in the lifted space."""
    N = spec.lifted_dim
    M = np.zeros((N, N))
    M[:-1, :-1] = block
    return M


def _reduce_so2(M_full, n):
    """Restrict a quadratic form in full ``vec(R_i)`` coordinates to ``(c_i, s_i)``."""
    L = np.kron(np.eye(n), SO2_LIFT)
    return L.T @ M_full @ L


# ---------------------------------------------------------------------------
# registration


def registration_problem(correspondences: Sequence[Correspondence], spec: DomainSpec | None = None):
    """Rigid registration with the translation eliminated in closed form."""
    if not correspondences:
        raise ValueError("registration needs at least one correspondence")
    p = correspondences[0].dim
    if spec is None:
        spec = DomainSpec(Kind.SO3 if p == 3 else Kind.SO2, 1)
    if spec.n != 1 or spec.kind not in (Kind.SO2, Kind.SO3) or {2: Kind.SO2, 3: Kind.SO3}[p] != spec.kind:
        raise ValueError(f"registration of {p}D data is not supported over {spec}")
    N = spec.lifted_dim
    B, Ps = [], []
    for c in correspondences:
        if c.dim != p:
            raise ValueError("mixed 2D/3D correspondences")
        P = c.P
        if p == 3:
            lin = np.kron(c.x[None, :], P)
        else:
            x1, x2 = c.x
            lin = P @ np.array([[x1, -x2], [x2, x1]])
        B.append(np.hstack([lin, -(P @ c.y)[:, None]]))
        Ps.append(P)
    PtP = sum(P.T @ P for P in Ps)
    ev = np.linalg.eigvalsh(PtP)
    if ev[0] <= 1e-10 * max(ev[-1], 1.0):
        raise TranslationUnobservable("sum of P_i^T P_i is singular")
    T = -np.linalg.solve(PtP, sum(P.T @ Bi for P, Bi in zip(Ps, B)))
    M = np.zeros((N, N))
    for P, Bi in zip(Ps, B):
        U = Bi + P @ T
        M += U.T @ U
    return StandardFormProblem(
        M,
        spec,
        Provenance.REGISTRATION,
        source={
            "correspondences": [c.to_dict() for c in correspondences],
            "translation_map": T.tolist(),
        },
    )


def registration_translation(problem: StandardFormProblem, r) -> np.ndarray:
    """Optimal translation for the rotation encoded in lifted vector ``r``."""
    return np.asarray(problem.source["translation_map"]) @ np.asarray(r, dtype=float)


def resectioning_problem(viewing_rays, spec: DomainSpec | None = None):
    """Camera orientation from ``(unit ray direction, world point)`` pairs.

    Each world point, after the rigid motion into the camera frame, must lie on
    its viewing ray through the camera centre at the origin.
    """
    corrs = []
    for d, X in viewing_rays:
        d = np.asarray(d, dtype=float)
        corrs.append(Correspondence(X, np.zeros_like(d), "line", d / np.linalg.norm(d)))
    prob = registration_problem(corrs, spec)
    prob.provenance = Provenance.RESECTIONING
    return prob


# ---------------------------------------------------------------------------
# hand-eye


def handeye_block(U, V):
    """``M_i = 2I - V (x) U - V^T (x) U^T`` so that
    ``||U R - R V||_F^2 = vec(R)^T M_i vec(R)``."""
    U, V = _as_matrix(U), _as_matrix(V)
    return 2.0 * np.eye(9) - np.kron(V, U) - np.kron(V.T, U.T)


def handeye_so3(pairs):
    if not pairs:
        raise ValueError("hand-eye needs at least one pair")
    spec = DomainSpec(Kind.SO3, 1)
    blk = sum(handeye_block(U, V) for U, V in pairs)
    return StandardFormProblem(
        _lift(blk, spec),
        spec,
        Provenance.HANDEYE_SO3,
        source={"pairs": [[_as_matrix(U).tolist(), _as_matrix(V).tolist()] for U, V in pairs]},
    )


def _unit(q):
    q = np.asarray(q.coords if isinstance(q, RotationElement) else q, dtype=float)
    if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise InvalidQuaternion(f"expected a unit quaternion, got {q}")
    return q


def handeye_quat(pairs, fix_signs: bool = True):
    """Quaternion hand-eye: ``sum ||Q(u_i) q - Q(q) v_i||^2``.

    With ``fix_signs`` each ``v_i`` is replaced by ``-v_i`` when that lowers its
    residual at an initial estimate.  The estimate is the least-squares
    minimizer after aligning scalar parts (conjugate rotations share their
    rotation angle, so consistent ``u_i``, ``v_i`` have equal scalar parts).
    """
    if not pairs:
        raise ValueError("hand-eye needs at least one pair")
    us = [_unit(u) for u, _ in pairs]
    vs = [_unit(v) for _, v in pairs]
    flipped = []
    if fix_signs:
        vs = [v if u[0] * v[0] >= 0 else -v for u, v in zip(us, vs)]
        K = [quat_left(u) - quat_right(v) for u, v in zip(us, vs)]
        q0 = np.linalg.eigh(sum(k.T @ k for k in K))[1][:, 0]
        for idx, (u, v) in enumerate(zip(us, vs)):
            plus = np.linalg.norm(quat_left(u) @ q0 - quat_right(v) @ q0)
            minus = np.linalg.norm(quat_left(u) @ q0 + quat_right(v) @ q0)
            if minus < plus:
                vs[idx] = -v
        flipped = [bool(np.dot(v, _unit(v_in)) < 0) for v, (_, v_in) in zip(vs, pairs)]
    spec = DomainSpec(Kind.QUAT, 1)
    blk = np.zeros((4, 4))
    for u, v in zip(us, vs):
        k = quaternion_matrix(u) - quat_right(v)
        blk += k.T @ k
    return StandardFormProblem(
        _lift(blk, spec),
        spec,
        Provenance.HANDEYE_QUAT,
        source={"pairs": [[u.tolist(), v.tolist()] for u, v in zip(us, vs)], "flipped": flipped},
    )


# ---------------------------------------------------------------------------
# averaging


def rotavg_so(graph: RelativeRotationGraph, p: int = 3):
    """Rotation averaging ``sum_edges ||R_i R_ij - R_j||_F^2`` over SO(p).

    ``r^T M r = tr(R M0 R^T) = -sum_edges 2 <R_i R_ij, R_j>`` with the block
    matrix ``M0`` holding ``-R_ij`` above and ``-R_ij^T`` below the diagonal;
    the cost equals ``r^T M r + 2 p |E|``.
    """
    if p not in (2, 3):
        raise ValueError("p must be 2 or 3")
    n = graph.n
    M0 = np.zeros((p * n, p * n))
    for i, j, Rij in graph.edges:
        Rij = _as_matrix(Rij)
        if Rij.shape != (p, p):
            raise ValueError(f"edge ({i}, {j}) measurement is not {p}x{p}")
        M0[p * i:p * i + p, p * j:p * j + p] -= Rij
        M0[p * j:p * j + p, p * i:p * i + p] -= Rij.T
    blk = np.kron(M0, np.eye(p))
    spec = DomainSpec(Kind.SO3 if p == 3 else Kind.SO2, n)
    if p == 2:
        blk = _reduce_so2(blk, n)
    flags = [] if graph.is_connected() else ["disconnected"]
    return StandardFormProblem(
        _lift(blk, spec),
        spec,
        Provenance.ROTAVG_SO,
        cost_scale=1.0,
        cost_offset=2.0 * p * len(graph.edges),
        flags=flags,
        source={"graph": graph.to_dict(), "M0": M0.tolist()},
    )


def _tree_estimate(graph, quats):
    """Absolute quaternions by breadth-first propagation from node 0."""
    adj = {k: [] for k in range(graph.n)}
    for (i, j, _), q in zip(graph.edges, quats):
        adj[i].append((j, q, False))
        adj[j].append((i, q, True))
    est = [None] * graph.n
    est[0] = np.array([1.0, 0.0, 0.0, 0.0])
    todo = deque([0])
    while todo:
        k = todo.popleft()
        for nb, q, reverse in adj[k]:
            if est[nb] is None:
                # q_j = q_i * q_ij ; q_i = q_j * conj(q_ij)
                step = q * np.array([1, -1, -1, -1]) if reverse else q
                est[nb] = quat_multiply(est[k], step)
                todo.append(nb)
    return [e if e is not None else np.array([1.0, 0.0, 0.0, 0.0]) for e in est]


def rotavg_quat(graph: RelativeRotationGraph, fix_signs: bool = True):
    """Quaternion averaging ``sum_edges ||Q(q_i) q_ij - q_j||^2``."""
    n = graph.n
    quats = [_unit(q) for _, _, q in graph.edges]
    flipped = [False] * len(quats)
    if fix_signs:
        est = _tree_estimate(graph, quats)
        for k, ((i, j, _), q) in enumerate(zip(graph.edges, quats)):
            plus = np.linalg.norm(quat_multiply(est[i], q) - est[j])
            minus = np.linalg.norm(quat_multiply(est[i], -q) - est[j])
            if minus < plus:
                quats[k] = -q
                flipped[k] = True
    blk = np.zeros((4 * n, 4 * n))
    for (i, j, _), q in zip(graph.edges, quats):
        K = np.zeros((4, 4 * n))
        K[:, 4 * i:4 * i + 4] = quat_right(q)
        K[:, 4 * j:4 * j + 4] -= np.eye(4)
        blk += K.T @ K
    spec = DomainSpec(Kind.QUAT, n)
    g = RelativeRotationGraph(n, [(i, j, q) for (i, j, _), q in zip(graph.edges, quats)])
    return StandardFormProblem(
        _lift(blk, spec),
        spec,
        Provenance.ROTAVG_QUAT,
        flags=[] if graph.is_connected() else ["disconnected"],
        source={"graph": g.to_dict(), "flipped": flipped},
    )


def pointset_avg(point_sets):
    """Point set averaging with model points and translations eliminated.

    Each ``p x m`` set is centred first.  The eliminated cost equals
    ``r^T M r / n + (1 - 1/n) sum_i ||X_i||_F^2``.
    """
    sets = [np.asarray(X, dtype=float) for X in point_sets]
    if len(sets) < 2:
        raise ValueError("point set averaging needs at least two sets")
    p, m = sets[0].shape
    if p not in (2, 3) or any(X.shape != (p, m) for X in sets):
        raise ValueError("point sets must share one p x m shape with p in {2, 3}")
    sets = [X - X.mean(axis=1, keepdims=True) for X in sets]
    n = len(sets)
    flags = []
    if m < 3 or any(np.linalg.matrix_rank(X, tol=1e-10 * max(1.0, np.abs(X).max())) < p - 1 for X in sets):
        flags.append("degenerate_data")
    M0 = np.zeros((p * n, p * n))
    for i in range(n):
        for j in range(n):
            if i != j:
                M0[p * i:p * i + p, p * j:p * j + p] = -sets[i] @ sets[j].T
    blk = np.kron(M0, np.eye(p))
    spec = DomainSpec(Kind.SO3 if p == 3 else Kind.SO2, n)
    if p == 2:
        blk = _reduce_so2(blk, n)
    return StandardFormProblem(
        _lift(blk, spec),
        spec,
        Provenance.POINTSET_AVG,
        cost_scale=1.0 / n,
        cost_offset=(1.0 - 1.0 / n) * sum(float(np.sum(X * X)) for X in sets),
        flags=flags,
        source={"point_sets": [X.tolist() for X in sets]},
    )


def random_problem(spec: DomainSpec, seed=None):
    """Symmetric objective with i.i.d. uniform[-1, 1] entries on and above
    the diagonal."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    N = spec.lifted_dim
    U = np.triu(rng.uniform(-1.0, 1.0, (N, N)))
    M = U + np.triu(U, 1).T
    return StandardFormProblem(M, spec, Provenance.RANDOM, source={"seed": None if isinstance(seed, np.random.Generator) else seed})
