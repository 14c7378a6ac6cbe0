"""Rotation parametrizations and their quadratic constraint sets.

Three domains are supported, each as ``n`` independent copies:

* ``SO2``  -- planar rotations stored as the pair ``(c, s)``,
  ``R = [[c, -s], [s, c]]``;
* ``SO3``  -- 3x3 rotation matrices stored column-major (``vec(R)``);
* ``QUAT`` -- unit quaternions ``(w, x, y, z)``, scalar first, Hamilton product.

A point of the domain is lifted to ``r = [coords_1, ..., coords_n, 1]``.  The
constant trailing coordinate is called the homogenizing coordinate and every
constant in a constraint is multiplied by its square.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._linalg import independent_rows, null_space, svec
from .errors import DegenerateInput, DomainMismatch, InvalidQuaternion, SingularPoint


class Kind(str, enum.Enum):
    SO2 = "SO2"
    SO3 = "SO3"
    QUAT = "QUAT"


class Minimality(str, enum.Enum):
    MINIMAL = "Minimal"
    ALMOST_MINIMAL = "AlmostMinimal"
    NOT_MINIMAL = "NotMinimal"


# per-copy (coordinates, dim, codim, degree)
_PER_COPY = {
    Kind.SO2: (2, 1, 1, 2),
    Kind.SO3: (9, 3, 6, 8),
    Kind.QUAT: (4, 3, 1, 2),
}


@dataclass(frozen=True)
class DomainSpec:
    kind: Kind
    n: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"copy count must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def block(self) -> int:
        return _PER_COPY[self.kind][0]

    @property
    def ambient_dim(self) -> int:
        return self.block * self.n

    @property
    def lifted_dim(self) -> int:
        return self.ambient_dim + 1

    @property
    def variety_dim(self) -> int:
        return _PER_COPY[self.kind][1] * self.n

    @property
    def codim(self) -> int:
        return _PER_COPY[self.kind][2] * self.n

    @property
    def degree(self) -> int:
        return _PER_COPY[self.kind][3] ** self.n

    @property
    def minimality(self) -> Minimality:
        if self.degree == self.codim + 1:
            return Minimality.MINIMAL
        if self.degree == self.codim + 2:
            return Minimality.ALMOST_MINIMAL
        return Minimality.NOT_MINIMAL

    @property
    def num_constraints(self) -> int:
        return {Kind.SO2: 1, Kind.SO3: 20, Kind.QUAT: 1}[self.kind] * self.n

    def blocks(self):
        """Slices of the lifted vector belonging to each copy."""
        b = self.block
        return [slice(i * b, (i + 1) * b) for i in range(self.n)]

    def to_dict(self):
        return {"kind": self.kind.value, "n": self.n}

    @classmethod
    def from_dict(cls, d):
        return cls(Kind(d["kind"]), int(d["n"]))

    def __str__(self):
        return f"{self.kind.value}^{self.n}"


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_left(u):
    """Matrix ``Q(u)`` with ``Q(u) @ v`` equal to the product ``u * v``."""
    u0, u1, u2, u3 = u
    return np.array(
        [
            [u0, -u1, -u2, -u3],
            [u1, u0, -u3, u2],
            [u2, u3, u0, -u1],
            [u3, -u2, u1, u0],
        ],
        dtype=float,
    )


def quat_right(v):
    """Matrix ``W(v)`` with ``W(v) @ q`` equal to the product ``q * v``."""
    v0, v1, v2, v3 = v
    return np.array(
        [
            [v0, -v1, -v2, -v3],
            [v1, v0, v3, -v2],
            [v2, -v3, v0, v1],
            [v3, v2, -v1, v0],
        ],
        dtype=float,
    )


def quaternion_matrix(u, tol=1e-9):
    u = np.asarray(u, dtype=float)
    if u.shape != (4,) or abs(np.linalg.norm(u) - 1.0) > tol:
        raise InvalidQuaternion(f"expected a unit 4-vector, got {u}")
    return quat_left(u)


def quat_multiply(u, v):
    return quat_left(u) @ np.asarray(v, dtype=float)


def quat_to_matrix(q):
    """Rotation matrix of a quaternion; homogeneous of degree two, so
    ``quat_to_matrix(q)`` is ``|q|^2`` times the rotation of ``q/|q|``."""
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def matrix_to_quat(R):
    """Unit quaternion (w >= 0) of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    cands = np.array([1 + tr, 1 + 2 * R[0, 0] - tr, 1 + 2 * R[1, 1] - tr, 1 + 2 * R[2, 2] - tr])
    k = int(np.argmax(cands))
    s = 2.0 * np.sqrt(max(cands[k], 0.0))
    if k == 0:
        q = [s / 4, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        q = [(R[2, 1] - R[1, 2]) / s, s / 4, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, s / 4, (R[1, 2] + R[2, 1]) / s]
    else:
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, s / 4]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@functools.lru_cache(maxsize=None)
def _vec_quadratics():
    """Symmetric 4x4 matrices ``H_k`` with ``vec(R(q))[k] = q^T H_k q``."""
    H = np.zeros((9, 4, 4))
    E = np.eye(4)
    for a in range(4):
        for b in range(4):
            # polarization of the homogeneous quadratic map
            v = (
                quat_to_matrix(E[a] + E[b]) - quat_to_matrix(E[a] - E[b])
            ).reshape(-1, order="F") / 4.0
            H[:, a, b] = v
    H.setflags(write=False)
    return H


def vec_quadratics():
    return _vec_quadratics()


# ---------------------------------------------------------------------------
# rotation elements


@dataclass(frozen=True, eq=False)
class RotationElement:
    """One rotation in the coordinates of its parametrization.

    ``coords`` holds ``(c, s)`` for SO2, column-major ``vec(R)`` for SO3 and
    the quaternion for QUAT.
    """

    kind: Kind
    coords: np.ndarray

    @classmethod
    def so2(cls, angle):
        return cls(Kind.SO2, np.array([np.cos(angle), np.sin(angle)]))

    @classmethod
    def so3(cls, R, tol=1e-9):
        R = np.asarray(R, dtype=float)
        if R.shape != (3, 3):
            raise DegenerateInput(f"expected a 3x3 matrix, got shape {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1) > tol:
            raise DegenerateInput("matrix is not a rotation")
        return cls(Kind.SO3, R.reshape(-1, order="F").copy())

    @classmethod
    def quat(cls, q, tol=1e-9):
        q = np.asarray(q, dtype=float)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > tol:
            raise InvalidQuaternion(f"expected a unit quaternion, got {q}")
        return cls(Kind.QUAT, q.copy())

    @property
    def angle(self) -> float:
        if self.kind is not Kind.SO2:
            raise AttributeError("angle is only defined for SO2 elements")
        return float(np.arctan2(self.coords[1], self.coords[0]))

    @property
    def matrix(self) -> np.ndarray:
        if self.kind is Kind.SO2:
            c, s = self.coords
            return np.array([[c, -s], [s, c]])
        if self.kind is Kind.SO3:
            return self.coords.reshape(3, 3, order="F")
        return quat_to_matrix(self.coords)

    def is_valid(self, tol=1e-12) -> bool:
        if self.kind is Kind.SO2:
            return abs(self.coords @ self.coords - 1.0) <= tol
        if self.kind is Kind.QUAT:
            return abs(np.linalg.norm(self.coords) - 1.0) <= tol
        R = self.matrix
        return np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1) <= tol

    def __repr__(self):
        return f"RotationElement({self.kind.value}, {np.array2string(self.coords, precision=6)})"


# ---------------------------------------------------------------------------
# constraints


def _quad(dim, terms):
    """Symmetric matrix of sum(coef * x_a * x_b) over ``terms``."""
    A = np.zeros((dim, dim))
    for coef, a, b in terms:
        if a == b:
            A[a, a] += coef
        else:
            A[a, b] += coef / 2.0
            A[b, a] += coef / 2.0
    return A


def _so3_candidates():
    """The 30 candidate quadrics for one SO(3) copy in the 10-dim lifting."""
    idx = lambda i, j: i + 3 * j  # noqa: E731  column-major position of R[i, j]
    w = 9
    out = []
    for j in range(3):
        for k in range(j, 3):
            terms = [(1.0, idx(a, j), idx(a, k)) for a in range(3)]
            if j == k:
                terms.append((-1.0, w, w))
            out.append(_quad(10, terms))
    for j in range(3):
        for k in range(j, 3):
            terms = [(1.0, idx(j, b), idx(k, b)) for b in range(3)]
            if j == k:
                terms.append((-1.0, w, w))
            out.append(_quad(10, terms))
    cyc = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
    # row a x row b = row c
    for a, b, c in cyc:
        for k in range(3):
            k1, k2 = (k + 1) % 3, (k + 2) % 3
            terms = [
                (1.0, idx(a, k1), idx(b, k2)),
                (-1.0, idx(a, k2), idx(b, k1)),
                (-1.0, idx(c, k), w),
            ]
            out.append(_quad(10, terms))
    # column a x column b = column c
    for a, b, c in cyc:
        for k in range(3):
            k1, k2 = (k + 1) % 3, (k + 2) % 3
            terms = [
                (1.0, idx(k1, a), idx(k2, b)),
                (-1.0, idx(k2, a), idx(k1, b)),
                (-1.0, idx(k, c), w),
            ]
            out.append(_quad(10, terms))
    return np.array(out)


@functools.lru_cache(maxsize=None)
def _copy_template(kind: Kind):
    if kind is Kind.SO2:
        return _quad(3, [(1.0, 0, 0), (1.0, 1, 1), (-1.0, 2, 2)])[None]
    if kind is Kind.QUAT:
        return _quad(5, [(1.0, i, i) for i in range(4)] + [(-1.0, 4, 4)])[None]
    cands = _so3_candidates()
    keep = independent_rows(svec(cands), tol=1e-10)
    return cands[keep]


@functools.lru_cache(maxsize=None)
def _constraint_stack(spec: DomainSpec):
    tmpl = _copy_template(spec.kind)
    b, N = spec.block, spec.lifted_dim
    loc = list(range(b)) + [b]
    out = []
    for i in range(spec.n):
        glob = list(range(i * b, (i + 1) * b)) + [N - 1]
        for T in tmpl:
            A = np.zeros((N, N))
            A[np.ix_(glob, glob)] = T[np.ix_(loc, loc)]
            out.append(A)
    A = np.array(out)
    A.setflags(write=False)
    return A


def constraint_matrices(spec: DomainSpec) -> np.ndarray:
    """Stack of symmetric ``A_i`` (shape ``(l, N, N)``) with ``r^T A_i r = 0``
    on the lifted domain."""
    return _constraint_stack(spec)


def homogenizer(spec: DomainSpec) -> np.ndarray:
    e = np.zeros(spec.lifted_dim)
    e[-1] = 1.0
    return e


# ---------------------------------------------------------------------------
# points


def _check_elements(elements, spec):
    if len(elements) != spec.n:
        raise DomainMismatch(f"expected {spec.n} elements for {spec}, got {len(elements)}")
    for el in elements:
        if el.kind is not spec.kind:
            raise DomainMismatch(f"element of kind {el.kind.value} in a {spec} domain")


def embed(elements: Sequence[RotationElement], spec: DomainSpec) -> np.ndarray:
    _check_elements(elements, spec)
    return np.concatenate([el.coords for el in elements] + [np.ones(1)])


def unembed(r, spec: DomainSpec):
    """Split a lifted (or ambient) vector into per-copy coordinate blocks."""
    r = np.asarray(r, dtype=float)
    return [r[s] for s in spec.blocks()]


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_rotation(spec: DomainSpec, rng_seed=None):
    """Haar-uniform sample of ``spec.n`` rotations."""
    rng = _as_rng(rng_seed)
    out = []
    for _ in range(spec.n):
        if spec.kind is Kind.SO2:
            out.append(RotationElement.so2(rng.uniform(-np.pi, np.pi)))
        else:
            q = rng.standard_normal(4)
            q /= np.linalg.norm(q)
            if spec.kind is Kind.QUAT:
                out.append(RotationElement(Kind.QUAT, q))
            else:
                out.append(RotationElement(Kind.SO3, quat_to_matrix(q).reshape(-1, order="F")))
    return out


def nearest_rotation(A):
    """Closest rotation to a square matrix in Frobenius norm."""
    u, s, vt = np.linalg.svd(A)
    d = np.ones(A.shape[0])
    d[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    return (u * d) @ vt


def project_to_variety(vector, spec: DomainSpec):
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (spec.ambient_dim,):
        raise DomainMismatch(f"expected ambient vector of length {spec.ambient_dim}")
    out = []
    for blk in unembed(vector, spec):
        nrm = np.linalg.norm(blk)
        if nrm < 1e-14:
            raise DegenerateInput("zero block has no unique nearest rotation")
        if spec.kind is Kind.SO2:
            out.append(RotationElement(Kind.SO2, blk / nrm))
        elif spec.kind is Kind.QUAT:
            out.append(RotationElement(Kind.QUAT, blk / nrm))
        else:
            R = nearest_rotation(blk.reshape(3, 3, order="F"))
            out.append(RotationElement(Kind.SO3, R.reshape(-1, order="F")))
    return out


def feasibility_residual(r, spec: DomainSpec) -> float:
    r = np.asarray(r, dtype=float)
    A = constraint_matrices(spec)
    vals = np.einsum("i,kij,j->k", r, A, r)
    return float(np.abs(vals).max() + abs(r[-1] - 1.0))


def tangent_basis(point, spec: DomainSpec, tol=1e-8) -> np.ndarray:
    """Orthonormal basis (as columns) of the tangent space of the lifted
    variety at a feasible point, with the homogenizing coordinate held fixed.

    ``point`` is either a list of RotationElement or a lifted vector.
    """
    r = embed(point, spec) if not isinstance(point, np.ndarray) else np.asarray(point, float)
    A = constraint_matrices(spec)
    grads = np.vstack([2.0 * (A @ r), homogenizer(spec)])
    _, s, vt = np.linalg.svd(grads)
    rank = int(np.sum(s > tol * s[0]))
    if spec.lifted_dim - rank != spec.variety_dim:
        raise SingularPoint(
            f"constraint gradients have rank {rank}; expected {spec.lifted_dim - spec.variety_dim}"
        )
    return vt[rank:].T


__all__ = [
    "Kind",
    "Minimality",
    "DomainSpec",
    "RotationElement",
    "constraint_matrices",
    "homogenizer",
    "embed",
    "unembed",
    "random_rotation",
    "project_to_variety",
    "nearest_rotation",
    "feasibility_residual",
    "tangent_basis",
    "quaternion_matrix",
    "quat_left",
    "quat_right",
    "quat_multiply",
    "quat_to_matrix",
    "matrix_to_quat",
    "vec_quadratics",
    "null_space",
]
