import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from rotsdp._linalg import svec
from rotsdp.domains import (
    DomainSpec,
    Kind,
    Minimality,
    RotationElement,
    constraint_matrices,
    embed,
    feasibility_residual,
    matrix_to_quat,
    project_to_variety,
    quat_left,
    quat_multiply,
    quat_right,
    quat_to_matrix,
    random_rotation,
    tangent_basis,
    unembed,
    vec_quadratics,
)
from rotsdp.errors import DomainMismatch, InvalidQuaternion

SPECS = [DomainSpec(k, n) for k in Kind for n in (1, 2)] + [DomainSpec(Kind.SO2, 3)]
seeds = st.integers(0, 2**32 - 1)
quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1).map(
    lambda v: np.asarray(v) / np.linalg.norm(v))


def scipy_matrix(q):
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


@pytest.mark.parametrize(
    "kind,n,dim,codim,degree,label",
    [
        (Kind.SO2, 1, 1, 1, 2, Minimality.MINIMAL),
        (Kind.QUAT, 1, 3, 1, 2, Minimality.MINIMAL),
        (Kind.SO3, 1, 3, 6, 8, Minimality.ALMOST_MINIMAL),
        (Kind.SO2, 2, 2, 2, 4, Minimality.ALMOST_MINIMAL),
        (Kind.QUAT, 2, 6, 2, 4, Minimality.ALMOST_MINIMAL),
        (Kind.SO3, 2, 6, 12, 64, Minimality.NOT_MINIMAL),
        (Kind.SO2, 3, 3, 3, 8, Minimality.NOT_MINIMAL),
    ],
)
def test_invariants_table(kind, n, dim, codim, degree, label):
    spec = DomainSpec(kind, n)
    assert (spec.variety_dim, spec.codim, spec.degree, spec.minimality) == (dim, codim, degree, label)
    assert spec.variety_dim + spec.codim == spec.ambient_dim


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_constraints_span_all_vanishing_quadratics(spec):
    """Oracle: quadrics through many sampled points, found by linear algebra."""
    rng = np.random.default_rng(0)
    pts = np.array([embed(random_rotation(spec, rng), spec) for _ in range(4 * spec.lifted_dim ** 2)])
    rows = svec(np.einsum("ki,kj->kij", pts, pts))
    s = np.linalg.svd(rows, compute_uv=False)
    vanishing = rows.shape[1] - int(np.sum(s > 1e-9 * s[0]))
    A = svec(constraint_matrices(spec))
    assert np.linalg.matrix_rank(A, tol=1e-9) == A.shape[0] == vanishing == spec.num_constraints
    assert np.abs(rows @ A.T).max() < 1e-12


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_random_points_are_feasible_with_correct_tangent_space(spec):
    rng = np.random.default_rng(1)
    for _ in range(5):
        els = random_rotation(spec, rng)
        r = embed(els, spec)
        assert feasibility_residual(r, spec) < 1e-12
        T = tangent_basis(els, spec)
        assert T.shape == (spec.lifted_dim, spec.variety_dim)
        for A in constraint_matrices(spec):
            assert np.abs((A @ r) @ T).max() < 1e-10
        for blk, el in zip(unembed(r, spec), els):
            np.testing.assert_array_equal(blk, el.coords)


@given(quats)
def test_quat_to_matrix_matches_scipy(q):
    np.testing.assert_allclose(quat_to_matrix(q), scipy_matrix(q), atol=1e-12)


@given(quats, quats)
def test_product_is_composition(a, b):
    np.testing.assert_allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b),
                               atol=1e-12)
    np.testing.assert_allclose(quat_left(a) @ b, quat_right(b) @ a, atol=1e-12)


@given(quats)
def test_matrix_to_quat_inverts_up_to_sign(q):
    back = matrix_to_quat(scipy_matrix(q))
    assert back[0] >= 0
    assert min(np.linalg.norm(back - q), np.linalg.norm(back + q)) < 1e-9


@given(quats)
def test_vec_quadratics_reproduce_rotation(q):
    H = vec_quadratics()
    np.testing.assert_allclose(np.einsum("i,kij,j->k", q, H, q), quat_to_matrix(q).reshape(-1, order="F"),
                               atol=1e-12)


@settings(max_examples=30)
@given(seeds, st.floats(0.0, 0.3))
def test_projection_returns_nearest_rotation(seed, noise):
    rng = np.random.default_rng(seed)
    spec = DomainSpec(Kind.SO3, 1)
    R = random_rotation(spec, rng)[0].matrix
    A = R + noise * rng.standard_normal((3, 3))
    P = project_to_variety(A.reshape(-1, order="F"), spec)[0].matrix
    assert RotationElement.so3(P).is_valid(1e-10)
    for _ in range(20):
        Q = random_rotation(spec, rng)[0].matrix
        assert np.linalg.norm(A - P) <= np.linalg.norm(A - Q) + 1e-12


def test_element_validation():
    with pytest.raises(InvalidQuaternion):
        RotationElement.quat([1.0, 1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        RotationElement.so3(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(DomainMismatch):
        embed([RotationElement.so2(0.3)], DomainSpec(Kind.SO2, 2))
    with pytest.raises(DomainMismatch):
        embed([RotationElement.so2(0.3)], DomainSpec(Kind.QUAT, 1))
    with pytest.raises(ValueError):
        DomainSpec(Kind.SO3, 0)


def test_so2_element_matrix_and_angle():
    el = RotationElement.so2(0.7)
    np.testing.assert_allclose(el.matrix, [[np.cos(0.7), -np.sin(0.7)], [np.sin(0.7), np.cos(0.7)]])
    assert el.angle == pytest.approx(0.7)


def test_spec_round_trip():
    for spec in SPECS:
        assert DomainSpec.from_dict(spec.to_dict()) == spec
