import numpy as np

_SQRT2 = np.sqrt(2.0)


def sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def svec(a):
    """Stack the upper triangle of symmetric ``a`` (last two axes) with
    off-diagonal entries scaled by sqrt(2), so that ``svec(a) @ svec(b)``
    equals ``trace(a @ b)``."""
    n = a.shape[-1]
    iu, ju = np.triu_indices(n)
    scale = np.where(iu == ju, 1.0, _SQRT2)
    return a[..., iu, ju] * scale


def smat(v, n):
    iu, ju = np.triu_indices(n)
    scale = np.where(iu == ju, 1.0, 1.0 / _SQRT2)
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., iu, ju] = v * scale
    out[..., ju, iu] = v * scale
    return out


def independent_rows(rows, tol=1e-10):
    """Indices of a linearly independent subset of ``rows`` spanning the same
    space, chosen by column-pivoted QR.  Returned in increasing order."""
    from scipy.linalg import qr

    rows = np.atleast_2d(rows)
    if rows.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, r, piv = qr(rows.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    if d.size == 0 or d[0] == 0.0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(d > tol * d[0]))
    return np.sort(piv[:rank])


def null_space(a, rtol=1e-10):
    a = np.atleast_2d(a)
    if a.shape[0] == 0:
        return np.eye(a.shape[1])
    _, s, vt = np.linalg.svd(a)
    rank = int(np.sum(s > rtol * max(s[0], 1e-300))) if s.size else 0
    return vt[rank:].T


def psd_step_length(x_chol, dx):
    """Largest alpha with X + alpha*dX PSD, given the Cholesky factor of X."""
    from scipy.linalg import solve_triangular

    t = solve_triangular(x_chol, dx, lower=True)
    t = solve_triangular(x_chol, t.T, lower=True)
    lam = np.linalg.eigvalsh(sym(t))[0]
    if lam >= 0:
        return np.inf
    return -1.0 / lam
