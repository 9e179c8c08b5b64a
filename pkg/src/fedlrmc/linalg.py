"""Dense and masked linear-algebra kernels shared by all solvers.

Conventions: matrices are float64 ``ndarray``; an "orthonormal basis" is an
n x r array with orthonormal columns; masks are stored column-compressed
(``indptr``, ``indices``) exactly like ``scipy.sparse.csc_matrix``.
"""
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import aslinearoperator

from . import _random
from .errors import DimensionMismatch, RankDeficient, UnderdeterminedColumn

RANK_TOL = 1e-12
GRAM_TOL = 1e-12
ORTHO_TOL = 1e-10
# Inputs this close to orthonormal are returned unchanged by thin_qr.
_ALREADY_ORTHONORMAL = 4 * np.finfo(float).eps


class QRFactorization(NamedTuple):
    q: np.ndarray
    r_factor: np.ndarray


class PowerResult(NamedTuple):
    basis: np.ndarray
    sigma: np.ndarray  # top-r singular value estimates, nonincreasing


def as_dense(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def orthonormality_error(u):
    u = np.asarray(u)
    return float(np.max(np.abs(u.T @ u - np.eye(u.shape[1]))))


def check_orthonormal(u, tol=ORTHO_TOL):
    err = orthonormality_error(u)
    if err > tol:
        raise ValueError(f"columns are not orthonormal (max |U'U - I| = {err:.3e})")
    return u


def thin_qr(m):
    """Householder thin QR with a nonnegative diagonal in R.

    The sign convention makes the factorization unique, and an input that is
    already orthonormal to rounding is returned as ``(m, I)`` so a zero step
    is an exact fixed point.

    Raises
    ------
    RankDeficient
        If ``sigma_min(m) <= 1e-12 * sigma_max(m)``.
    """
    m = as_dense(m)
    n, r = m.shape
    if n < r:
        raise DimensionMismatch(f"thin_qr needs rows >= cols, got {m.shape}")
    if orthonormality_error(m) <= _ALREADY_ORTHONORMAL:
        return QRFactorization(m.copy(), np.eye(r))
    q, rf = np.linalg.qr(m, mode="reduced")
    signs = np.sign(np.diag(rf))
    signs[signs == 0] = 1.0
    q = q * signs
    rf = rf * signs[:, None]
    sv = np.linalg.svd(rf, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= RANK_TOL * sv[0]:
        raise RankDeficient(f"sigma_min/sigma_max = {sv[-1] / sv[0] if sv[0] else 0:.3e}")
    return QRFactorization(q, rf)


def qr_basis(m):
    return thin_qr(m).q


def gram_sweep(op, u):
    """One power-method sweep ``A (A^T U)``; shared with the federated nodes."""
    return op.matmat(op.rmatmat(u))


def random_start(n, r, seed):
    rng = _random.make_rng(seed, _random.POWER)
    return thin_qr(rng.standard_normal((n, r))).q


def sigma_from_sweep(u_prev, swept):
    """Singular values of A^T U_prev from U_prev^T A A^T U_prev."""
    ev = np.linalg.eigvalsh(0.5 * (u_prev.T @ swept + swept.T @ u_prev))
    return np.sqrt(np.clip(ev[::-1], 0.0, None))


def power_iteration(apply, r, iters, seed=0, start=None):
    """Block power method for the top-r left singular subspace of ``apply``.

    ``apply`` is anything ``scipy.sparse.linalg.aslinearoperator`` accepts
    (dense array, sparse matrix, LinearOperator).  The block is re-orthonormalized
    with :func:`thin_qr` after every sweep.
    """
    op = aslinearoperator(apply)
    n, q = op.shape
    if not 1 <= r <= min(n, q):
        raise DimensionMismatch(f"r={r} must be in [1, min{op.shape}]")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    u = random_start(n, r, seed) if start is None else check_orthonormal(np.asarray(start, float))
    sigma = None
    for _ in range(iters):
        swept = gram_sweep(op, u)
        sigma = sigma_from_sweep(u, swept)
        u = thin_qr(swept).q
    return PowerResult(u, sigma)


def power_top_r(apply, r, iters, seed=0):
    return power_iteration(apply, r, iters, seed).basis


def masked_column_ls(u, rows, values):
    """Least-squares coefficients of ``values`` on the rows ``rows`` of ``u``.

    Solved through the r x r normal equations.
    """
    u = np.asarray(u, float)
    rows = np.asarray(rows, dtype=np.intp)
    values = np.asarray(values, float)
    r = u.shape[1]
    if rows.size < r:
        raise UnderdeterminedColumn(f"{rows.size} observations for {r} unknowns")
    uk = u[rows]
    gram = uk.T @ uk
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= GRAM_TOL * max(ev[-1], 1.0):
        raise UnderdeterminedColumn("restricted Gram matrix is singular")
    return np.linalg.solve(gram, uk.T @ values)


def masked_ls_batch(u, indptr, indices, values):
    """Solve :func:`masked_column_ls` for every column of a compressed mask.

    Returns ``(coef, bad)`` where ``coef`` is r x q and ``bad`` flags columns
    that are underdetermined (their coefficients are left at zero).
    """
    u = np.asarray(u, float)
    indptr = np.asarray(indptr)
    n, r = u.shape
    ncols = indptr.size - 1
    counts = np.diff(indptr)
    # Row k of the transposed mask picks the observed rows of column k.
    sel = sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(ncols, n))
    grams = np.asarray(sel @ (u[:, :, None] * u[:, None, :]).reshape(n, r * r)).reshape(ncols, r, r)
    vals = sp.csr_matrix((np.asarray(values, float), indices, indptr), shape=(ncols, n))
    rhs = np.asarray(vals @ u)
    bad = counts < r
    ok = ~bad
    if np.any(ok):
        ev = np.linalg.eigvalsh(grams[ok])
        bad[ok] = ev[:, 0] <= GRAM_TOL * np.maximum(ev[:, -1], 1.0)
    grams[bad] = np.eye(r)
    rhs[bad] = 0.0
    coef = np.linalg.solve(grams, rhs[:, :, None])[:, :, 0]
    return coef.T.copy(), bad


def _check_pair(u1, u2):
    u1 = np.asarray(u1, float)
    u2 = np.asarray(u2, float)
    if u1.shape != u2.shape:
        raise DimensionMismatch(f"{u1.shape} vs {u2.shape}")
    return u1, u2


def _residual(u1, u2):
    return u2 - u1 @ (u1.T @ u2)


def subspace_dist_F(u1, u2):
    """``||(I - U1 U1^T) U2||_F`` evaluated without forming an n x n matrix."""
    u1, u2 = _check_pair(u1, u2)
    return float(np.linalg.norm(_residual(u1, u2)))


def subspace_dist_2(u1, u2):
    u1, u2 = _check_pair(u1, u2)
    return float(np.linalg.norm(_residual(u1, u2), 2))
