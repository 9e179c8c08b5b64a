import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from fedlrmc import linalg
from fedlrmc.errors import DimensionMismatch, RankDeficient, UnderdeterminedColumn


def _orth(rng, n, r):
    return np.linalg.qr(rng.standard_normal((n, r)))[0]


@given(n=st.integers(2, 30), r=st.integers(1, 6), seed=st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_thin_qr_reconstructs_with_positive_diagonal(n, r, seed):
    r = min(r, n)
    m = np.random.default_rng(seed).standard_normal((n, r))
    q, rf = linalg.thin_qr(m)
    assert np.linalg.norm(q @ rf - m) <= 1e-12 * np.linalg.norm(m)
    assert linalg.orthonormality_error(q) < 1e-13
    assert np.all(np.diag(rf) > 0)
    assert np.allclose(np.triu(rf), rf)


def test_thin_qr_matches_unique_factorization(rng):
    m = rng.standard_normal((12, 4))
    q, rf = linalg.thin_qr(m)
    # Cholesky of the Gram matrix gives the same (unique) R.
    assert np.allclose(rf, np.linalg.cholesky(m.T @ m).T, atol=1e-12)


def test_thin_qr_orthonormal_input_is_fixed_point(rng):
    u = _orth(rng, 20, 3)
    q, rf = linalg.thin_qr(u)
    assert np.array_equal(q, u)
    assert np.array_equal(rf, np.eye(3))


def test_thin_qr_rank_deficient(rng):
    a = rng.standard_normal((10, 2))
    with pytest.raises(RankDeficient):
        linalg.thin_qr(np.column_stack([a, a[:, 0] + a[:, 1]]))
    with pytest.raises(DimensionMismatch):
        linalg.thin_qr(np.ones((2, 3)))
    with pytest.raises(ValueError):
        linalg.thin_qr(np.full((3, 2), np.nan))


def test_power_iteration_matches_svd(rng):
    u = _orth(rng, 80, 3)
    v = _orth(rng, 50, 3)
    s = np.array([10.0, 5.0, 2.0])
    a = (u * s) @ v.T + 1e-3 * rng.standard_normal((80, 50))
    res = linalg.power_iteration(a, 3, 60, seed=3)
    uu, ss, _ = np.linalg.svd(a)
    assert linalg.subspace_dist_F(uu[:, :3], res.basis) < 1e-8
    assert np.allclose(res.sigma, ss[:3], rtol=1e-8)


def test_power_iteration_sparse_and_operator_agree(rng):
    a = sp.random(40, 30, density=0.3, random_state=5, format="csc")
    r1 = linalg.power_iteration(a, 2, 10, seed=1)
    r2 = linalg.power_iteration(a.toarray(), 2, 10, seed=1)
    assert np.allclose(r1.basis, r2.basis, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        linalg.power_iteration(a, 31, 2)
    with pytest.raises(ValueError):
        linalg.power_iteration(a, 2, 0)


def test_masked_column_ls_matches_lstsq(rng):
    u = _orth(rng, 30, 4)
    rows = np.sort(rng.choice(30, 12, replace=False))
    vals = rng.standard_normal(12)
    ref = np.linalg.lstsq(u[rows], vals, rcond=None)[0]
    assert np.allclose(linalg.masked_column_ls(u, rows, vals), ref, atol=1e-12)
    with pytest.raises(UnderdeterminedColumn):
        linalg.masked_column_ls(u, rows[:3], vals[:3])


def test_masked_ls_batch_matches_per_column(rng):
    u = _orth(rng, 25, 3)
    m = sp.random(25, 15, density=0.4, random_state=2, format="csc")
    m.sort_indices()
    coef, bad = linalg.masked_ls_batch(u, m.indptr, m.indices, m.data)
    for k in range(15):
        rows = m.indices[m.indptr[k]:m.indptr[k + 1]]
        vals = m.data[m.indptr[k]:m.indptr[k + 1]]
        if rows.size < 3:
            assert bad[k] and np.all(coef[:, k] == 0)
        else:
            assert np.allclose(coef[:, k], np.linalg.lstsq(u[rows], vals, rcond=None)[0], atol=1e-11)


def test_masked_ls_batch_flags_degenerate_gram_at_large_scale():
    # Scaled rank-deficient rows: the Gram check must be relative to its scale.
    u = np.zeros((6, 2))
    u[:, 0] = 1e4
    u[:, 1] = 2e4
    coef, bad = linalg.masked_ls_batch(u, np.array([0, 6]), np.arange(6), np.ones(6))
    assert bad[0]


@given(n=st.integers(4, 25), r=st.integers(1, 3), seed=st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_subspace_distance_properties(n, r, seed):
    rng = np.random.default_rng(seed)
    u1, u2 = _orth(rng, n, r), _orth(rng, n, r)
    dense = (np.eye(n) - u1 @ u1.T) @ u2
    assert abs(linalg.subspace_dist_F(u1, u2) - np.linalg.norm(dense)) < 1e-12
    assert abs(linalg.subspace_dist_2(u1, u2) - np.linalg.norm(dense, 2)) < 1e-12
    # Symmetric, basis-invariant, bounded, zero on itself.
    rot = np.linalg.qr(rng.standard_normal((r, r)))[0]
    assert abs(linalg.subspace_dist_F(u1, u2) - linalg.subspace_dist_F(u2, u1)) < 1e-12
    assert abs(linalg.subspace_dist_F(u1 @ rot, u2) - linalg.subspace_dist_F(u1, u2)) < 1e-12
    assert linalg.subspace_dist_2(u1, u2) <= 1 + 1e-12
    assert linalg.subspace_dist_F(u1, u1 @ rot) < 1e-13


def test_subspace_distance_rejects_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        linalg.subspace_dist_F(_orth(rng, 5, 2), _orth(rng, 6, 2))
