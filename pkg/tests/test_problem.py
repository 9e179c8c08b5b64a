import numpy as np
import pytest

from fedlrmc.errors import DimensionMismatch, InvalidDimensions
from fedlrmc.problem import gen_ground_truth, observe, sample_mask, split_mask


def test_ground_truth_is_orthonormal_and_consistent():
    gt = gen_ground_truth(40, 30, 4, seed=3)
    assert np.allclose(gt.u_star.T @ gt.u_star, np.eye(4), atol=1e-13)
    assert np.allclose(gt.v_star.T @ gt.v_star, np.eye(4), atol=1e-13)
    assert np.all(np.diff(gt.sigma_star) <= 0)
    x = gt.dense()
    assert np.allclose(np.linalg.svd(x, compute_uv=False)[:4], gt.sigma_star)
    assert gt.kappa == pytest.approx(gt.sigma_star[0] / gt.sigma_star[-1])
    # Tight incoherence: some row attains the bound.
    row = np.max(np.linalg.norm(gt.u_star, axis=1))
    assert gt.mu_u == pytest.approx(row * np.sqrt(40 / 4))
    assert gt.mu >= 1.0


def test_ground_truth_linear_spectrum_kappa():
    gt = gen_ground_truth(30, 30, 5, spectrum="linear", kappa=4.0, seed=0)
    assert gt.kappa == pytest.approx(4.0)
    with pytest.raises(InvalidDimensions):
        gen_ground_truth(30, 30, 5, spectrum="linear", kappa=0.5)


def test_ground_truth_validation_and_determinism():
    with pytest.raises(InvalidDimensions):
        gen_ground_truth(5, 5, 6)
    with pytest.raises(ValueError):
        gen_ground_truth(5, 5, 2, spectrum="cauchy")
    a, b = gen_ground_truth(20, 10, 2, seed=9), gen_ground_truth(20, 10, 2, seed=9)
    assert np.array_equal(a.u_star, b.u_star) and np.array_equal(a.v_star, b.v_star)


def test_entries_match_dense():
    gt = gen_ground_truth(15, 12, 2, seed=1)
    rows, cols = np.array([0, 3, 14]), np.array([11, 0, 5])
    assert np.allclose(gt.entries(rows, cols), gt.dense()[rows, cols])


def test_mask_rate_and_layout():
    m = sample_mask(200, 150, 0.3, seed=4)
    assert abs(m.nnz / (200 * 150) - 0.3) < 0.01
    for k in (0, 77, 149):
        col = m.column(k)
        assert np.all(np.diff(col) > 0)
    assert m.counts().sum() == m.nnz
    full = sample_mask(5, 4, 1.0)
    assert full.nnz == 20
    with pytest.raises(ValueError):
        sample_mask(5, 5, 0.0)


def test_observation_noise_is_relative_and_bounded():
    gt = gen_ground_truth(30, 30, 2, seed=2)
    m = sample_mask(30, 30, 0.5, seed=3)
    clean = observe(gt, m)
    noisy = observe(gt, m, 0.1, "rademacher", seed=4)
    rel = np.abs(noisy.values - clean.values) / np.abs(clean.values)
    assert np.allclose(rel, 0.1)
    uni = observe(gt, m, 0.1, "signed_uniform", seed=4)
    assert np.all(np.abs(uni.values - clean.values) <= 0.1 * np.abs(clean.values) + 1e-15)
    assert np.allclose(clean.dense()[m.indices, m.cols], gt.dense()[m.indices, m.cols])
    with pytest.raises(ValueError):
        observe(gt, m, -1.0)
    with pytest.raises(DimensionMismatch):
        observe(gt, sample_mask(31, 30, 0.5))


def test_transpose_roundtrip():
    gt = gen_ground_truth(20, 13, 2, seed=0)
    y = observe(gt, sample_mask(20, 13, 0.4, seed=1))
    yt = y.transpose()
    assert np.array_equal(yt.dense(), y.dense().T)
    assert np.array_equal(yt.transpose().dense(), y.dense())


def test_columns_slice():
    gt = gen_ground_truth(20, 13, 2, seed=0)
    y = observe(gt, sample_mask(20, 13, 0.4, seed=1))
    cols = np.array([2, 7, 8])
    assert np.array_equal(y.columns(cols).dense(), y.dense()[:, cols])


def test_split_is_a_partition():
    gt = gen_ground_truth(30, 30, 2, seed=0)
    y = observe(gt, sample_mask(30, 30, 0.6, seed=1))
    sp_ = split_mask(y, 7, "split", seed=5)
    assert len(sp_) == 7
    pairs = [s.mask.pairs() for s in sp_.subsets]
    assert sum(len(p) for p in pairs) == y.mask.nnz
    assert set().union(*pairs) == y.mask.pairs()
    for i in range(7):
        for j in range(i + 1, 7):
            assert not pairs[i] & pairs[j]
    total = sum(s.dense() for s in sp_.subsets)
    assert np.array_equal(total, y.dense())
    reuse = split_mask(y, 3, "reuse")
    assert all(s is y for s in reuse.subsets)
    with pytest.raises(ValueError):
        split_mask(y, 0)
