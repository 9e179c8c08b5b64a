"""Planted low-rank instances, Bernoulli masks, sample splits and noise.

All randomness in an experiment flows through here (see ``_random`` for the
stream layout), so equal seeds give bit-identical instances.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import _random
from .errors import DimensionMismatch, InvalidDimensions
from .linalg import thin_qr


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Planted rank-r matrix ``X* = U* diag(sigma*) V*^T``.

    ``mu`` is the tight incoherence level (smallest value satisfying both row
    and column bounds) and ``kappa = sigma*[0] / sigma*[-1]``.
    """

    u_star: np.ndarray  # n x r
    sigma_star: np.ndarray  # r, nonincreasing
    v_star: np.ndarray  # q x r

    def __post_init__(self):
        n, r = self.u_star.shape
        if self.v_star.shape[1] != r or self.sigma_star.shape != (r,):
            raise DimensionMismatch("inconsistent factor shapes")

    @property
    def n(self):
        return self.u_star.shape[0]

    @property
    def q(self):
        return self.v_star.shape[0]

    @property
    def r(self):
        return self.u_star.shape[1]

    @cached_property
    def mu_u(self):
        return float(np.max(np.linalg.norm(self.u_star, axis=1)) * np.sqrt(self.n / self.r))

    @cached_property
    def mu_v(self):
        return float(np.max(np.linalg.norm(self.v_star, axis=1)) * np.sqrt(self.q / self.r))

    @property
    def mu(self):
        return max(self.mu_u, self.mu_v)

    @property
    def kappa(self):
        return float(self.sigma_star[0] / self.sigma_star[-1])

    @property
    def sigma_max(self):
        return float(self.sigma_star[0])

    @property
    def sigma_min(self):
        return float(self.sigma_star[-1])

    @cached_property
    def b_star(self):
        """``diag(sigma*) V*^T`` (r x q), so that ``X* = U* B*``."""
        return self.sigma_star[:, None] * self.v_star.T

    def dense(self):
        return self.u_star @ self.b_star

    def entries(self, rows, cols):
        """X* evaluated at the given (row, col) pairs without densifying."""
        return np.einsum("ij,ji->i", self.u_star[rows], self.b_star[:, cols])


def gen_ground_truth(n, q, r, spectrum="gaussian", kappa=1.0, seed=0):
    """Draw a planted rank-r instance.

    ``spectrum="gaussian"``: U* is an orthonormalized Gaussian n x r matrix and
    B* an r x q Gaussian matrix; the singular factors are read off the SVD of
    B*.  ``spectrum="linear"``: singular values evenly spaced in
    ``[1/kappa, 1]`` with orthonormalized Gaussian singular vectors.
    """
    if not (isinstance(r, (int, np.integer)) and 1 <= r <= min(n, q)):
        raise InvalidDimensions(f"need 1 <= r <= min(n, q); got n={n}, q={q}, r={r}")
    rng = _random.make_rng(seed, _random.GROUND_TRUTH)
    u0 = thin_qr(rng.standard_normal((n, r))).q
    if spectrum == "gaussian":
        b = rng.standard_normal((r, q))
        w, s, vt = np.linalg.svd(b, full_matrices=False)
        return GroundTruth(u0 @ w, s, vt.T.copy())
    if spectrum == "linear":
        if kappa < 1:
            raise InvalidDimensions("kappa must be >= 1")
        v = thin_qr(rng.standard_normal((q, r))).q
        s = np.linspace(1.0, 1.0 / kappa, r) if r > 1 else np.ones(1)
        return GroundTruth(u0, s, v)
    raise ValueError(f"unknown spectrum {spectrum!r}")


@dataclass(frozen=True, eq=False)
class ObservationMask:
    """Observed index set stored column-compressed: rows of column k are
    ``indices[indptr[k]:indptr[k+1]]``, strictly increasing."""

    n: int
    q: int
    indptr: np.ndarray
    indices: np.ndarray
    p: float = 1.0

    def __post_init__(self):
        if self.indptr.shape != (self.q + 1,) or self.indptr[0] != 0 or self.indptr[-1] != self.indices.size:
            raise DimensionMismatch("indptr does not match indices")

    @property
    def nnz(self):
        return int(self.indices.size)

    @cached_property
    def cols(self):
        """Column index of every stored entry."""
        return np.repeat(np.arange(self.q), np.diff(self.indptr))

    def column(self, k):
        return self.indices[self.indptr[k]:self.indptr[k + 1]]

    def counts(self):
        return np.diff(self.indptr)

    def pairs(self):
        return set(zip(self.indices.tolist(), self.cols.tolist()))

    def select(self, keep):
        """Sub-mask of the entries flagged in the boolean array ``keep``."""
        keep = np.asarray(keep, bool)
        counts = np.bincount(self.cols[keep], minlength=self.q)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return ObservationMask(self.n, self.q, indptr, self.indices[keep], self.p)

    def transpose_order(self):
        """Permutation putting entries in row-major order, and the row pointer."""
        order = np.lexsort((self.cols, self.indices))
        rowptr = np.concatenate([[0], np.cumsum(np.bincount(self.indices, minlength=self.n))])
        return order, rowptr


def sample_mask(n, q, p, seed=0):
    """Include each (j, k) independently with probability p."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    rng = _random.make_rng(seed, _random.MASK)
    if p == 1:
        keep = np.ones((q, n), bool)
    else:
        keep = rng.random((q, n)) < p  # one row per column of X
    counts = keep.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = np.nonzero(keep)[1].astype(np.int64)
    return ObservationMask(n, q, indptr, indices, float(p))


@dataclass(frozen=True, eq=False)
class SparseObservation:
    """Observed values ``Y = X*_Omega (+ W_Omega)`` aligned with ``mask``."""

    mask: ObservationMask
    values: np.ndarray
    noise_level: float = 0.0

    def __post_init__(self):
        if self.values.shape != (self.mask.nnz,):
            raise DimensionMismatch("values must align with the mask entries")

    @property
    def shape(self):
        return (self.mask.n, self.mask.q)

    @property
    def p(self):
        return self.mask.p

    def to_csc(self):
        m = self.mask
        return sp.csc_matrix((self.values, m.indices, m.indptr), shape=(m.n, m.q))

    def dense(self):
        return self.to_csc().toarray()

    def restrict(self, keep):
        keep = np.asarray(keep, bool)
        return SparseObservation(self.mask.select(keep), self.values[keep], self.noise_level)

    def transpose(self):
        """The observation of ``X*^T`` (rows and columns swapped)."""
        return self._transposed

    @cached_property
    def _transposed(self):
        order, rowptr = self.mask.transpose_order()
        mask = ObservationMask(self.mask.q, self.mask.n, rowptr.astype(np.int64),
                               self.mask.cols[order], self.mask.p)
        return SparseObservation(mask, self.values[order], self.noise_level)

    def columns(self, cols):
        """Observation restricted to a contiguous-or-not list of columns
        (columns are renumbered 0..len(cols)-1)."""
        cols = np.asarray(cols, dtype=np.int64)
        m = self.mask
        starts, stops = m.indptr[cols], m.indptr[cols + 1]
        take = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)]) if cols.size else np.zeros(0, np.int64)
        indptr = np.concatenate([[0], np.cumsum(stops - starts)]).astype(np.int64)
        sub = ObservationMask(m.n, cols.size, indptr, m.indices[take], m.p)
        return SparseObservation(sub, self.values[take], self.noise_level)


@dataclass(frozen=True, eq=False)
class SampleSplit:
    """``parts`` subsets of an observation; disjoint in ``split`` mode, the
    parent repeated in ``reuse`` mode."""

    subsets: list
    mode: str
    assignment: np.ndarray = field(default=None)  # subset id per parent entry (split mode)

    def __len__(self):
        return len(self.subsets)

    def __getitem__(self, i):
        return self.subsets[i]


def split_mask(obs, parts, mode="split", seed=0):
    """Partition ``obs`` into ``parts`` subsets by uniform independent assignment."""
    if parts < 1:
        raise ValueError("parts must be >= 1")
    if mode == "reuse":
        return SampleSplit([obs] * parts, "reuse")
    if mode != "split":
        raise ValueError(f"unknown split mode {mode!r}")
    rng = _random.make_rng(seed, _random.SPLIT)
    assign = rng.integers(0, parts, size=obs.mask.nnz) if parts > 1 else np.zeros(obs.mask.nnz, np.int64)
    subsets = [obs.restrict(assign == i) for i in range(parts)]
    return SampleSplit(subsets, "split", assign)


def observe(gt, mask, eps_noise=0.0, noise_shape="signed_uniform", seed=0):
    """Values ``x*_jk (1 + eps_noise * s_jk)`` on the mask, ``|s_jk| <= 1``.

    ``noise_shape`` is ``signed_uniform`` (s uniform on [-1, 1]) or
    ``rademacher`` (s = +-1, which makes the relative bound tight).
    """
    if (mask.n, mask.q) != (gt.n, gt.q):
        raise DimensionMismatch("mask and ground truth dimensions differ")
    if eps_noise < 0:
        raise ValueError("eps_noise must be >= 0")
    x = gt.entries(mask.indices, mask.cols)
    if eps_noise > 0:
        rng = _random.make_rng(seed, _random.NOISE)
        if noise_shape == "signed_uniform":
            s = rng.uniform(-1.0, 1.0, size=x.size)
        elif noise_shape == "rademacher":
            s = rng.choice(np.array([-1.0, 1.0]), size=x.size)
        else:
            raise ValueError(f"unknown noise shape {noise_shape!r}")
        x = x * (1.0 + eps_noise * s)
    return SparseObservation(mask, x, float(eps_noise))
