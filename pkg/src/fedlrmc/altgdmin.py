"""AltGDmin: exact least squares over B, one projected gradient step over U.

The iterate is ``(U, B)`` with ``U`` orthonormal (n x r) and ``B`` (r x q);
the estimate is ``X = U B``.  The objective is ``||(Y - U B)_Omega||_F^2``.
"""
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np
import scipy.sparse as sp

from . import linalg
from .errors import Diverged, DimensionMismatch, UnderdeterminedAbort
from .linalg import QRFactorization, thin_qr
from .problem import SparseObservation, split_mask
from .trace import IterationTrace

POLICIES = ("zero_column", "skip_column", "fail")
DIVERGENCE_FACTOR = 1e6


@dataclass
class AltGDminConfig:
    """Settings for :func:`run`.

    eta_rule
        ``"theory"``: ``eta = c_eta / (p * sigma_max^2)``;
        ``"empirical"``: ``eta = c_emp * p / ||Y||^2`` on the half gradient.
    sigma_source
        Where the theory rule gets ``sigma_max``: ``"estimate"`` uses
        ``||Y|| / p`` from the initialization power method, ``"true"`` uses the
        ground truth (must be passed to :func:`run`).
    mu_threshold
        Row-clipping level (as an incoherence parameter mu; rows are clipped at
        ``mu * sqrt(r/n)``).  ``"estimate"`` uses the smallest mu satisfied by
        the spectral estimate itself (so clipping is a no-op), ``"true"`` the
        ground-truth mu, or a number; ``math.inf`` disables clipping.
    """

    r: int
    T: int = 100
    eta_rule: str = "theory"
    c_eta: float = 0.5
    c_emp: float = 1.0
    sigma_source: str = "estimate"
    power_iters: int = 15
    mu_threshold: Union[str, float] = "estimate"
    split_mode: str = "reuse"
    underdetermined_policy: str = "zero_column"
    seed: int = 0
    stop_tol: Optional[float] = None
    stall_window: Optional[int] = None
    stall_ratio: float = 0.9
    keep_iterates: bool = False
    allow_large_step: bool = False

    def __post_init__(self):
        if self.r < 1 or self.T < 1 or self.power_iters < 1:
            raise ValueError("r, T and power_iters must be >= 1")
        if self.eta_rule not in ("theory", "empirical"):
            raise ValueError(f"unknown eta_rule {self.eta_rule!r}")
        if self.eta_rule == "theory" and not (0 < self.c_eta <= 0.5 or (self.c_eta > 0 and self.allow_large_step)):
            raise ValueError("c_eta must lie in (0, 0.5]; pass allow_large_step=True to probe larger steps")
        if self.c_emp <= 0:
            raise ValueError("c_emp must be > 0")
        if self.sigma_source not in ("estimate", "true"):
            raise ValueError(f"unknown sigma_source {self.sigma_source!r}")
        if self.split_mode not in ("split", "reuse"):
            raise ValueError(f"unknown split_mode {self.split_mode!r}")
        if self.underdetermined_policy not in POLICIES:
            raise ValueError(f"unknown policy {self.underdetermined_policy!r}")


@dataclass
class FactorPair:
    u: np.ndarray
    b: Optional[np.ndarray] = None

    @property
    def x(self):
        return self.u @ self.b


class InitResult(NamedTuple):
    u: np.ndarray  # U(0), orthonormal
    u_spectral: np.ndarray  # U(00), before clipping
    sigma_y: np.ndarray  # top-r singular value estimates of Y_(0)
    clip_level: float  # row-norm threshold actually applied
    mu_used: float


def project_row_incoherent(m, threshold):
    """Scale each row of ``m`` down to norm ``threshold`` if it is longer."""
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    m = np.asarray(m, float)
    norms = np.linalg.norm(m, axis=1)
    scale = np.ones_like(norms)
    over = norms > threshold
    scale[over] = threshold / norms[over]
    return m * scale[:, None]


def estimate_mu(u):
    """Smallest mu with every row norm ``<= mu * sqrt(r/n)``."""
    n, r = u.shape
    return float(np.max(np.linalg.norm(u, axis=1)) * math.sqrt(n / r))


def resolve_mu(mu_threshold, u_spectral, gt=None):
    if mu_threshold == "estimate":
        return estimate_mu(u_spectral)
    if mu_threshold == "true":
        if gt is None:
            raise ValueError("mu_threshold='true' needs the ground truth")
        return gt.mu
    return float(mu_threshold)


def clip_and_orthonormalize(u_spectral, mu):
    n, r = u_spectral.shape
    level = mu * math.sqrt(r / n)
    clipped = u_spectral if math.isinf(level) else project_row_incoherent(u_spectral, level)
    return thin_qr(clipped).q, level


def init(y, cfg, gt=None):
    """Spectral initialization, row clipping and QR."""
    n, q = y.shape
    if y.mask.nnz == 0:
        raise ValueError("initialization subset is empty")
    if cfg.r > min(n, q):
        raise DimensionMismatch(f"r={cfg.r} exceeds min(n, q)")
    pw = linalg.power_iteration(y.to_csc(), cfg.r, cfg.power_iters, seed=cfg.seed)
    mu = resolve_mu(cfg.mu_threshold, pw.basis, gt)
    u0, level = clip_and_orthonormalize(pw.basis, mu)
    return InitResult(u0, pw.basis, pw.sigma, level, mu)


def update_B(u, y, policy="zero_column", prev=None):
    """Column-wise least squares ``b_k = (U_k)^+ y_k``.

    Returns ``(B, underdetermined_count)``.  Underdetermined columns are set to
    zero (``zero_column``), keep ``prev[:, k]`` (``skip_column``) or abort
    (``fail``).
    """
    u = np.asarray(u, float)
    if u.shape[0] != y.mask.n:
        raise DimensionMismatch("U rows do not match the observation")
    b, bad = linalg.masked_ls_batch(u, y.mask.indptr, y.mask.indices, y.values)
    nbad = int(bad.sum())
    if nbad:
        if policy == "fail":
            raise UnderdeterminedAbort(f"{nbad} underdetermined columns")
        if policy == "skip_column" and prev is not None:
            b[:, bad] = prev[:, bad]
    return b, nbad


def residuals(u, b, y):
    """``(U B - Y)`` at the observed entries, in mask order."""
    m = y.mask
    return np.einsum("ij,ji->i", u[m.indices], b[:, m.cols]) - y.values


def gradient_U(u, b, y):
    """``2 ((U B)_Omega - Y) B^T`` computed from the observed entries only."""
    m = y.mask
    rho = residuals(u, b, y)
    res = sp.csc_matrix((rho, m.indices, m.indptr), shape=(m.n, m.q))
    return 2.0 * (res @ b.T)


def gd_step_qr(u, grad, eta):
    """``QR(U - eta * grad)``; returns the new basis and the factorization."""
    if not eta > 0:
        raise ValueError("eta must be > 0")
    qr = thin_qr(np.asarray(u) - eta * np.asarray(grad))
    return qr.q, qr


def step_size(cfg, p, sigma_y, gt=None):
    """Step size applied to :func:`gradient_U` (which carries the factor 2).

    ``sigma_y[0]`` estimates ``||Y||``.  The empirical constant scales the
    update direction ``((U B)_Omega - Y) B^T``, i.e. half the gradient, hence
    the division by 2.
    """
    y_norm = float(sigma_y[0])
    if cfg.eta_rule == "empirical":
        return cfg.c_emp * p / (2.0 * y_norm ** 2)
    if cfg.sigma_source == "true":
        if gt is None:
            raise ValueError("sigma_source='true' needs the ground truth")
        smax = gt.sigma_max
    else:
        smax = y_norm / p
    return cfg.c_eta / (p * smax ** 2)


def sigma_max_estimate(cfg, p, sigma_y, gt=None):
    if cfg.sigma_source == "true" and gt is not None:
        return gt.sigma_max
    return float(sigma_y[0]) / p


def diagnostics_step(u, b, gt):
    """Ground-truth diagnostics for the pair ``(U, B)``.

    ``G = U^T X*`` is formed as ``(U^T U*) B*``.  The relative error uses the
    orthogonal split ``X - X* = U (B - G) - (I - U U^T) U* B*``, so nothing of
    size n x q is ever built.
    """
    if u.shape[0] != gt.n or b.shape[1] != gt.q or u.shape[1] != b.shape[0]:
        raise DimensionMismatch("iterate and ground truth dimensions differ")
    cross = u.T @ gt.u_star
    g = cross @ gt.b_star
    bmg = float(np.linalg.norm(b - g))
    perp = gt.u_star - u @ cross
    err_sq = bmg ** 2 + float(np.sum((perp * gt.sigma_star) ** 2))
    return {
        "se_f": linalg.subspace_dist_F(gt.u_star, u),
        "se_2": linalg.subspace_dist_2(gt.u_star, u),
        "rel_frob_err": math.sqrt(err_sq) / float(np.linalg.norm(gt.sigma_star)),
        "b_minus_g": bmg,
    }


def free_diagnostics(u, b, grad):
    """Diagnostics that do not need the ground truth."""
    sv = np.linalg.svd(b, compute_uv=False) if b.size else np.zeros(1)
    return {
        "sigma_min_B": float(sv[-1]),
        "sigma_max_B": float(sv[0]),
        "max_row_u": float(np.max(np.linalg.norm(u, axis=1))),
        "max_col_b": float(np.max(np.linalg.norm(b, axis=0))),
        "grad_frob": float(np.linalg.norm(grad)),
    }


def should_stop(cfg, gt, trace):
    """Early exit once ``se_f <= stop_tol``, or once it stalls.

    Stalling means ``se_f`` failed to drop below ``stall_ratio`` times its value
    ``stall_window`` rows earlier.  Both need the ground truth.
    """
    if gt is None or len(trace) == 0:
        return False
    se = trace.se_f
    if cfg.stop_tol is not None and se[-1] <= cfg.stop_tol:
        return True
    w = getattr(cfg, "stall_window", None)
    return bool(w and len(se) > w and se[-1] > cfg.stall_ratio * se[-1 - w])


def check_divergence(b, sigma_max_hat, r):
    nb = float(np.linalg.norm(b))
    if not math.isfinite(nb) or nb > DIVERGENCE_FACTOR * sigma_max_hat * math.sqrt(r):
        raise Diverged(f"||B||_F = {nb:.3e} exceeds the divergence guard")


@dataclass
class _Schedule:
    """Which observation subset feeds which step."""

    y: SparseObservation
    split: object
    T: int

    def init_obs(self):
        return self.split[0] if self.split.mode == "split" else self.y

    def b_obs(self, t):  # B for iteration t (1-based); t = T+1 is the final refit
        if self.split.mode == "split" and t <= self.T:
            return self.split[t]
        return self.y if self.split.mode == "split" else self.split[0]

    def grad_obs(self, t):
        if self.split.mode == "split" and t <= self.T:
            return self.split[self.T + t]
        return self.y if self.split.mode == "split" else self.split[0]

    def rate(self):
        return self.y.p / len(self.split) if self.split.mode == "split" else self.y.p


def make_split(y, cfg, seed=0):
    parts = 2 * cfg.T + 1
    return split_mask(y, parts if cfg.split_mode == "split" else 1, cfg.split_mode, seed)


def run(y, cfg, split=None, gt=None):
    """Run AltGDmin for ``cfg.T`` iterations.

    In ``split`` mode subset 0 initializes, subset t feeds the B update of
    iteration t and subset T+t its gradient; the final B is refit on all data.
    Returns ``(FactorPair, IterationTrace)``; the trace has ``T + 1`` rows
    (fewer if ``cfg.stop_tol`` stops early).
    """
    if split is None:
        split = make_split(y, cfg, seed=cfg.seed)
    if split.mode != cfg.split_mode:
        raise ValueError("split mode does not match the config")
    if split.mode == "split" and len(split) < 2 * cfg.T + 1:
        raise ValueError(f"split mode needs {2 * cfg.T + 1} subsets, got {len(split)}")
    sched = _Schedule(y, split, cfg.T)
    trace = IterationTrace("altgdmin", {"T": cfg.T, "r": cfg.r})

    clock = time.perf_counter()
    ini = init(sched.init_obs(), cfg, gt)
    p = sched.rate()
    eta = step_size(cfg, p, ini.sigma_y, gt)
    smax_hat = sigma_max_estimate(cfg, p, ini.sigma_y, gt)
    u = ini.u
    b = None
    elapsed = time.perf_counter() - clock
    trace.meta.update(eta=eta, sigma_max_hat=smax_hat, mu_used=ini.mu_used, clip_level=ini.clip_level)

    for t in range(cfg.T + 1):
        clock = time.perf_counter()
        b, under = update_B(u, sched.b_obs(t + 1), cfg.underdetermined_policy, prev=b)
        check_divergence(b, smax_hat, cfg.r)
        grad = gradient_U(u, b, sched.grad_obs(t + 1))
        busy = time.perf_counter() - clock

        linalg.check_orthonormal(u)
        row = free_diagnostics(u, b, grad)
        if gt is not None:
            row.update(diagnostics_step(u, b, gt))
        trace.append(wall_s=elapsed, undercols=under, **row)
        if cfg.keep_iterates:
            trace.iterates.append(u)
        if t == cfg.T or should_stop(cfg, gt, trace):
            break

        clock = time.perf_counter()
        u, _ = gd_step_qr(u, grad, eta)
        elapsed += busy + time.perf_counter() - clock

    if cfg.stop_tol is not None and gt is not None:
        trace.meta["converged"] = bool(trace.se_f[-1] <= cfg.stop_tol)
    return FactorPair(u, b), trace
