"""Reference LRMC solvers: AltMin (exact and private/GD U-step), FactGD, ProjGD.

All of them share the spectral initialization of :mod:`fedlrmc.altgdmin` and
emit the same :class:`~fedlrmc.trace.IterationTrace` schema.
"""
import math
import time
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator

from . import altgdmin, linalg
from .altgdmin import FactorPair, check_divergence, diagnostics_step, free_diagnostics, gradient_U, update_B
from .errors import Diverged
from .linalg import thin_qr
from .trace import IterationTrace

ALGORITHMS = ("altmin", "altmin_private", "factgd", "projgd")


@dataclass
class BaselineConfig:
    """Settings shared by the baselines; init settings mirror ``AltGDminConfig``.

    ``c_inner`` scales the AltMin-private inner step ``p / ||Y||^2`` (applied
    to the half gradient, as for AltGDmin's empirical rule).  ProjGD uses
    ``projgd_eta`` if given, else ``projgd_c / p`` (``1/p`` oscillates and
    diverges on the default instance).  FactGD uses the penalty ``(lambda/4) ||U^T U - B B^T||_F^2``
    and clips at ``radius_factor`` times the initial max row/column norms.
    """

    algorithm: str
    r: int
    T: int = 100
    inner_iters: int = 10
    c_inner: float = 1.0
    c_step: float = 0.75
    lambda_balance: float = 0.5
    radius_factor: float = 1.5
    projgd_eta: Optional[float] = None
    projgd_c: float = 0.8
    projgd_power_iters: int = 5
    power_iters: int = 15
    mu_threshold: Union[str, float] = "estimate"
    underdetermined_policy: str = "zero_column"
    seed: int = 0
    stop_tol: Optional[float] = None
    stall_window: Optional[int] = None
    stall_ratio: float = 0.9
    keep_iterates: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.c_step <= 0:
            raise ValueError("c_step must be > 0")
        if self.lambda_balance < 0:
            raise ValueError("lambda_balance must be >= 0")
        if self.r < 1 or self.T < 1:
            raise ValueError("r and T must be >= 1")

    def init_config(self):
        return altgdmin.AltGDminConfig(r=self.r, T=self.T, power_iters=self.power_iters,
                                       mu_threshold=self.mu_threshold,
                                       underdetermined_policy=self.underdetermined_policy, seed=self.seed)


# --- AltMin -----------------------------------------------------------------

def altmin_u_ls(b, y, policy="zero_column", prev=None):
    """Row-wise least squares for U given B: the B-step on the transposed data.

    Returns ``(U_tilde, underdetermined_rows)`` with ``U_tilde`` n x r.
    """
    ut, bad = update_B(b.T, y.transpose(), policy, prev=None if prev is None else prev.T)
    return ut.T, bad


def altmin_iteration(u, y, policy="zero_column"):
    """One AltMin iteration: exact LS for B, exact LS for U, then QR."""
    b, _ = update_B(u, y, policy)
    u_tilde, _ = altmin_u_ls(b, y, policy)
    return b, thin_qr(u_tilde).q


def inner_step_size(p, y_norm, c_inner=1.0):
    return c_inner * p / (2.0 * y_norm ** 2)


def altmin_private_u_step(u_prev, b, y, inner_iters, eta_inner):
    """``inner_iters`` GD steps on ``||(Y - U B)_Omega||_F^2`` from ``u_prev``, then QR."""
    u = np.array(u_prev, dtype=float)
    for _ in range(inner_iters):
        u = u - eta_inner * gradient_U(u, b, y)
    return thin_qr(u).q


# --- FactGD -----------------------------------------------------------------

def balance_gradient(u, b):
    """Gradient of ``||U^T U - B B^T||_F^2`` with respect to (U, B)."""
    d = u.T @ u - b @ b.T
    return 4.0 * u @ d, -4.0 * d @ b


def data_gradients(u, b, y):
    """``(grad_X f B^T, U^T grad_X f)`` with ``grad_X f = 2 (U B - Y)_Omega``."""
    m = y.mask
    rho = altgdmin.residuals(u, b, y)
    gx = sp.csc_matrix((2.0 * rho, m.indices, m.indptr), shape=(m.n, m.q))
    return gx @ b.T, (gx.T @ u).T


def factgd_gradients(u, b, y, lam):
    gu, gb = data_gradients(u, b, y)
    d = u.T @ u - b @ b.T
    return gu + lam * u @ d, gb - lam * d @ b


def clip_rows(m, radius):
    return altgdmin.project_row_incoherent(m, radius)


def clip_cols(m, radius):
    return altgdmin.project_row_incoherent(m.T, radius).T


def factgd_balanced_start(u, b_ls):
    """Split ``U B_ls`` into factors with equal Gram matrices ``U^T U = B B^T``."""
    ev, w = np.linalg.eigh(b_ls @ b_ls.T)
    ev, w = ev[::-1], w[:, ::-1]
    if ev[-1] <= 0:
        raise linalg.RankDeficient("least-squares start for FactGD is rank deficient")
    s = np.sqrt(ev)
    return u @ w * np.sqrt(s), (w.T @ b_ls) / np.sqrt(s)[:, None]


@dataclass
class FactGDParams:
    eta: float
    p: float
    lam: float
    radius_u: float
    radius_b: float


def factgd_u_update(u, gu_data, d, prm):
    """Center-side half of the FactGD step (``d = U^T U - B B^T``)."""
    return clip_rows(u - prm.eta * (gu_data / (2.0 * prm.p) + prm.lam * u @ d), prm.radius_u)


def factgd_b_update(b, gb_data, d, prm):
    """Column-local half of the FactGD step; each node can apply it to its block."""
    return clip_cols(b - prm.eta * (gb_data / (2.0 * prm.p) - prm.lam * d @ b), prm.radius_b)


def factgd_step(u, b, gu_data, gb_data, prm):
    """Simultaneous GD step on both factors followed by incoherence clipping.

    The data part of the gradient is divided by ``2p`` (the sampling-rate
    normalization of the original FactGD code) so that ``eta ~ c / sigma_max``.
    """
    d = u.T @ u - b @ b.T
    return factgd_u_update(u, gu_data, d, prm), factgd_b_update(b, gb_data, d, prm)


def factgd_iteration(u, b, y, prm):
    gu, gb = data_gradients(u, b, y)
    return factgd_step(u, b, gu, gb, prm)


def factgd_diag_pair(u_raw, b_raw):
    """Orthonormal representation ``(Q, R B)`` of the raw factor product."""
    qr = np.linalg.qr(u_raw)
    return qr[0], qr[1] @ b_raw


# --- ProjGD -----------------------------------------------------------------

def projgd_operator(u, b, y, eta):
    """Implicit ``U B - eta * (U B - Y)_Omega`` as a LinearOperator (never densified)."""
    m = y.mask
    rho = altgdmin.residuals(u, b, y)
    s = sp.csc_matrix((eta * rho, m.indices, m.indptr), shape=(m.n, m.q))
    st = s.T.tocsc()

    def matmat(v):
        return u @ (b @ v) - s @ v

    def rmatmat(w):
        return b.T @ (u.T @ w) - st @ w

    return LinearOperator((m.n, m.q), matvec=matmat, rmatvec=rmatmat, matmat=matmat,
                          rmatmat=rmatmat, dtype=float)


def projgd_iteration(u, b, y, eta, power_iters=5):
    """Gradient step then rank-r projection via warm-started block power method."""
    op = projgd_operator(u, b, y, eta)
    u_new = linalg.power_iteration(op, u.shape[1], power_iters, start=u).basis
    b_new = op.rmatmat(u_new).T
    return u_new, b_new


# --- drivers ----------------------------------------------------------------

def _record(trace, u, b, grad, gt, elapsed, under, keep):
    row = free_diagnostics(u, b, grad) if grad is not None else free_diagnostics(u, b, np.zeros(1))
    if grad is None:
        row["grad_frob"] = math.nan
    if gt is not None:
        row.update(diagnostics_step(u, b, gt))
    trace.append(wall_s=elapsed, undercols=under, **row)
    if keep:
        trace.iterates.append(u)
    return row


def _done(cfg, gt, trace, t):
    return t == cfg.T or altgdmin.should_stop(cfg, gt, trace)


def run_baseline(y, cfg, gt=None):
    """Run the configured baseline for ``cfg.T`` iterations; returns ``(FactorPair, trace)``."""
    icfg = cfg.init_config()
    clock = time.perf_counter()
    ini = altgdmin.init(y, icfg, gt)
    p = y.p
    smax_hat = float(ini.sigma_y[0]) / p
    elapsed = time.perf_counter() - clock
    trace = IterationTrace(cfg.algorithm, {"T": cfg.T, "r": cfg.r, "mu_used": ini.mu_used})
    runner = {"altmin": _run_altmin, "altmin_private": _run_altmin, "factgd": _run_factgd,
              "projgd": _run_projgd}[cfg.algorithm]
    pair = runner(y, cfg, gt, ini, p, smax_hat, elapsed, trace)
    if cfg.stop_tol is not None and gt is not None:
        trace.meta["converged"] = bool(trace.se_f[-1] <= cfg.stop_tol)
    return pair, trace


def _run_altmin(y, cfg, gt, ini, p, smax_hat, elapsed, trace):
    private = cfg.algorithm == "altmin_private"
    eta_inner = inner_step_size(p, float(ini.sigma_y[0]), cfg.c_inner)
    trace.meta["eta_inner"] = eta_inner
    u, b = ini.u, None
    for t in range(cfg.T + 1):
        clock = time.perf_counter()
        b, under = update_B(u, y, cfg.underdetermined_policy, prev=b)
        check_divergence(b, smax_hat, cfg.r)
        busy = time.perf_counter() - clock
        row = _record(trace, u, b, gradient_U(u, b, y), gt, elapsed, under, cfg.keep_iterates)
        if _done(cfg, gt, trace, t):
            break
        clock = time.perf_counter()
        if private:
            u = altmin_private_u_step(u, b, y, cfg.inner_iters, eta_inner)
        else:
            u_tilde, _ = altmin_u_ls(b, y, cfg.underdetermined_policy)
            u = thin_qr(u_tilde).q
        elapsed += busy + time.perf_counter() - clock
    return FactorPair(u, b)


def factgd_setup(u0, b_ls, p, y_norm, cfg):
    u, b = factgd_balanced_start(u0, b_ls)
    prm = FactGDParams(eta=cfg.c_step * p / y_norm, p=p, lam=cfg.lambda_balance,
                       radius_u=cfg.radius_factor * float(np.max(np.linalg.norm(u, axis=1))),
                       radius_b=cfg.radius_factor * float(np.max(np.linalg.norm(b, axis=0))))
    return u, b, prm


def _run_factgd(y, cfg, gt, ini, p, smax_hat, elapsed, trace):
    clock = time.perf_counter()
    b_ls, under = update_B(ini.u, y, cfg.underdetermined_policy)
    u, b, prm = factgd_setup(ini.u, b_ls, p, float(ini.sigma_y[0]), cfg)
    elapsed += time.perf_counter() - clock
    trace.meta.update(eta=prm.eta, radius_u=prm.radius_u, radius_b=prm.radius_b)
    for t in range(cfg.T + 1):
        clock = time.perf_counter()
        gu, gb = data_gradients(u, b, y)
        busy = time.perf_counter() - clock
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(b))):
            raise Diverged("FactGD factors are no longer finite")
        uq, bq = factgd_diag_pair(u, b)
        check_divergence(bq, smax_hat, cfg.r)
        d = u.T @ u - b @ b.T
        row = _record(trace, uq, bq, gu + prm.lam * u @ d, gt, elapsed, under if t == 0 else 0,
                      cfg.keep_iterates)
        if _done(cfg, gt, trace, t):
            break
        clock = time.perf_counter()
        u, b = factgd_step(u, b, gu, gb, prm)
        elapsed += busy + time.perf_counter() - clock
    return FactorPair(*factgd_diag_pair(u, b))


def _run_projgd(y, cfg, gt, ini, p, smax_hat, elapsed, trace):
    eta = cfg.projgd_eta if cfg.projgd_eta is not None else cfg.projgd_c / p
    trace.meta["eta"] = eta
    clock = time.perf_counter()
    u = ini.u
    b, under = update_B(u, y, cfg.underdetermined_policy)
    elapsed += time.perf_counter() - clock
    for t in range(cfg.T + 1):
        check_divergence(b, smax_hat, cfg.r)
        row = _record(trace, u, b, None, gt, elapsed, under if t == 0 else 0, cfg.keep_iterates)
        if _done(cfg, gt, trace, t):
            break
        clock = time.perf_counter()
        u, b = projgd_iteration(u, b, y, eta, cfg.projgd_power_iters)
        elapsed += time.perf_counter() - clock
    return FactorPair(u, b)
