"""Deterministic simulator of a star-topology federation.

``gamma`` nodes each hold a disjoint block of columns of ``Y``; a center
aggregates, runs QR/GD and broadcasts.  Rounds are synchronous; every transfer
is recorded in a :class:`MessageLedger` by scalar count.  Center reductions
always add node contributions in node-id order, so results do not depend on
how node work is scheduled.
"""
import csv
import json
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np
from scipy.sparse.linalg import aslinearoperator

from . import altgdmin, baselines, linalg
from .altgdmin import FactorPair, check_divergence, diagnostics_step, free_diagnostics
from .errors import DimensionMismatch, UnsupportedFederation
from .linalg import thin_qr
from .trace import IterationTrace

KINDS = ("partial_gradient", "power_partial", "broadcast_u", "raw_column", "b_column",
         "gram_partial", "broadcast_gram", "scalar_stat")
PRIVATE_LEAKS = ("raw_column", "b_column")
FEDERATED_ALGORITHMS = ("altgdmin", "altmin_private", "factgd")
LEDGER_FIELDS = ("round", "direction", "node", "kind", "scalars")


@dataclass
class Topology:
    """``gamma`` nodes; ``partition[l]`` lists the columns held by node l."""

    gamma: int
    partition: List[np.ndarray]

    def __post_init__(self):
        if self.gamma < 1 or len(self.partition) != self.gamma:
            raise ValueError("partition must have exactly gamma blocks")

    @classmethod
    def even(cls, q, gamma):
        """Contiguous blocks; equal sizes ``q/gamma`` when q is divisible by gamma."""
        if not 1 <= gamma <= q:
            raise ValueError("need 1 <= gamma <= q")
        return cls(gamma, [np.asarray(b, dtype=np.int64) for b in np.array_split(np.arange(q), gamma)])

    def validate(self, q):
        allcols = np.sort(np.concatenate(self.partition))
        if allcols.size != q or np.any(allcols != np.arange(q)):
            raise ValueError("blocks do not partition the columns")

    def gather(self, blocks, q):
        """Reassemble column blocks (observer-side; not a message)."""
        out = np.empty((blocks[0].shape[0], q))
        for cols, blk in zip(self.partition, blocks):
            out[:, cols] = blk
        return out


class Message(NamedTuple):
    round: int
    direction: str  # "up" (node -> center) or "down"
    node: int
    kind: str
    scalars: int
    exchange: int = 0
    phase: str = "iterate"


class MessageLedger:
    """Append-only record of node <-> center transfers."""

    def __init__(self, private=True):
        self.messages = []
        self.private = private

    def log(self, msg):
        if msg.kind not in KINDS or msg.direction not in ("up", "down"):
            raise ValueError(f"bad message {msg}")
        if msg.scalars < 0:
            raise ValueError("negative scalar count")
        self.messages.append(msg)

    def __len__(self):
        return len(self.messages)

    def select(self, phase=None, direction=None, kind=None):
        return [m for m in self.messages if (phase is None or m.phase == phase)
                and (direction is None or m.direction == direction) and (kind is None or m.kind == kind)]

    @property
    def totals(self):
        t = {"up": 0, "down": 0}
        for m in self.messages:
            t[m.direction] += m.scalars
        return t

    def total(self, direction, phase=None):
        return sum(m.scalars for m in self.select(phase=phase, direction=direction))

    @property
    def privacy_violations(self):
        if not self.private:
            return 0
        return sum(1 for m in self.messages if m.direction == "up" and m.kind in PRIVATE_LEAKS)

    def rounds(self, phase="iterate"):
        return sorted({m.round for m in self.select(phase=phase)})

    def exchanges_per_round(self, phase="iterate"):
        ex = defaultdict(set)
        for m in self.select(phase=phase):
            ex[m.round].add(m.exchange)
        return {r: len(v) for r, v in sorted(ex.items())}

    def per_round(self, direction, phase="iterate"):
        acc = Counter()
        for m in self.select(phase=phase, direction=direction):
            acc[m.round] += m.scalars
        return dict(sorted(acc.items()))

    def summary(self):
        by_phase = {}
        for ph in sorted({m.phase for m in self.messages}):
            by_phase[ph] = {"up": self.total("up", ph), "down": self.total("down", ph),
                            "rounds": len(self.rounds(ph))}
        kinds = Counter()
        for m in self.messages:
            kinds[f"{m.direction}:{m.kind}"] += m.scalars
        ex = self.exchanges_per_round()
        totals = self.totals
        return {
            "messages": len(self.messages),
            "up_scalars": totals["up"],
            "down_scalars": totals["down"],
            "up_bytes": 8 * totals["up"],
            "down_bytes": 8 * totals["down"],
            "by_phase": by_phase,
            "by_kind": dict(sorted(kinds.items())),
            "exchanges_per_round": sorted(set(ex.values())),
            "privacy_violations": self.privacy_violations,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LEDGER_FIELDS)
            for m in self.messages:
                w.writerow([m.round, m.direction, m.node, m.kind, m.scalars])

    @staticmethod
    def read_csv(path):
        """Rows of an exported ledger as tuples (round, direction, node, kind, scalars)."""
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            if tuple(next(rd)) != LEDGER_FIELDS:
                raise ValueError("unexpected ledger header")
            return [(int(a), b, int(c), d, int(e)) for a, b, c, d, e in rd]


class Federation:
    """Nodes, center and ledger for one federated run.

    Node state is the column block of every observation subset it is shown
    (sliced lazily) plus its block of B.  The orchestrator is the only writer
    to the ledger.
    """

    def __init__(self, y, topo, private=True):
        topo.validate(y.mask.q)
        self.y = y
        self.topo = topo
        self.n, self.q = y.shape
        self.ledger = MessageLedger(private)
        self.round = -1
        self.exchange = 0
        self.phase = "init"
        self._local = {}

    # -- bookkeeping
    def begin_round(self, phase):
        self.round += 1
        self.exchange = 0
        self.phase = phase

    def next_exchange(self):
        self.exchange += 1

    def _log(self, direction, node, kind, scalars):
        self.ledger.log(Message(self.round, direction, node, kind, int(scalars), self.exchange, self.phase))

    def up(self, kind, sizes):
        for node, s in enumerate(sizes):
            self._log("up", node, kind, s)

    def broadcast(self, kind, scalars):
        for node in range(self.topo.gamma):
            self._log("down", node, kind, scalars)

    def local(self, obs):
        key = id(obs)
        if key not in self._local:
            self._local[key] = (obs, [obs.columns(cols) for cols in self.topo.partition])
        return self._local[key][1]

    def sparse_size(self, obs):
        """Upstream size of an n x r partial: ``min(n, local nnz) * r`` scalars per r."""
        return [min(self.n, blk.mask.nnz) for blk in self.local(obs)]

    @staticmethod
    def reduce(parts):
        total = parts[0].copy()
        for part in parts[1:]:
            total = total + part
        return total

    # -- protocol primitives
    def power_sweep(self, obs, u):
        parts = [linalg.gram_sweep(aslinearoperator(blk.to_csc()), u) for blk in self.local(obs)]
        self.up("power_partial", [s * u.shape[1] for s in self.sparse_size(obs)])
        return self.reduce(parts)

    def local_ls(self, u, obs, policy, prev_blocks=None):
        out, under = [], 0
        for i, blk in enumerate(self.local(obs)):
            prev = None if prev_blocks is None else prev_blocks[i]
            b, k = altgdmin.update_B(u, blk, policy, prev=prev)
            out.append(b)
            under += k
        return out, under

    def partial_gradients(self, u, b_blocks, obs):
        parts = [altgdmin.gradient_U(u, b, blk) for b, blk in zip(b_blocks, self.local(obs))]
        self.up("partial_gradient", [s * u.shape[1] for s in self.sparse_size(obs)])
        return self.reduce(parts)

    def gram_partials(self, b_blocks):
        r = b_blocks[0].shape[0]
        parts = [b @ b.T for b in b_blocks]
        self.up("gram_partial", [r * r] * len(parts))
        return self.reduce(parts)

    def gather_b(self, b_blocks):
        return self.topo.gather(b_blocks, self.q)


def federated_power_init(y, topo, r, iters, seed=0, fed=None):
    """Federated block power method on ``Y Y^T``.

    Each round every node uploads ``Y_l (Y_l^T U)`` and the center broadcasts
    ``QR`` of the node-ordered sum.  The start block comes from the shared seed,
    so it costs no communication.  Returns ``(PowerResult, ledger)``.
    """
    fed = fed or Federation(y, topo)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    u = linalg.random_start(y.shape[0], r, seed)
    sigma = None
    for _ in range(iters):
        fed.begin_round("init")
        swept = fed.power_sweep(y, u)
        sigma = linalg.sigma_from_sweep(u, swept)
        u = thin_qr(swept).q
        fed.broadcast("broadcast_u", u.size)
    return linalg.PowerResult(u, sigma), fed.ledger


def _federated_init(fed, obs, r, power_iters, seed, mu_threshold, gt):
    pw, _ = federated_power_init(obs, fed.topo, r, power_iters, seed, fed=fed)
    # Row clipping and QR are deterministic, so every node repeats them locally.
    mu = altgdmin.resolve_mu(mu_threshold, pw.basis, gt)
    u0, level = altgdmin.clip_and_orthonormalize(pw.basis, mu)
    return altgdmin.InitResult(u0, pw.basis, pw.sigma, level, mu)


def federated_altgdmin_round(fed, u, eta, b_obs, g_obs, policy, prev_blocks=None):
    """One AltGDmin round: local LS + partial gradients up, GD/QR at the center, broadcast.

    Returns ``(u_next, b_blocks, grad, underdetermined)``; ``b_blocks`` never
    leave the nodes.
    """
    fed.begin_round("iterate")
    b_blocks, under = fed.local_ls(u, b_obs, policy, prev_blocks)
    grad = fed.partial_gradients(u, b_blocks, g_obs)
    u_next, _ = altgdmin.gd_step_qr(u, grad, eta)
    fed.broadcast("broadcast_u", u_next.size)
    return u_next, b_blocks, grad, under


def _run_altgdmin(fed, cfg, split, gt):
    if split is None:
        split = altgdmin.make_split(fed.y, cfg, seed=cfg.seed)
    sched = altgdmin._Schedule(fed.y, split, cfg.T)
    trace = IterationTrace("altgdmin", {"T": cfg.T, "r": cfg.r, "gamma": fed.topo.gamma})
    clock = time.perf_counter()
    ini = _federated_init(fed, sched.init_obs(), cfg.r, cfg.power_iters, cfg.seed, cfg.mu_threshold, gt)
    p = sched.rate()
    eta = altgdmin.step_size(cfg, p, ini.sigma_y, gt)
    smax_hat = altgdmin.sigma_max_estimate(cfg, p, ini.sigma_y, gt)
    elapsed = time.perf_counter() - clock
    trace.meta.update(eta=eta, sigma_max_hat=smax_hat, mu_used=ini.mu_used)
    u, blocks = ini.u, None
    for t in range(cfg.T + 1):
        clock = time.perf_counter()
        last = t == cfg.T
        if last:
            # Final refit for the returned estimate; no U update, no messages.
            blocks, under = fed.local_ls(u, sched.b_obs(t + 1), cfg.underdetermined_policy, blocks)
            parts = [altgdmin.gradient_U(u, b, blk) for b, blk in zip(blocks, fed.local(sched.grad_obs(t + 1)))]
            grad, u_next = fed.reduce(parts), None
        else:
            u_next, blocks, grad, under = federated_altgdmin_round(
                fed, u, eta, sched.b_obs(t + 1), sched.grad_obs(t + 1), cfg.underdetermined_policy, blocks)
        busy = time.perf_counter() - clock
        b = fed.gather_b(blocks)
        check_divergence(b, smax_hat, cfg.r)
        linalg.check_orthonormal(u)
        row = free_diagnostics(u, b, grad)
        if gt is not None:
            row.update(diagnostics_step(u, b, gt))
        trace.append(wall_s=elapsed, undercols=under, **row)
        if cfg.keep_iterates:
            trace.iterates.append(u)
        elapsed += busy
        if last or (cfg.stop_tol is not None and gt is not None and row["se_f"] <= cfg.stop_tol):
            if not last:
                _rollback_round(fed)
            break
        u = u_next
    if cfg.stop_tol is not None and gt is not None:
        trace.meta["converged"] = bool(trace.se_f[-1] <= cfg.stop_tol)
    return FactorPair(u, b), trace


def _rollback_round(fed):
    """Drop the messages of a round whose result was discarded by early stopping."""
    fed.ledger.messages = [m for m in fed.ledger.messages if m.round != fed.round]
    fed.round -= 1


def _run_altmin_private(fed, cfg, gt):
    y = fed.y
    trace = IterationTrace("altmin_private", {"T": cfg.T, "r": cfg.r, "gamma": fed.topo.gamma})
    clock = time.perf_counter()
    ini = _federated_init(fed, y, cfg.r, cfg.power_iters, cfg.seed, cfg.mu_threshold, gt)
    p = y.p
    smax_hat = float(ini.sigma_y[0]) / p
    eta_inner = baselines.inner_step_size(p, float(ini.sigma_y[0]), cfg.c_inner)
    elapsed = time.perf_counter() - clock
    trace.meta.update(eta_inner=eta_inner, mu_used=ini.mu_used)
    u, blocks = ini.u, None
    for t in range(cfg.T + 1):
        clock = time.perf_counter()
        blocks, under = fed.local_ls(u, y, cfg.underdetermined_policy, blocks)
        b = fed.gather_b(blocks)
        check_divergence(b, smax_hat, cfg.r)
        if t == cfg.T:
            grad = fed.reduce([altgdmin.gradient_U(u, bl, blk) for bl, blk in zip(blocks, fed.local(y))])
        else:
            fed.begin_round("iterate")
            u_tilde = u.copy()
            for i in range(cfg.inner_iters):
                if i:
                    fed.next_exchange()
                g = fed.partial_gradients(u_tilde, blocks, y)
                if i == 0:
                    grad = g
                u_tilde = u_tilde - eta_inner * g
                if i == cfg.inner_iters - 1:
                    u_tilde = thin_qr(u_tilde).q
                fed.broadcast("broadcast_u", u_tilde.size)
        busy = time.perf_counter() - clock
        row = free_diagnostics(u, b, grad)
        if gt is not None:
            row.update(diagnostics_step(u, b, gt))
        trace.append(wall_s=elapsed, undercols=under, **row)
        if cfg.keep_iterates:
            trace.iterates.append(u)
        elapsed += busy
        if t == cfg.T:
            break
        if cfg.stop_tol is not None and gt is not None and row["se_f"] <= cfg.stop_tol:
            _rollback_round(fed)
            break
        u = u_tilde
    if cfg.stop_tol is not None and gt is not None:
        trace.meta["converged"] = bool(trace.se_f[-1] <= cfg.stop_tol)
    return FactorPair(u, b), trace


def _run_factgd(fed, cfg, gt):
    y = fed.y
    r = cfg.r
    trace = IterationTrace("factgd", {"T": cfg.T, "r": r, "gamma": fed.topo.gamma})
    clock = time.perf_counter()
    ini = _federated_init(fed, y, r, cfg.power_iters, cfg.seed, cfg.mu_threshold, gt)
    p = y.p
    smax_hat = float(ini.sigma_y[0]) / p

    # Balanced start: Gram of the LS fit up, its eigenpairs down, max column norm up/down.
    fed.begin_round("init")
    ls_blocks, under0 = fed.local_ls(ini.u, y, cfg.underdetermined_policy)
    gram = fed.gram_partials(ls_blocks)
    ev, w = np.linalg.eigh(gram)
    ev, w = ev[::-1], w[:, ::-1]
    if ev[-1] <= 0:
        raise linalg.RankDeficient("least-squares start for FactGD is rank deficient")
    s = np.sqrt(ev)
    fed.broadcast("broadcast_gram", r * r + r)
    u = ini.u @ w * np.sqrt(s)
    blocks = [(w.T @ bl) / np.sqrt(s)[:, None] for bl in ls_blocks]
    fed.next_exchange()
    fed.up("scalar_stat", [1] * fed.topo.gamma)
    radius_b = cfg.radius_factor * max(float(np.max(np.linalg.norm(bl, axis=0))) for bl in blocks)
    fed.broadcast("scalar_stat", 1)
    prm = baselines.FactGDParams(eta=cfg.c_step * p / float(ini.sigma_y[0]), p=p, lam=cfg.lambda_balance,
                                 radius_u=cfg.radius_factor * float(np.max(np.linalg.norm(u, axis=1))),
                                 radius_b=radius_b)
    elapsed = time.perf_counter() - clock
    trace.meta.update(eta=prm.eta, radius_u=prm.radius_u, radius_b=prm.radius_b)

    for t in range(cfg.T + 1):
        clock = time.perf_counter()
        last = t == cfg.T
        local = fed.local(y)
        grads = [baselines.data_gradients(u, bl, blk) for bl, blk in zip(blocks, local)]
        if last:
            bbt = fed.reduce([bl @ bl.T for bl in blocks])
            gu = fed.reduce([g[0] for g in grads])
        else:
            fed.begin_round("iterate")
            bbt = fed.gram_partials(blocks)
            fed.broadcast("broadcast_gram", 2 * r * r)  # B B^T and U^T U
            fed.next_exchange()
            fed.up("partial_gradient", [sz * r for sz in fed.sparse_size(y)])
            gu = fed.reduce([g[0] for g in grads])
        d = u.T @ u - bbt
        busy = time.perf_counter() - clock
        b = fed.gather_b(blocks)
        uq, bq = baselines.factgd_diag_pair(u, b)
        check_divergence(bq, smax_hat, r)
        row = free_diagnostics(uq, bq, gu + prm.lam * u @ d)
        if gt is not None:
            row.update(diagnostics_step(uq, bq, gt))
        trace.append(wall_s=elapsed, undercols=under0 if t == 0 else 0, **row)
        if cfg.keep_iterates:
            trace.iterates.append(uq)
        if last:
            break
        if cfg.stop_tol is not None and gt is not None and row["se_f"] <= cfg.stop_tol:
            _rollback_round(fed)
            break
        clock = time.perf_counter()
        blocks = [baselines.factgd_b_update(bl, g[1], d, prm) for bl, g in zip(blocks, grads)]
        u = baselines.factgd_u_update(u, gu, d, prm)
        fed.broadcast("broadcast_u", u.size)
        elapsed += busy + time.perf_counter() - clock
    if cfg.stop_tol is not None and gt is not None:
        trace.meta["converged"] = bool(trace.se_f[-1] <= cfg.stop_tol)
    return FactorPair(uq, bq), trace


def federated_run(algorithm, y, topo, cfg, gt=None, split=None):
    """Run a federated algorithm; returns ``(FactorPair, IterationTrace, MessageLedger)``.

    ``cfg`` is an ``AltGDminConfig`` for ``altgdmin`` and a ``BaselineConfig``
    otherwise.  ``altmin`` (non-private) and ``projgd`` are centralized-only.
    """
    if algorithm not in FEDERATED_ALGORITHMS:
        raise UnsupportedFederation(f"{algorithm!r} is centralized-only in this simulator")
    fed = Federation(y, topo)
    if algorithm == "altgdmin":
        pair, trace = _run_altgdmin(fed, cfg, split, gt)
    elif algorithm == "altmin_private":
        pair, trace = _run_altmin_private(fed, cfg, gt)
    else:
        pair, trace = _run_factgd(fed, cfg, gt)
    trace.meta["ledger"] = fed.ledger.summary()
    return pair, trace, fed.ledger


def write_summary_json(path, ledgers):
    """Per-algorithm ledger totals, as consumed by the bench communication tables."""
    with open(path, "w") as fh:
        json.dump({name: led.summary() for name, led in ledgers.items()}, fh, indent=2, sort_keys=True)
