"""Seeded Monte-Carlo experiments producing a :class:`RunRecord`.

Seeding: the ground truth comes from ``(master_seed, GROUND_TRUTH)`` and is
shared by all trials (unless ``fresh_ground_truth``); trial ``i`` of setting
``s`` (a p, eps or gamma value) in experiment kind ``k`` gets its own seed from
``(master_seed, TRIAL, k, s, i)``, from which the mask, noise and power-method
start are derived.  Within a trial every algorithm sees the same observation.

Trials are independent tasks; with ``threads > 1`` they run on a thread pool
but results are always assembled in (setting, trial) order, so the numeric
content of the record does not depend on the thread count.
"""
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import isotonic_regression
from threadpoolctl import threadpool_limits

from .. import _random, altgdmin, baselines, fedsim
from ..errors import LRMCError
from ..problem import gen_ground_truth, observe, sample_mask
from .config import KINDS

KIND_INDEX = {k: i for i, k in enumerate(KINDS)}
CENTRALIZED = ("altgdmin",) + baselines.ALGORITHMS


@dataclass
class TrialResult:
    algorithm: str
    setting: float  # p, eps_noise or gamma; NaN when the experiment has a single setting
    trial: int
    status: str  # "ok" or the exception class name
    trace: Optional[object] = None
    error: str = ""
    ledger: Optional[object] = None
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == "ok"

    def final_se(self):
        return float(self.trace.se_f[-1]) if self.ok else math.nan


@dataclass
class RunRecord:
    """Per-trial results plus the aggregate tables computed from them.

    ``aggregates`` maps a table name to ``{column: list}``; columns whose name
    contains ``wall`` are timing measurements and excluded from :meth:`digest`.
    """

    config: object
    config_hash: str
    trials: List[TrialResult]
    aggregates: Dict[str, Dict[str, list]]

    @property
    def ledgers(self):
        return {ledger_tag(t): t.ledger for t in self.trials if t.ledger is not None}

    def numeric_content(self):
        tr = []
        for t in self.trials:
            rows = t.trace.numeric_rows() if t.trace is not None else []
            tr.append([t.algorithm, _jsonable(t.setting), t.trial, t.status, [list(map(_jsonable, r)) for r in rows],
                       {k: _jsonable(v) for k, v in sorted(t.extra.items())}])
        agg = {name: {c: [_jsonable(v) for v in col] for c, col in tab.items() if "wall" not in c}
               for name, tab in sorted(self.aggregates.items())}
        led = {k: v.summary() for k, v in sorted(self.ledgers.items())}
        return {"config_hash": self.config_hash, "trials": tr, "aggregates": agg, "ledgers": led}

    def digest(self):
        """SHA-256 over every non-timing number in the record."""
        blob = json.dumps(self.numeric_content(), sort_keys=True, allow_nan=True).encode()
        return hashlib.sha256(blob).hexdigest()


def ledger_tag(t):
    name = t.algorithm.replace("@", "_")
    if math.isfinite(t.setting):
        name += f"_g{int(t.setting)}"
    return f"{name}_t{t.trial}"


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if not math.isfinite(v) else v
    return v


# --- building blocks ---------------------------------------------------------

def _mu(cfg):
    try:
        return float(cfg.mu_threshold)
    except ValueError:
        return cfg.mu_threshold


def solver_config(cfg, algorithm, seed, T=None, stop_tol=None, stall_window=None, keep_iterates=False):
    T = cfg.T if T is None else T
    common = dict(r=cfg.r, T=T, power_iters=cfg.power_iters, mu_threshold=_mu(cfg), seed=seed,
                  stop_tol=stop_tol, stall_window=stall_window, keep_iterates=keep_iterates)
    if algorithm == "altgdmin":
        return altgdmin.AltGDminConfig(eta_rule=cfg.eta_rule, c_eta=cfg.c_eta, c_emp=cfg.c_emp,
                                       sigma_source=cfg.sigma_source, split_mode=cfg.split_mode,
                                       allow_large_step=cfg.c_eta > 0.5, **common)
    return baselines.BaselineConfig(algorithm=algorithm, inner_iters=cfg.inner_iters, c_step=cfg.c_step,
                                    lambda_balance=cfg.lambda_balance, projgd_c=cfg.projgd_c, **common)


def solve(algorithm, y, gt, scfg, gamma=None):
    """Run one solver; ``gamma`` selects the federated simulator."""
    if gamma is not None:
        return fedsim.federated_run(algorithm, y, fedsim.Topology.even(y.shape[1], gamma), scfg, gt)
    if algorithm == "altgdmin":
        return altgdmin.run(y, scfg, gt=gt) + (None,)
    return baselines.run_baseline(y, scfg, gt) + (None,)


def _split_name(name):
    """``"altgdmin@g5"`` -> ``("altgdmin", 5)``; plain names are centralized."""
    if "@g" in name:
        alg, g = name.split("@g")
        return alg, int(g)
    return name, None


def ground_truth(cfg, trial_seed=None):
    seed = _random.derive_seed(cfg.master_seed, _random.GROUND_TRUTH)
    if cfg.fresh_ground_truth and trial_seed is not None:
        seed = _random.derive_seed(trial_seed, _random.GROUND_TRUTH)
    return gen_ground_truth(cfg.n, cfg.q, cfg.r, cfg.spectrum, cfg.kappa, seed=seed)


def trial_seed(cfg, setting_index, trial):
    return _random.derive_seed(cfg.master_seed, _random.TRIAL, KIND_INDEX[cfg.kind], setting_index, trial)


def make_observation(cfg, gt, seed, p=None, eps=None):
    p = cfg.p if p is None else p
    eps = cfg.eps_noise if eps is None else eps
    mask = sample_mask(cfg.n, cfg.q, p, seed=_random.derive_seed(seed, _random.MASK))
    return observe(gt, mask, eps, cfg.noise_shape, seed=_random.derive_seed(seed, _random.NOISE))


def _attempt(name, setting, trial, y, gt, scfg, gamma=None):
    try:
        _, trace, ledger = solve(name if gamma is None else _split_name(name)[0], y, gt, scfg, gamma)
    except LRMCError as exc:
        return TrialResult(name, setting, trial, type(exc).__name__, error=str(exc))
    return TrialResult(name, setting, trial, "ok", trace, ledger=ledger)


def _execute(tasks, threads):
    """Run zero-argument callables; results in task order whatever the thread count."""
    with threadpool_limits(limits=1):
        if threads <= 1:
            out = [t() for t in tasks]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                out = list(pool.map(lambda f: f(), tasks))
    return [r for batch in out for r in batch]


def hits_threshold(trace, threshold):
    idx = np.flatnonzero(trace.se_f <= threshold)
    return int(idx[0]) if idx.size else -1


# --- aggregation --------------------------------------------------------------

def curve_table(results):
    """Per (algorithm, iteration) statistics of SE_F; finished trials hold their final value."""
    tab = {c: [] for c in ("algorithm", "iter", "n_active", "mean_se_f", "median_se_f", "min_se_f",
                           "max_se_f", "mean_rel_err", "mean_wall_s")}
    for alg in _ordered(r.algorithm for r in results):
        traces = [r.trace for r in results if r.algorithm == alg and r.ok]
        if not traces:
            continue
        length = max(len(t) for t in traces)
        se = np.array([np.pad(t.se_f, (0, length - len(t)), mode="edge") for t in traces])
        rel = np.array([np.pad(t.rel_frob_err, (0, length - len(t)), mode="edge") for t in traces])
        for it in range(length):
            active = [t for t in traces if len(t) > it]
            tab["algorithm"].append(alg)
            tab["iter"].append(it)
            tab["n_active"].append(len(active))
            tab["mean_se_f"].append(float(np.mean(se[:, it])))
            tab["median_se_f"].append(float(np.median(se[:, it])))
            tab["min_se_f"].append(float(np.min(se[:, it])))
            tab["max_se_f"].append(float(np.max(se[:, it])))
            tab["mean_rel_err"].append(float(np.mean(rel[:, it])))
            tab["mean_wall_s"].append(float(np.mean([t.wall_s[it] for t in active])))
    return tab


def trial_table(results, threshold):
    tab = {c: [] for c in ("algorithm", "setting", "trial", "status", "iters", "final_se_f", "success",
                           "iters_to_threshold", "wall_to_threshold", "wall_per_iter")}
    for r in results:
        tab["algorithm"].append(r.algorithm)
        tab["setting"].append(float(r.setting))
        tab["trial"].append(r.trial)
        tab["status"].append(r.status)
        if r.ok:
            hit = hits_threshold(r.trace, threshold)
            wall = r.trace.wall_s
            tab["iters"].append(len(r.trace) - 1)
            tab["final_se_f"].append(r.final_se())
            tab["success"].append(int(r.final_se() <= threshold))
            tab["iters_to_threshold"].append(hit)
            tab["wall_to_threshold"].append(float(wall[hit]) if hit >= 0 else math.nan)
            tab["wall_per_iter"].append(float(wall[-1] / max(len(wall) - 1, 1)))
        else:
            tab["iters"].append(-1)
            tab["final_se_f"].append(math.nan)
            tab["success"].append(0)
            tab["iters_to_threshold"].append(-1)
            tab["wall_to_threshold"].append(math.nan)
            tab["wall_per_iter"].append(math.nan)
    return tab


def algorithm_summary(results, threshold):
    tab = {c: [] for c in ("algorithm", "trials", "failures", "success_rate", "median_iters_to_threshold",
                           "mean_wall_to_threshold", "mean_wall_per_iter")}
    for alg in _ordered(r.algorithm for r in results):
        rs = [r for r in results if r.algorithm == alg]
        ok = [r for r in rs if r.ok]
        hits = [hits_threshold(r.trace, threshold) for r in ok]
        reached = [(r, h) for r, h in zip(ok, hits) if h >= 0]
        tab["algorithm"].append(alg)
        tab["trials"].append(len(rs))
        tab["failures"].append(len(rs) - len(ok))
        tab["success_rate"].append(float(np.mean([r.ok and r.final_se() <= threshold for r in rs])))
        tab["median_iters_to_threshold"].append(float(np.median([h for _, h in reached])) if reached else math.nan)
        tab["mean_wall_to_threshold"].append(float(np.mean([r.trace.wall_s[h] for r, h in reached]))
                                             if reached else math.nan)
        tab["mean_wall_per_iter"].append(float(np.mean([r.trace.wall_s[-1] / max(len(r.trace) - 1, 1) for r in ok]))
                                         if ok else math.nan)
    return tab


def _ordered(names):
    seen = []
    for n in names:
        if n not in seen:
            seen.append(n)
    return seen


def detect_plateau(se, window=10, rtol=0.01):
    """First index t >= window with |se[t] - se[t-window]| < rtol * se[t-window].

    Returns ``(index, level)``; if no plateau is detected the last value is used
    and the index is -1.
    """
    se = np.asarray(se, dtype=float)
    for t in range(window, len(se)):
        ref = se[t - window]
        if abs(se[t] - ref) < rtol * ref:
            return t, float(se[t])
    return -1, float(se[-1])


def threshold_p(p_grid, success, level=0.5):
    """Smallest p where the isotonic success fit reaches ``level`` (linear interpolation)."""
    s = np.asarray(success, dtype=float)
    p = np.asarray(p_grid, dtype=float)
    idx = np.flatnonzero(s >= level)
    if idx.size == 0:
        return math.nan
    i = int(idx[0])
    if i == 0 or s[i] == s[i - 1]:
        return float(p[i])
    return float(p[i - 1] + (level - s[i - 1]) * (p[i] - p[i - 1]) / (s[i] - s[i - 1]))


def isotonic(values):
    return isotonic_regression(np.asarray(values, dtype=float), increasing=True).x


def aggregate(cfg, results):
    """Recompute all aggregate tables from per-trial results."""
    thr = cfg.success_threshold
    tables = {"trials": trial_table(results, thr)}
    if cfg.kind in ("convergence", "timing"):
        tables["curve"] = curve_table(results)
        tables["algorithms"] = algorithm_summary(results, thr)
    elif cfg.kind == "noisy_floor":
        tables.update(_noisy_tables(cfg, results))
    elif cfg.kind == "phase_transition":
        tables.update(_phase_tables(cfg, results))
    elif cfg.kind == "fed_equivalence":
        tables["fed"] = _fed_table(cfg, results)
    return tables


def _noisy_tables(cfg, results):
    gt = ground_truth(cfg)
    kappa, r = gt.kappa, cfg.r
    floor = {c: [] for c in ("algorithm", "eps_noise", "plateau_median", "plateau_max", "plateau_found",
                             "bound", "within_bound", "in_regime")}
    fits = {c: [] for c in ("algorithm", "slope", "doubling_factor", "min_pair_doubling", "max_pair_doubling")}
    for alg in _ordered(x.algorithm for x in results):
        eps_vals, meds = [], []
        for eps in cfg.eps_grid:
            rs = [x for x in results if x.algorithm == alg and x.setting == eps and x.ok]
            levels = [x.extra["plateau"] for x in rs]
            med = float(np.median(levels)) if levels else math.nan
            bound = kappa ** 2 * math.sqrt(r) * eps
            floor["algorithm"].append(alg)
            floor["eps_noise"].append(float(eps))
            floor["plateau_median"].append(med)
            floor["plateau_max"].append(float(np.max(levels)) if levels else math.nan)
            floor["plateau_found"].append(int(sum(x.extra["plateau_index"] >= 0 for x in rs)))
            floor["bound"].append(bound)
            floor["within_bound"].append(int(bool(levels) and max(levels) <= (bound if eps > 0 else cfg.success_threshold)))
            floor["in_regime"].append(int(eps <= 1.0 / (math.sqrt(r) * kappa ** 3)))
            if eps > 0 and med > 0:
                eps_vals.append(eps)
                meds.append(med)
        if len(eps_vals) >= 2:
            le, lm = np.log(eps_vals), np.log(meds)
            slope = float(np.polyfit(le, lm, 1)[0])
            pair = [2.0 ** ((lm[i + 1] - lm[i]) / (le[i + 1] - le[i])) for i in range(len(le) - 1)]
        else:
            slope, pair = math.nan, [math.nan]
        fits["algorithm"].append(alg)
        fits["slope"].append(slope)
        fits["doubling_factor"].append(2.0 ** slope)
        fits["min_pair_doubling"].append(float(min(pair)))
        fits["max_pair_doubling"].append(float(max(pair)))
    return {"noisy_floor": floor, "noisy_fit": fits}


def _phase_tables(cfg, results):
    grid = {c: [] for c in ("algorithm", "p", "trials", "successes", "success_prob", "isotonic_fit")}
    summ = {c: [] for c in ("algorithm", "p50", "max_isotonic_dev", "isotonic_tolerance")}
    for alg in _ordered(x.algorithm for x in results):
        probs = []
        for p in cfg.p_grid:
            rs = [x for x in results if x.algorithm == alg and x.setting == p]
            succ = sum(int(x.ok and x.final_se() <= cfg.success_threshold) for x in rs)
            probs.append(succ / len(rs))
            grid["algorithm"].append(alg)
            grid["p"].append(float(p))
            grid["trials"].append(len(rs))
            grid["successes"].append(succ)
            grid["success_prob"].append(succ / len(rs))
        iso = isotonic(probs)
        grid["isotonic_fit"].extend(float(v) for v in iso)
        summ["algorithm"].append(alg)
        summ["p50"].append(threshold_p(cfg.p_grid, iso))
        summ["max_isotonic_dev"].append(float(np.max(np.abs(np.asarray(probs) - iso))))
        summ["isotonic_tolerance"].append(2.0 / math.sqrt(cfg.trials))
    return {"phase": grid, "phase_threshold": summ}


def _fed_table(cfg, results):
    tab = {c: [] for c in ("algorithm", "gamma", "trial", "status", "max_iterate_dev", "final_b_dev",
                           "up_scalars", "down_scalars", "iterate_up", "iterate_down", "expected_iterate_up",
                           "up_per_round", "exchanges_per_round", "privacy_violations")}
    for x in results:
        tab["algorithm"].append(x.algorithm)
        tab["gamma"].append(int(x.setting))
        tab["trial"].append(x.trial)
        tab["status"].append(x.status)
        led = x.ledger
        for k in ("max_iterate_dev", "final_b_dev"):
            tab[k].append(float(x.extra.get(k, math.nan)))
        if led is None:
            for k in ("up_scalars", "down_scalars", "iterate_up", "iterate_down", "expected_iterate_up",
                      "exchanges_per_round", "privacy_violations"):
                tab[k].append(-1)
            tab["up_per_round"].append(math.nan)
            continue
        rounds = led.rounds("iterate")
        up_it = led.total("up", "iterate")
        ex = sorted(set(led.exchanges_per_round("iterate").values()))
        tab["up_scalars"].append(led.totals["up"])
        tab["down_scalars"].append(led.totals["down"])
        tab["iterate_up"].append(up_it)
        tab["iterate_down"].append(led.total("down", "iterate"))
        tab["expected_iterate_up"].append(cfg.T * int(x.setting) * cfg.n * cfg.r if x.algorithm == "altgdmin" else -1)
        tab["up_per_round"].append(up_it / len(rounds) if rounds else math.nan)
        tab["exchanges_per_round"].append(ex[0] if len(ex) == 1 else -1)
        tab["privacy_violations"].append(led.privacy_violations)
    return tab


# --- experiment kinds -----------------------------------------------------------

def _trial_task(cfg, setting_index, trial, body):
    def task():
        seed = trial_seed(cfg, setting_index, trial)
        return body(seed, ground_truth(cfg, seed))
    return task


def _finish(cfg, results):
    return RunRecord(cfg, cfg.hash(), results, aggregate(cfg, results))


def _algorithm_names(cfg, federated_too):
    names = list(cfg.algorithms)
    if federated_too:
        names += [f"{a}@g{g}" for g in cfg.gammas for a in cfg.algorithms if a in fedsim.FEDERATED_ALGORITHMS]
    return names


def _unknown_algorithms(cfg):
    bad = [a for a in cfg.algorithms if a not in CENTRALIZED]
    if bad:
        raise ValueError(f"unknown algorithms {bad}; choose from {CENTRALIZED}")


def run_convergence(cfg, threads=1, federated_too=False):
    """Error-vs-iteration study on one instance; every algorithm runs until the success threshold."""
    _unknown_algorithms(cfg)
    names = _algorithm_names(cfg, federated_too)

    def body(seed, gt, trial):
        y = make_observation(cfg, gt, seed)
        out = []
        for name in names:
            alg, gamma = _split_name(name)
            scfg = solver_config(cfg, alg, _random.derive_seed(seed, _random.POWER), stop_tol=cfg.success_threshold,
                                 stall_window=cfg.stall_window)
            res = _attempt(name, math.nan, trial, y, gt, scfg, gamma)
            out.append(res)
        return out

    tasks = [_trial_task(cfg, 0, i, lambda s, g, i=i: body(s, g, i)) for i in range(cfg.trials)]
    return _finish(cfg, _execute(tasks, threads))


def run_timing(cfg, threads=1):
    """Like :func:`run_convergence`, adding federated variants for every gamma in ``cfg.gammas``.

    Timing comparisons are meant to be read from single-threaded runs.
    """
    return run_convergence(cfg, threads, federated_too=True)


def run_noisy_floor(cfg, threads=1):
    """Run each algorithm for ``T`` iterations per noise level and record the plateau of SE_F."""
    _unknown_algorithms(cfg)

    def body(seed, gt, trial, eps):
        y = make_observation(cfg, gt, seed, eps=eps)
        out = []
        for alg in cfg.algorithms:
            stop = cfg.success_threshold if eps == 0 else None
            scfg = solver_config(cfg, alg, _random.derive_seed(seed, _random.POWER), stop_tol=stop)
            res = _attempt(alg, float(eps), trial, y, gt, scfg)
            if res.ok:
                idx, level = detect_plateau(res.trace.se_f, cfg.plateau_window, cfg.plateau_rtol)
                res.extra.update(plateau=level, plateau_index=idx)
            out.append(res)
        return out

    tasks = [_trial_task(cfg, j, i, lambda s, g, i=i, e=e: body(s, g, i, e))
             for j, e in enumerate(cfg.eps_grid) for i in range(cfg.trials)]
    return _finish(cfg, _execute(tasks, threads))


def run_phase_transition(cfg, threads=1):
    """Success probability per (algorithm, p); success means final SE_F <= success_threshold."""
    _unknown_algorithms(cfg)

    def body(seed, gt, trial, p):
        y = make_observation(cfg, gt, seed, p=p)
        out = []
        for alg in cfg.algorithms:
            scfg = solver_config(cfg, alg, _random.derive_seed(seed, _random.POWER), stop_tol=cfg.success_threshold,
                                 stall_window=cfg.stall_window)
            out.append(_attempt(alg, float(p), trial, y, gt, scfg))
        return out

    tasks = [_trial_task(cfg, j, i, lambda s, g, i=i, p=p: body(s, g, i, p))
             for j, p in enumerate(cfg.p_grid) for i in range(cfg.trials)]
    return _finish(cfg, _execute(tasks, threads))


def iterate_deviation(trace_a, trace_b):
    """Largest Frobenius distance between matching U iterates of two runs."""
    if len(trace_a.iterates) != len(trace_b.iterates):
        return math.inf
    return max(float(np.linalg.norm(a - b)) for a, b in zip(trace_a.iterates, trace_b.iterates))


def run_fed_equivalence(cfg, threads=1):
    """Centralized vs federated runs (fixed T, no early stop) for every gamma in ``cfg.gammas``."""
    algs = [a for a in cfg.algorithms if a in fedsim.FEDERATED_ALGORITHMS]
    if not algs:
        raise ValueError(f"fed_equivalence needs one of {fedsim.FEDERATED_ALGORITHMS}")

    def body(seed, gt, trial):
        y = make_observation(cfg, gt, seed)
        out = []
        for alg in algs:
            scfg = solver_config(cfg, alg, _random.derive_seed(seed, _random.POWER), keep_iterates=True)
            try:
                ref_pair, ref, _ = solve(alg, y, gt, scfg)
            except LRMCError as exc:
                out += [TrialResult(alg, float(g), trial, type(exc).__name__, error=str(exc)) for g in cfg.gammas]
                continue
            for g in cfg.gammas:
                try:
                    pair, trace, ledger = solve(alg, y, gt, scfg, gamma=g)
                except LRMCError as exc:
                    out.append(TrialResult(alg, float(g), trial, type(exc).__name__, error=str(exc)))
                    continue
                res = TrialResult(alg, float(g), trial, "ok", trace, ledger=ledger)
                res.extra.update(max_iterate_dev=iterate_deviation(trace, ref),
                                 final_b_dev=float(np.linalg.norm(pair.b - ref_pair.b)))
                out.append(res)
        return out

    tasks = [_trial_task(cfg, 0, i, lambda s, g, i=i: body(s, g, i)) for i in range(cfg.trials)]
    return _finish(cfg, _execute(tasks, threads))


RUNNERS = {"convergence": run_convergence, "timing": run_timing, "noisy_floor": run_noisy_floor,
           "phase_transition": run_phase_transition, "fed_equivalence": run_fed_equivalence}


def run_experiment(cfg, threads=1):
    return RUNNERS[cfg.kind](cfg, threads=threads)
