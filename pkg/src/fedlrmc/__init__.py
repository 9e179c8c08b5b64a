"""Low-rank matrix completion by alternating GD and minimization, with a federated simulator.

Quick start::

    from fedlrmc import gen_ground_truth, sample_mask, observe, AltGDminConfig, run
    gt = gen_ground_truth(200, 200, 5, seed=1)
    y = observe(gt, sample_mask(200, 200, 0.3, seed=2))
    pair, trace = run(y, AltGDminConfig(r=5, T=150), gt=gt)
    trace.se_f[-1]
"""
from .altgdmin import AltGDminConfig, FactorPair, run
from .baselines import BaselineConfig, run_baseline
from .errors import (DimensionMismatch, Diverged, FormatError, InvalidDimensions, LRMCError, RankDeficient,
                     UnderdeterminedAbort, UnderdeterminedColumn, UnsupportedFederation)
from .fedsim import MessageLedger, Topology, federated_run
from .linalg import subspace_dist_2, subspace_dist_F, thin_qr
from .problem import GroundTruth, ObservationMask, SparseObservation, gen_ground_truth, observe, sample_mask, split_mask
from .trace import IterationTrace

__all__ = [
    "AltGDminConfig", "BaselineConfig", "DimensionMismatch", "Diverged", "FactorPair", "FormatError",
    "GroundTruth", "InvalidDimensions", "IterationTrace", "LRMCError", "MessageLedger", "ObservationMask",
    "RankDeficient", "SparseObservation", "Topology", "UnderdeterminedAbort", "UnderdeterminedColumn",
    "UnsupportedFederation", "federated_run", "gen_ground_truth", "observe", "run", "run_baseline",
    "sample_mask", "split_mask", "subspace_dist_2", "subspace_dist_F", "thin_qr",
]
