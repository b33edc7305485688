"""Evaluation metrics for learned transport maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EVAL_STREAM_OFFSET, GroundTruthTask, MeasureSampler
from .oracles import DiscreteMeasurePair, sinkhorn_distance
from .ot_core import CostFunction, cost_function


class NoGroundTruth(Exception):
    pass


@dataclass
class EvalReport:
    l2_uvp: float | None
    sinkhorn_forward: float
    sinkhorn_backward: float | None
    dist_estimate: float
    n_eval: int


def l2_uvp(t_hat, task: GroundTruthTask, n_eval: int = 10_000,
           stream_offset: int = EVAL_STREAM_OFFSET) -> float:
    """Unexplained variance percentage of a map against the exact one.

    100 * E ||T_hat(x) - T*(x)||^2 / Var[target], with the variance taken as
    the total (per-coordinate sum) variance: analytic when the task carries
    it, otherwise estimated from target samples on the same eval set.
    """
    if task.optimal_map is None:
        raise NoGroundTruth("task has no analytic optimal map")
    if n_eval < 1000:
        raise ValueError("n_eval must be >= 1000 for a stable estimate")
    x = task.source.sample(n_eval, stream_offset)
    gap = np.asarray(t_hat(x), dtype=np.float64) - task.optimal_map(x)
    num = float(np.mean(np.sum(gap ** 2, axis=1)))
    if task.target_total_variance is not None:
        var = task.target_total_variance
    else:
        y = task.target.sample(n_eval, stream_offset + 1)
        var = float(np.sum(np.var(y, axis=0)))
    return 100.0 * num / var


def sinkhorn_divergence(p: np.ndarray, q: np.ndarray, cost: CostFunction,
                        epsilon: float, max_iters: int = 10_000,
                        tol: float = 1e-7) -> float:
    """Debiased entropic cost OT(P,Q) - (OT(P,P) + OT(Q,Q)) / 2."""

    def entropic(u, v):
        return sinkhorn_distance(DiscreteMeasurePair(u, v), cost, epsilon,
                                 max_iters=max_iters, tol=tol).cost

    return entropic(p, q) - 0.5 * entropic(p, p) - 0.5 * entropic(q, q)


def pushforward_sinkhorn(t_hat, source: MeasureSampler, target: MeasureSampler,
                         n: int = 2000, epsilon: float | None = None,
                         cost: CostFunction | None = None,
                         stream_offset: int = EVAL_STREAM_OFFSET,
                         max_iters: int = 10_000, tol: float = 1e-7) -> float:
    """Debiased Sinkhorn divergence between T_hat # source and target.

    epsilon defaults to 1e-2 of the mean cross cost, a scale where the
    divergence is both fast to compute and sharply zero for matched clouds.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    cost = cost or cost_function("half_sq_euclidean")
    x = source.sample(n, stream_offset)
    y = target.sample(n, stream_offset + 1)
    mapped = np.asarray(t_hat(x), dtype=np.float64)
    if epsilon is None:
        epsilon = max(1e-2 * float(np.mean(cost.matrix(mapped, y))), 1e-12)
    return sinkhorn_divergence(mapped, y, cost, epsilon,
                               max_iters=max_iters, tol=tol)
