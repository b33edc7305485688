"""Independent ground-truth solvers used to validate the learned maps.

None of these share code with the training path: Sinkhorn runs log-domain
matrix scaling, the exact solver enumerates permutations (or solves the tiny
transport LP), and the Gaussian case uses the closed-form affine map between
covariance ellipsoids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .ot_core import CostFunction

EXACT_MAX_POINTS = 8
SPD_EIG_FLOOR = 1e-12


class TooLarge(Exception):
    pass


class NotSPD(Exception):
    pass


@dataclass
class DiscreteMeasurePair:
    """Two weighted point clouds with probability weights."""

    x_points: np.ndarray
    y_points: np.ndarray
    x_weights: np.ndarray | None = None
    y_weights: np.ndarray | None = None

    def __post_init__(self):
        self.x_points = np.atleast_2d(np.asarray(self.x_points, dtype=np.float64))
        self.y_points = np.atleast_2d(np.asarray(self.y_points, dtype=np.float64))
        n, m = len(self.x_points), len(self.y_points)
        if self.x_weights is None:
            self.x_weights = np.full(n, 1.0 / n)
        if self.y_weights is None:
            self.y_weights = np.full(m, 1.0 / m)
        self.x_weights = np.asarray(self.x_weights, dtype=np.float64)
        self.y_weights = np.asarray(self.y_weights, dtype=np.float64)
        for w, k in ((self.x_weights, n), (self.y_weights, m)):
            if w.shape != (k,):
                raise ValueError("weight vector length does not match points")
            if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be non-negative and sum to 1")


@dataclass
class SinkhornResult:
    cost: float
    coupling: np.ndarray
    converged: bool
    iterations: int
    marginal_error: float


def sinkhorn_distance(pair: DiscreteMeasurePair, cost: CostFunction,
                      epsilon: float, max_iters: int = 100_000,
                      tol: float = 1e-9, anneal: bool = True) -> SinkhornResult:
    """Entropic OT by log-domain Sinkhorn iterations.

    Stops when the L1 violation of the first marginal drops below tol (the
    second marginal is exact after each full iteration by construction).
    Small epsilon makes this a near-exact oracle. With anneal=True the
    regularization starts near the cost scale and halves down to the target,
    warm-starting the potentials; the fixed point is the same, reached in
    far fewer iterations. On iteration exhaustion the best iterate is
    returned with converged=False rather than raising.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    a, b = pair.x_weights, pair.y_weights
    keep = a > 0.0, b > 0.0  # zero-mass atoms drop out of the scaling
    c_mat = cost.matrix(pair.x_points, pair.y_points)
    log_a = np.full(a.shape, -np.inf)
    log_b = np.full(b.shape, -np.inf)
    np.log(a, out=log_a, where=keep[0])
    np.log(b, out=log_b, where=keep[1])

    levels = [epsilon]
    if anneal:
        scale = float(np.mean(c_mat))
        eps_k = epsilon
        while eps_k * 2.0 < 0.25 * scale:
            eps_k *= 2.0
            levels.append(eps_k)
        levels.reverse()

    f = np.zeros(len(a))
    g = np.zeros(len(b))
    it = 0
    err = np.inf
    log_p = log_a[:, None] + log_b[None, :]
    for level, eps in enumerate(levels):
        last_level = level == len(levels) - 1
        budget = 25 if not last_level else max_iters - it
        for _ in range(max(budget, 1)):
            it += 1
            f = -eps * logsumexp((g[None, :] - c_mat) / eps + log_b[None, :],
                                 axis=1)
            g = -eps * logsumexp((f[:, None] - c_mat) / eps + log_a[:, None],
                                 axis=0)
            log_p = (f[:, None] + g[None, :] - c_mat) / eps \
                + log_a[:, None] + log_b[None, :]
            err = float(np.abs(np.exp(logsumexp(log_p, axis=1)) - a).sum())
            if err < tol or it >= max_iters:
                break
        if it >= max_iters:
            break
    coupling = np.exp(log_p)
    transport_cost = float(np.sum(coupling * c_mat))
    converged = bool(err < tol) and level == len(levels) - 1
    return SinkhornResult(transport_cost, coupling, converged, it, err)


def exact_discrete_ot(pair: DiscreteMeasurePair, cost: CostFunction):
    """Exact optimal transport on tiny instances; returns (cost, coupling).

    Uniform square instances are solved by enumerating all assignments;
    anything else goes through the transport LP.
    """
    n, m = len(pair.x_points), len(pair.y_points)
    if n > EXACT_MAX_POINTS or m > EXACT_MAX_POINTS:
        raise TooLarge(f"exact solver caps at {EXACT_MAX_POINTS} points per side")
    c_mat = cost.matrix(pair.x_points, pair.y_points)
    uniform = (
        n == m
        and np.allclose(pair.x_weights, 1.0 / n, atol=1e-14)
        and np.allclose(pair.y_weights, 1.0 / m, atol=1e-14)
    )
    if uniform:
        best_cost, best_perm = np.inf, None
        rows = np.arange(n)
        for perm in itertools.permutations(range(n)):
            total = c_mat[rows, perm].sum() / n
            if total < best_cost:
                best_cost, best_perm = total, perm
        coupling = np.zeros((n, m))
        coupling[rows, list(best_perm)] = 1.0 / n
        return float(best_cost), coupling

    # Transport polytope LP: vectorize the coupling row-major.
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([pair.x_weights, pair.y_weights])
    res = linprog(c_mat.ravel(), A_eq=a_eq[:-1], b_eq=b_eq[:-1],
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    coupling = res.x.reshape(n, m)
    return float(res.fun), coupling


# ---------------------------------------------------------------------------
# Gaussian closed form


@dataclass
class GaussianMeasure:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ValueError("covariance shape must match mean dimension")
        _check_spd(self.covariance)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class AffineMap:
    """x -> A x + c."""

    a: np.ndarray
    c: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.a.T + self.c


def _check_spd(sigma: np.ndarray):
    if not np.allclose(sigma, sigma.T, atol=1e-12):
        raise NotSPD("covariance is not symmetric within 1e-12")
    eigvals = np.linalg.eigvalsh(sigma)
    if eigvals.min() <= 0.0:
        raise NotSPD(f"covariance has non-positive eigenvalue {eigvals.min():.3e}")


def spd_sqrt(sigma: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Symmetric square root (or its inverse) via eigendecomposition."""
    vals, vecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    vals = np.maximum(vals, SPD_EIG_FLOOR)
    root = 1.0 / np.sqrt(vals) if inverse else np.sqrt(vals)
    return (vecs * root) @ vecs.T


def gaussian_ot(a: GaussianMeasure, b: GaussianMeasure):
    """Closed-form W2 transport between Gaussians.

    Returns (AffineMap, w2_squared) where w2_squared uses the plain squared
    Euclidean ground cost.
    """
    if a.dim != b.dim:
        raise ValueError("measures must share a dimension")
    sa, sb = a.covariance, b.covariance
    sa_half = spd_sqrt(sa)
    sa_half_inv = spd_sqrt(sa, inverse=True)
    middle = spd_sqrt(sa_half @ sb @ sa_half)
    a_mat = sa_half_inv @ middle @ sa_half_inv
    shift = b.mean - a_mat @ a.mean
    w2_sq = float(np.sum((a.mean - b.mean) ** 2)
                  + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(middle))
    return AffineMap(a_mat, shift), max(w2_sq, 0.0)
