"""Seeded synthetic measures with counter-based streams.

Every draw comes from a Philox generator keyed by (sampler seed, stream
offset), so batch t of a training run is reproducible in isolation and
independent of evaluation order. Offsets below 2^32 are reserved for
training steps, EVAL_STREAM_OFFSET upward for evaluation, and
PARAM_STREAM_OFFSET for drawing task parameters themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .oracles import GaussianMeasure, gaussian_ot

SAMPLER_KINDS = ("gaussian", "gaussian_mixture", "circles2d", "moons2d",
                 "sphere_patch")

EVAL_STREAM_OFFSET = 2 ** 48
PARAM_STREAM_OFFSET = 2 ** 62


class BadParams(Exception):
    pass


def stream_generator(seed: int, offset: int = 0) -> np.random.Generator:
    key = np.array([np.uint64(seed & (2 ** 64 - 1)),
                    np.uint64(offset & (2 ** 64 - 1))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _subseeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, np.uint64)]


@dataclass
class MeasureSampler:
    """Deterministic i.i.d. sampler for one synthetic measure."""

    kind: str
    dim: int
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise BadParams(f"unknown sampler kind {self.kind!r}")
        if self.dim < 1:
            raise BadParams("dim must be >= 1")
        if self.kind in ("circles2d", "moons2d") and self.dim != 2:
            raise BadParams(f"{self.kind} is two-dimensional")

    def sample(self, n: int, stream_offset: int = 0) -> np.ndarray:
        if n < 1:
            raise BadParams("n must be >= 1")
        rng = stream_generator(self.seed, stream_offset)
        if self.kind == "gaussian":
            z = rng.standard_normal((n, self.dim))
            return self.params["mean"] + z @ self.params["chol"].T
        if self.kind == "gaussian_mixture":
            means, chols = self.params["means"], self.params["chols"]
            idx = rng.choice(len(means), size=n, p=self.params["weights"])
            z = rng.standard_normal((n, self.dim))
            return means[idx] + np.einsum("nij,nj->ni", chols[idx], z)
        if self.kind == "circles2d":
            outer = rng.random(n) < 0.5
            theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
            r = np.where(outer, 1.0, self.params["factor"])
            pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
            return pts + self.params["noise"] * rng.standard_normal((n, 2))
        if self.kind == "moons2d":
            upper = rng.random(n) < 0.5
            t = rng.uniform(0.0, np.pi, size=n)
            x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
            y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
            pts = np.stack([x, y], axis=1)
            return pts + self.params["noise"] * rng.standard_normal((n, 2))
        z = self.params["center"] + self.params["spread"] \
            * rng.standard_normal((n, self.dim))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    def analytic_mean(self) -> np.ndarray | None:
        """Exact mean where it has a closed form; None for sphere patches."""
        if self.kind == "gaussian":
            return np.array(self.params["mean"], dtype=np.float64)
        if self.kind == "gaussian_mixture":
            w = self.params["weights"]
            return np.asarray(w @ self.params["means"], dtype=np.float64)
        if self.kind == "circles2d":
            return np.zeros(2)
        if self.kind == "moons2d":
            return np.array([0.5, 0.25])
        return None


# ---------------------------------------------------------------------------
# factories


def gaussian_sampler(mean, cov, seed: int) -> MeasureSampler:
    measure = GaussianMeasure(mean, cov)  # validates SPD
    chol = np.linalg.cholesky(measure.covariance)
    return MeasureSampler("gaussian", measure.dim, seed,
                          {"mean": measure.mean, "chol": chol})


def gaussian_mixture_sampler(means, covs, weights, seed: int) -> MeasureSampler:
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    covs = np.asarray(covs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if len(means) != len(covs) or len(means) != len(weights):
        raise BadParams("means, covs and weights must align")
    if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-12:
        raise BadParams("mixture weights must be a probability vector")
    chols = np.stack([np.linalg.cholesky(c) for c in covs])
    return MeasureSampler("gaussian_mixture", means.shape[1], seed,
                          {"means": means, "chols": chols, "weights": weights})


def circles_sampler(seed: int, noise: float = 0.05,
                    factor: float = 0.5) -> MeasureSampler:
    return MeasureSampler("circles2d", 2, seed,
                          {"noise": float(noise), "factor": float(factor)})


def moons_sampler(seed: int, noise: float = 0.05) -> MeasureSampler:
    return MeasureSampler("moons2d", 2, seed, {"noise": float(noise)})


def sphere_patch_sampler(center, spread: float, seed: int) -> MeasureSampler:
    center = np.asarray(center, dtype=np.float64)
    nrm = np.linalg.norm(center)
    if nrm <= 0.0:
        raise BadParams("patch center must be a nonzero direction")
    return MeasureSampler("sphere_patch", center.size, seed,
                          {"center": center / nrm, "spread": float(spread)})


# ---------------------------------------------------------------------------
# tasks


@dataclass
class GroundTruthTask:
    """A source/target sampler pair, optionally with the exact map.

    w2_squared uses the plain squared-Euclidean convention; divide by two
    for the half-squared cost.
    """

    source: MeasureSampler
    target: MeasureSampler
    optimal_map: Callable[[np.ndarray], np.ndarray] | None = None
    w2_squared: float | None = None
    target_total_variance: float | None = None


def _random_spd(rng: np.random.Generator, d: int,
                eig_range=(0.5, 2.0)) -> np.ndarray:
    eigs = rng.uniform(*eig_range, size=d)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity
    return (q * eigs) @ q.T


def make_gaussian_task(d: int, seed: int) -> GroundTruthTask:
    """Random Gaussian pair with the closed-form map as ground truth."""
    if d < 1:
        raise BadParams("d must be >= 1")
    rng = stream_generator(seed, PARAM_STREAM_OFFSET)
    mean_a = rng.uniform(-2.0, 2.0, size=d)
    mean_b = rng.uniform(-2.0, 2.0, size=d)
    cov_a = _random_spd(rng, d)
    cov_b = _random_spd(rng, d)
    a = GaussianMeasure(mean_a, cov_a)
    b = GaussianMeasure(mean_b, cov_b)
    tstar, w2_sq = gaussian_ot(a, b)
    sa, sb = _subseeds(seed, 2)
    return GroundTruthTask(
        source=gaussian_sampler(mean_a, cov_a, sa),
        target=gaussian_sampler(mean_b, cov_b, sb),
        optimal_map=tstar,
        w2_squared=w2_sq,
        target_total_variance=float(np.trace(cov_b)),
    )


def make_translation_task(d: int, shift, seed: int) -> GroundTruthTask:
    shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), (d,)).copy()
    sa, sb = _subseeds(seed, 2)
    return GroundTruthTask(
        source=gaussian_sampler(np.zeros(d), np.eye(d), sa),
        target=gaussian_sampler(shift, np.eye(d), sb),
        optimal_map=lambda x: np.asarray(x, dtype=np.float64) + shift,
        w2_squared=float(np.sum(shift ** 2)),
        target_total_variance=float(d),
    )


def make_identity_task(d: int, seed: int) -> GroundTruthTask:
    """alpha = beta = N(0, I): the optimal map is the identity."""
    sa, sb = _subseeds(seed, 2)
    return GroundTruthTask(
        source=gaussian_sampler(np.zeros(d), np.eye(d), sa),
        target=gaussian_sampler(np.zeros(d), np.eye(d), sb),
        optimal_map=lambda x: np.asarray(x, dtype=np.float64),
        w2_squared=0.0,
        target_total_variance=float(d),
    )


def _random_mixture(rng: np.random.Generator, k: int, d: int,
                    seed: int) -> MeasureSampler:
    means = rng.uniform(-3.0, 3.0, size=(k, d))
    covs = np.stack([_random_spd(rng, d, eig_range=(0.3, 1.0)) for _ in range(k)])
    weights = rng.dirichlet(np.ones(k))
    return gaussian_mixture_sampler(means, covs, weights, seed)


def make_mix_task(k_source: int, k_target: int, d: int, seed: int) -> GroundTruthTask:
    """Random mixture pair; no analytic map, evaluate via Sinkhorn only."""
    if k_source < 1 or k_target < 1:
        raise BadParams("mixture sizes must be >= 1")
    rng = stream_generator(seed, PARAM_STREAM_OFFSET)
    sa, sb = _subseeds(seed, 2)
    return GroundTruthTask(
        source=_random_mixture(rng, k_source, d, sa),
        target=_random_mixture(rng, k_target, d, sb),
    )


def make_sphere_task(seed: int, d: int = 3, spread: float = 0.3) -> GroundTruthTask:
    rng = stream_generator(seed, PARAM_STREAM_OFFSET)
    c_a = rng.standard_normal(d)
    c_b = rng.standard_normal(d)
    sa, sb = _subseeds(seed, 2)
    return GroundTruthTask(
        source=sphere_patch_sampler(c_a, spread, sa),
        target=sphere_patch_sampler(c_b, spread, sb),
    )


def make_circles_moons_task(seed: int, noise: float = 0.05) -> GroundTruthTask:
    sa, sb = _subseeds(seed, 2)
    return GroundTruthTask(source=circles_sampler(sa, noise=noise),
                           target=moons_sampler(sb, noise=noise))


def dump_points_csv(path, sampler: MeasureSampler, n: int,
                    stream_offset: int = 0) -> None:
    """Write n sampled points with a self-describing header row."""
    pts = sampler.sample(n, stream_offset)
    cols = ",".join(f"x{i}" for i in range(sampler.dim))
    header = f"# kind={sampler.kind} dim={sampler.dim} seed={sampler.seed}\n{cols}"
    np.savetxt(path, pts, delimiter=",", header=header, comments="",
               fmt="%.17g")
