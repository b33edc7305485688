"""Expectile-regularized neural OT: costs, dual losses, and the training loop.

The minimax trains a map-side network (either a residual MLP T(x) = x + n(x)
or a scalar potential f with T(x) = x - grad h*(grad f(x))) against a
potential g, minimizing the dual objective split into a map loss and a
potential loss, with an expectile penalty pulling g toward the conjugate of
its own parametric upper bound. Bidirectional runs alternate the roles of
the two potentials so forward and inverse maps improve together.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff
from .autodiff import NonFiniteValue, Tape
from .nn import ArchitectureSpec, LeafSet, PotentialNetwork, input_gradient
from .optim import AdamState, CosineSchedule, NonFiniteGradient, adam_step, cosine_lr

RUNNING = "running"
CONVERGED = "converged"
DIVERGED = "diverged"

COST_KINDS = ("half_sq_euclidean", "sq_euclidean", "euclidean", "sphere_geodesic")
MAP_PARAMETRIZATIONS = ("residual_mlp", "potential_gradient")

SPHERE_TOL = 1e-9
ACOS_CLAMP = 1e-12
TAU_MAX = 0.99


class DimMismatch(Exception):
    pass


class NotOnSphere(Exception):
    pass


class EmptyBatch(Exception):
    pass


class MissingConjugateGradient(Exception):
    pass


# ---------------------------------------------------------------------------
# ground costs


@dataclass(frozen=True)
class CostFunction:
    """Ground cost c(x, y) with conjugate metadata.

    conjugate_gradient names the closed form of grad h* when the cost is
    h(x - y) with usable convex conjugate: "identity" for |x-y|^2/2, "half"
    for |x-y|^2, None otherwise.
    """

    kind: str
    is_h_of_difference: bool
    conjugate_gradient: str | None

    def _check_pair(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if x.shape[1] != y.shape[1]:
            raise DimMismatch(f"point dims differ: {x.shape[1]} vs {y.shape[1]}")
        if self.kind == "sphere_geodesic":
            for pts, name in ((x, "x"), (y, "y")):
                err = np.abs(np.linalg.norm(pts, axis=1) - 1.0)
                if np.any(err > SPHERE_TOL):
                    raise NotOnSphere(
                        f"{name} deviates from unit norm by {err.max():.2e}")
        return x, y

    def pairwise(self, x, y) -> np.ndarray:
        """c(x_i, y_i) for aligned batches; scalar inputs give shape (1,)."""
        x, y = self._check_pair(x, y)
        if x.shape[0] != y.shape[0]:
            raise DimMismatch("pairwise cost needs equal batch sizes")
        if self.kind == "half_sq_euclidean":
            return 0.5 * np.sum((x - y) ** 2, axis=1)
        if self.kind == "sq_euclidean":
            return np.sum((x - y) ** 2, axis=1)
        if self.kind == "euclidean":
            return np.sqrt(np.sum((x - y) ** 2, axis=1))
        ip = np.clip(np.sum(x * y, axis=1), -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)
        return np.arccos(ip)

    def matrix(self, x, y) -> np.ndarray:
        """Full (n, m) cost matrix."""
        x, y = self._check_pair(x, y)
        if self.kind == "sphere_geodesic":
            ip = np.clip(x @ y.T, -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)
            return np.arccos(ip)
        sq = (
            np.sum(x * x, axis=1)[:, None]
            + np.sum(y * y, axis=1)[None, :]
            - 2.0 * (x @ y.T)
        )
        np.maximum(sq, 0.0, out=sq)
        if self.kind == "half_sq_euclidean":
            return 0.5 * sq
        if self.kind == "sq_euclidean":
            return sq
        return np.sqrt(sq)

    def record_pairwise(self, tape: Tape, x_id: int, y_id: int) -> int:
        d = tape.sub(x_id, y_id)
        if self.kind == "sphere_geodesic":
            return tape.acos_clamped(tape.sum_rows(tape.mul(x_id, y_id)), ACOS_CLAMP)
        sq = tape.sum_rows(tape.mul(d, d))
        if self.kind == "half_sq_euclidean":
            return tape.scale(sq, 0.5)
        if self.kind == "sq_euclidean":
            return sq
        return tape.sqrt_safe(sq)

    def conjugate_gradient_value(self, p: np.ndarray) -> np.ndarray:
        if self.conjugate_gradient == "identity":
            return p
        if self.conjugate_gradient == "half":
            return 0.5 * p
        raise MissingConjugateGradient(
            f"cost {self.kind!r} has no closed-form conjugate gradient")

    def record_conjugate_gradient(self, tape: Tape, p_id: int) -> int:
        if self.conjugate_gradient == "identity":
            return p_id
        if self.conjugate_gradient == "half":
            return tape.scale(p_id, 0.5)
        raise MissingConjugateGradient(
            f"cost {self.kind!r} has no closed-form conjugate gradient")


_COSTS = {
    "half_sq_euclidean": CostFunction("half_sq_euclidean", True, "identity"),
    "sq_euclidean": CostFunction("sq_euclidean", True, "half"),
    "euclidean": CostFunction("euclidean", True, None),
    "sphere_geodesic": CostFunction("sphere_geodesic", False, None),
}


def cost_function(kind: str) -> CostFunction:
    if kind not in _COSTS:
        raise ValueError(f"unknown cost kind {kind!r}; choose from {COST_KINDS}")
    return _COSTS[kind]


# ---------------------------------------------------------------------------
# expectiles


def expectile_loss(u, tau: float):
    """Asymmetric squared loss |tau - 1[u <= 0]| u^2 (weight 1-tau at u=0)."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    w = np.where(u <= 0.0, 1.0 - tau, tau)
    out = w * u * u
    return float(out) if out.ndim == 0 else out


def scalar_expectile(samples: Sequence[float], tau: float) -> float:
    """The tau-expectile of a sample set, by bisection to 1e-10.

    Solves tau * sum_{s>e}(s-e) = (1-tau) * sum_{s<=e}(e-s); the left side
    decreases and the right increases in e, so the root is unique and lies
    in [min, max].
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.size == 0:
        raise EmptyBatch("scalar_expectile needs at least one sample")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")

    def imbalance(e):
        above = tau * np.sum(np.maximum(s - e, 0.0))
        below = (1.0 - tau) * np.sum(np.maximum(e - s, 0.0))
        return above - below

    lo, hi = float(s.min()), float(s.max())
    if lo == hi:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        v = imbalance(mid)
        if v == 0.0:
            return mid
        if v > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-10:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class EnotConfig:
    """All training hyperparameters of the minimax loop."""

    tau: float = 0.9
    lam: float = 0.3
    bidirectional: bool = False
    map_parametrization: str = "residual_mlp"
    batch_size: int = 1024
    train_steps: int = 1000
    cost: CostFunction = field(default_factory=lambda: cost_function("half_sq_euclidean"))
    f_init_seed: int = 1
    g_init_seed: int = 2

    def __post_init__(self):
        if isinstance(self.cost, str):
            self.cost = cost_function(self.cost)
        if self.tau < 0.5:
            raise ValueError(f"tau must be >= 0.5, got {self.tau}")
        if self.tau > TAU_MAX:
            warnings.warn(
                f"tau={self.tau} clamped to {TAU_MAX}; values near 1 destabilize "
                "training", RuntimeWarning, stacklevel=2)
            self.tau = TAU_MAX
        if self.lam < 0.0:
            raise ValueError("lambda weight must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.train_steps < 0:
            raise ValueError("train_steps must be >= 0")
        if self.map_parametrization not in MAP_PARAMETRIZATIONS:
            raise ValueError(
                f"unknown map_parametrization {self.map_parametrization!r}")
        if self.bidirectional:
            if self.map_parametrization != "potential_gradient":
                raise ValueError(
                    "bidirectional training expresses both maps through "
                    "potential gradients; set map_parametrization="
                    "'potential_gradient'")
            if not (self.cost.is_h_of_difference
                    and self.cost.conjugate_gradient is not None):
                raise ValueError(
                    f"bidirectional training needs a cost h(x-y) with known "
                    f"conjugate gradient; {self.cost.kind!r} has none")
        if (self.map_parametrization == "potential_gradient"
                and self.cost.conjugate_gradient is None):
            raise MissingConjugateGradient(
                f"potential_gradient maps need grad h*; cost {self.cost.kind!r} "
                "has none")


@dataclass
class OptimizerSettings:
    lr0: float = 3e-4
    lr_final: float = 1e-4
    betas_f: tuple[float, float] = (0.9, 0.9)
    betas_g: tuple[float, float] = (0.9, 0.7)
    eps: float = 1e-8
    schedule_steps: int | None = None  # defaults to train_steps


@dataclass
class TrainState:
    f: PotentialNetwork  # map side: residual map net or scalar potential
    g: PotentialNetwork  # potential side
    opt_f: AdamState
    opt_g: AdamState
    step: int = 0
    status: str = RUNNING


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_f: float | None
    loss_g: float | None
    reg_g: float | None
    reg_f: float | None
    dist_estimate: float | None
    status: str


def init_train_state(config: EnotConfig, dim: int,
                     arch_f: ArchitectureSpec | None = None,
                     arch_g: ArchitectureSpec | None = None,
                     optimizer: OptimizerSettings | None = None) -> TrainState:
    arch_f = arch_f or ArchitectureSpec(hidden=(128, 128, 128))
    arch_g = arch_g or ArchitectureSpec(hidden=(128, 128, 128))
    optimizer = optimizer or OptimizerSettings()
    arch_f = ArchitectureSpec(arch_f.hidden, arch_f.activation, config.f_init_seed)
    arch_g = ArchitectureSpec(arch_g.hidden, arch_g.activation, config.g_init_seed)
    nested = config.map_parametrization == "potential_gradient"
    if nested and arch_f.activation not in autodiff.C2_ACTIVATIONS:
        warnings.warn(
            f"activation {arch_f.activation!r} is only piecewise C^2; "
            "potential-gradient maps differentiate through an input gradient, "
            "prefer 'smoothed_elu'", RuntimeWarning, stacklevel=2)
    if config.map_parametrization == "residual_mlp":
        f = PotentialNetwork.init(arch_f, dim, dim, zero_init_last=True)
    else:
        f = PotentialNetwork.init(arch_f, dim, 1)
    g = PotentialNetwork.init(arch_g, dim, 1)
    if config.bidirectional and arch_g.activation not in autodiff.C2_ACTIVATIONS:
        warnings.warn(
            f"activation {arch_g.activation!r} is only piecewise C^2 for the "
            "inverse-map potential; prefer 'smoothed_elu'",
            RuntimeWarning, stacklevel=2)
    opt_f = AdamState.init(f.n_params, *optimizer.betas_f, eps=optimizer.eps)
    opt_g = AdamState.init(g.n_params, *optimizer.betas_g, eps=optimizer.eps)
    return TrainState(f, g, opt_f, opt_g, 0, RUNNING)


# ---------------------------------------------------------------------------
# losses and estimators (plain numpy forms, used directly by tests and eval)


def _pot_values(g, x) -> np.ndarray:
    vals = g.value(x) if hasattr(g, "value") else g(x)
    return np.asarray(vals, dtype=np.float64).reshape(len(x))


def _require_batch(*batches):
    for b in batches:
        if len(b) == 0:
            raise EmptyBatch("batch must be non-empty")


def loss_g(g, t_outputs, y_batch) -> float:
    """-mean g(y) + mean g(T(x))."""
    _require_batch(t_outputs, y_batch)
    return float(-np.mean(_pot_values(g, y_batch)) + np.mean(_pot_values(g, t_outputs)))


def loss_f(g, x_batch, t_outputs, cost: CostFunction) -> float:
    """mean over the batch of c(x, T(x)) - g(T(x))."""
    _require_batch(x_batch, t_outputs)
    return float(np.mean(cost.pairwise(x_batch, t_outputs)
                         - _pot_values(g, t_outputs)))


def reg_g(g, x_batch, y_batch, t_outputs, cost: CostFunction, tau: float) -> float:
    """Expectile penalty on g^T(x) - c(x, y) + g(y), paired by batch index."""
    _require_batch(x_batch, y_batch, t_outputs)
    u = (cost.pairwise(x_batch, t_outputs) - _pot_values(g, t_outputs)
         - cost.pairwise(x_batch, y_batch) + _pot_values(g, y_batch))
    return float(np.mean(expectile_loss(u, tau)))


def reg_f(f, x_batch, y_batch, tinv_outputs, cost: CostFunction, tau: float) -> float:
    """Mirror penalty for the inverse direction (bidirectional mode)."""
    _require_batch(x_batch, y_batch, tinv_outputs)
    u = (cost.pairwise(tinv_outputs, y_batch) - _pot_values(f, tinv_outputs)
         - cost.pairwise(x_batch, y_batch) + _pot_values(f, x_batch))
    return float(np.mean(expectile_loss(u, tau)))


def apply_map(map_net: PotentialNetwork, x: np.ndarray, cost: CostFunction,
              parametrization: str) -> np.ndarray:
    """Evaluate the learned transport map on a batch."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if parametrization == "residual_mlp":
        t = map_net.residual_value(x)
        if cost.kind == "sphere_geodesic":
            t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True),
                               autodiff.DERIV_FLOOR)
        return t
    z = input_gradient(map_net, x)
    return x - cost.conjugate_gradient_value(z)


def transport_map(state: TrainState, x: np.ndarray, config: EnotConfig) -> np.ndarray:
    return apply_map(state.f, x, config.cost, config.map_parametrization)


def inverse_transport_map(state: TrainState, y: np.ndarray,
                          config: EnotConfig) -> np.ndarray:
    """y - grad h*(grad g(y)); defined in bidirectional mode."""
    if not config.bidirectional:
        raise ValueError("inverse map is only trained in bidirectional mode")
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    z = input_gradient(state.g, y)
    return y - config.cost.conjugate_gradient_value(z)


def estimate_distance(state: TrainState, x_batch, y_batch,
                      config: EnotConfig) -> float:
    """mean of g(y) + c(x, T(x)) - g(T(x)): the dual objective estimate."""
    _require_batch(x_batch, y_batch)
    t = transport_map(state, np.asarray(x_batch, dtype=np.float64), config)
    return float(np.mean(_pot_values(state.g, y_batch))
                 + loss_f(state.g, x_batch, t, config.cost))


def c_transform_bruteforce(g, y, x_samples, cost: CostFunction) -> float:
    """Finite-sample conjugate min_x [c(x, y) - g(x)]; validation oracle."""
    _require_batch(x_samples)
    x_samples = np.atleast_2d(np.asarray(x_samples, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    c_row = cost.matrix(x_samples, y)[:, 0]
    return float(np.min(c_row - _pot_values(g, x_samples)))


# ---------------------------------------------------------------------------
# training


def _fused_step_pass(map_net: PotentialNetwork, pot_net: PotentialNetwork,
                     src: np.ndarray, dst: np.ndarray, cost: CostFunction,
                     parametrization: str, tau: float, lam: float,
                     include_reg: bool):
    """Both loss gradients from one shared tape.

    The map loss mean[c(x,T(x)) - g(T(x))] is differentiated in the map-side
    parameters, the potential loss -mean g(y) + mean g(T(x)) (+ lam * reg) in
    the potential's; pruned reverse sweeps make each see the other network as
    a constant, matching the simultaneous update of the minimax step. In
    potential-gradient mode T(x) = x - grad h*(grad f(x)), and the map-side
    gradient flows through the input-gradient of f via a dual-number pass.

    Returns (map_loss, map_grad, dual_part, reg, mean_g_dst, pot_grad).
    """
    nested = parametrization == "potential_gradient"
    if nested:
        f_tape = Tape()
        leaves_f = map_net.param_leaves(f_tape)
        x_leaf = f_tape.leaf("x")
        f_tape.sum_all(map_net.record_forward(f_tape, x_leaf, leaves_f))
        f_bind = dict(leaves_f.bindings)
        f_bind[x_leaf] = src
        autodiff.evaluate(f_tape, f_bind)
        (z_val,) = autodiff.grad(f_tape, [x_leaf])

    tape = Tape()
    leaves_p = pot_net.param_leaves(tape)
    x_id = tape.const(src)
    if nested:
        z_id = tape.leaf("input_grad")
        t_id = tape.sub(x_id, cost.record_conjugate_gradient(tape, z_id))
    else:
        leaves_m = map_net.param_leaves(tape)
        t_id = map_net.record_residual_map(tape, x_id, leaves_m)
        if cost.kind == "sphere_geodesic":
            t_id = tape.normalize_rows(t_id)
    c_id = cost.record_pairwise(tape, x_id, t_id)
    gt_id = pot_net.record_forward(tape, t_id, leaves_p)
    gy_id = pot_net.record_forward(tape, tape.const(dst), leaves_p)
    lf_id = tape.mean_all(tape.sub(c_id, gt_id))
    mean_gy_id = tape.mean_all(gy_id)
    lg_id = tape.add(tape.neg(mean_gy_id), tape.mean_all(gt_id))
    reg_id = None
    total_id = lg_id
    if include_reg:
        gap_id = tape.sub(c_id, tape.const(cost.pairwise(src, dst)))
        u_id = tape.add(gap_id, tape.sub(gy_id, gt_id))
        reg_id = tape.mean_all(tape.expectile_penalty(u_id, tau))
        total_id = tape.add(lg_id, tape.scale(reg_id, lam))

    bindings = dict(leaves_p.bindings)
    if nested:
        bindings[z_id] = z_val
    else:
        bindings.update(leaves_m.bindings)
    autodiff.evaluate(tape, bindings, check_output=False)

    if nested:
        (w_val,) = autodiff.grad(tape, [z_id], output=lf_id)
        autodiff.evaluate(f_tape, f_bind, tangents={x_leaf: w_val},
                          check_output=False)
        dual_grads = autodiff.grad(f_tape, leaves_f.ids)
        map_grad = map_net.flatten_param_grads(
            [autodiff.tangent(g) for g in dual_grads])
    else:
        map_grad = map_net.flatten_param_grads(
            autodiff.grad(tape, leaves_m.ids, output=lf_id))
    pot_grad = pot_net.flatten_param_grads(
        autodiff.grad(tape, leaves_p.ids, output=total_id))

    vals = tape.values
    reg = float(np.asarray(vals[reg_id])) if reg_id is not None else None
    return (float(np.asarray(vals[lf_id])), map_grad,
            float(np.asarray(vals[lg_id])), reg,
            float(np.asarray(vals[mean_gy_id])), pot_grad)


def train_step(state: TrainState, x_batch: np.ndarray, y_batch: np.ndarray,
               config: EnotConfig, lr: float,
               _force_reg: bool | None = None) -> StepRecord:
    """One optimization step on a fresh batch pair.

    In bidirectional mode odd steps swap the two networks so the inverse
    map trains on (y, x). Any non-finite loss or gradient freezes the state
    with status "diverged" and leaves both networks untouched.
    """
    if state.status != RUNNING:
        raise RuntimeError(f"cannot step a state with status {state.status!r}")
    x = np.asarray(x_batch, dtype=np.float64)
    y = np.asarray(y_batch, dtype=np.float64)
    step = state.step + 1
    swapped = config.bidirectional and step % 2 == 1
    include_reg = config.lam > 0.0 if _force_reg is None else _force_reg

    if swapped:
        map_net, opt_map = state.g, state.opt_g
        pot_net, opt_pot = state.f, state.opt_f
        src, dst = y, x
    else:
        map_net, opt_map = state.f, state.opt_f
        pot_net, opt_pot = state.g, state.opt_g
        src, dst = x, y

    try:
        map_loss, map_grad, dual_part, reg, mean_g_dst, pot_grad = \
            _fused_step_pass(map_net, pot_net, src, dst, config.cost,
                             config.map_parametrization, config.tau,
                             config.lam, include_reg)
        if not (np.all(np.isfinite(map_grad)) and np.all(np.isfinite(pot_grad))
                and np.isfinite(map_loss) and np.isfinite(dual_part)
                and (reg is None or np.isfinite(reg))):
            raise NonFiniteValue("non-finite loss or gradient")
        new_map_params, new_opt_map = adam_step(
            opt_map, map_net.params, map_grad, lr)
        new_pot_params, new_opt_pot = adam_step(
            opt_pot, pot_net.params, pot_grad, lr)
    except (NonFiniteValue, NonFiniteGradient, FloatingPointError):
        state.step = step
        state.status = DIVERGED
        return StepRecord(step, lr, None, None, None, None, None, DIVERGED)

    if swapped:
        state.g, state.opt_g = map_net.with_params(new_map_params), new_opt_map
        state.f, state.opt_f = pot_net.with_params(new_pot_params), new_opt_pot
        rec = StepRecord(step, lr, loss_f=dual_part, loss_g=map_loss,
                         reg_g=None, reg_f=reg, dist_estimate=None,
                         status=RUNNING)
    else:
        state.f, state.opt_f = map_net.with_params(new_map_params), new_opt_map
        state.g, state.opt_g = pot_net.with_params(new_pot_params), new_opt_pot
        rec = StepRecord(step, lr, loss_f=map_loss, loss_g=dual_part,
                         reg_g=reg, reg_f=None,
                         dist_estimate=mean_g_dst + map_loss, status=RUNNING)
    state.step = step
    return rec


def train(config: EnotConfig, sampler_alpha, sampler_beta,
          arch_f: ArchitectureSpec | None = None,
          arch_g: ArchitectureSpec | None = None,
          optimizer: OptimizerSettings | None = None,
          state: TrainState | None = None,
          on_step: Callable[[StepRecord], None] | None = None):
    """Run the training loop; returns (state, records).

    Batches are drawn per step from counter-based streams keyed by the step
    index, so resuming from a checkpointed state reproduces the exact
    continuation. A Diverged state stops the loop early and is returned with
    the partial log.
    """
    if sampler_alpha.dim != sampler_beta.dim:
        raise DimMismatch("source and target samplers must share a dimension")
    optimizer = optimizer or OptimizerSettings()
    if state is None:
        state = init_train_state(config, sampler_alpha.dim, arch_f, arch_g,
                                 optimizer)
    schedule_steps = optimizer.schedule_steps or config.train_steps
    records: list[StepRecord] = []
    if state.status == DIVERGED:  # diverged states stay frozen
        return state, records
    if config.train_steps == 0 or state.step >= config.train_steps:
        if state.status == RUNNING:
            state.status = CONVERGED
        return state, records
    schedule = CosineSchedule(optimizer.lr0, optimizer.lr_final,
                              max(schedule_steps, 1))
    for t in range(state.step + 1, config.train_steps + 1):
        lr = cosine_lr(schedule, min(t, schedule.total_steps))
        x = sampler_alpha.sample(config.batch_size, stream_offset=t)
        y = sampler_beta.sample(config.batch_size, stream_offset=t)
        rec = train_step(state, x, y, config, lr)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        if state.status == DIVERGED:
            break
    if state.status == RUNNING:
        state.status = CONVERGED
    return state, records
