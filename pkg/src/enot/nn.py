"""MLP potentials and transport-map networks on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff
from .autodiff import Tape

ACTIVATIONS = ("elu", "smoothed_elu", "leaky_relu")
LEAKY_SLOPE = 0.01


class DimMismatch(Exception):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    """Hidden widths, activation and init seed for one network."""

    hidden: tuple[int, ...]
    activation: str = "elu"
    init_seed: int = 0

    def __post_init__(self):
        if len(self.hidden) == 0:
            raise ValueError("hidden layer list must be non-empty")
        if any(int(w) < 1 for w in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))


@dataclass
class LeafSet:
    """Tape leaf ids for every layer's weight/bias plus their bindings."""

    ids: list[int]
    bindings: dict[int, np.ndarray]


def param_count(layer_widths: Sequence[int]) -> int:
    return sum((i + 1) * o for i, o in zip(layer_widths[:-1], layer_widths[1:]))


class PotentialNetwork:
    """An MLP R^d -> R^out over a single flat float64 parameter vector.

    out = 1 gives a scalar potential; out = d gives a map network. The last
    layer carries no activation.
    """

    def __init__(self, layer_widths: Sequence[int], activation: str,
                 params: np.ndarray):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_widths = [int(w) for w in layer_widths]
        self.activation = activation
        params = np.asarray(params, dtype=np.float64)
        expected = param_count(self.layer_widths)
        if params.shape != (expected,):
            raise ValueError(
                f"params length {params.shape} does not match layout ({expected},)")
        self.params = params
        self.layout = []
        off = 0
        for n_in, n_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            w = slice(off, off + n_in * n_out)
            off += n_in * n_out
            b = slice(off, off + n_out)
            off += n_out
            self.layout.append((w, b, n_in, n_out))

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        return self.params.size

    @classmethod
    def init(cls, spec: ArchitectureSpec, in_dim: int, out_dim: int,
             zero_init_last: bool = False) -> "PotentialNetwork":
        """Glorot-uniform weights, zero biases, deterministic per seed.

        zero_init_last zeroes the final layer so a residual map starts as
        the exact identity.
        """
        if in_dim < 1 or out_dim < 1:
            raise ValueError("in_dim and out_dim must be >= 1")
        widths = [in_dim, *spec.hidden, out_dim]
        rng = np.random.Generator(np.random.Philox(
            key=np.array([spec.init_seed, 0x6e6f_7465], dtype=np.uint64)))
        chunks = []
        n_layers = len(widths) - 1
        for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if zero_init_last and k == n_layers - 1:
                w = np.zeros((n_in, n_out))
            else:
                limit = np.sqrt(6.0 / (n_in + n_out))
                w = rng.uniform(-limit, limit, size=(n_in, n_out))
            chunks.append(w.ravel())
            chunks.append(np.zeros(n_out))
        return cls(widths, spec.activation, np.concatenate(chunks))

    # -- numpy fast paths (no tape)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimMismatch(
                f"input shape {x.shape} incompatible with in_dim {self.in_dim}")
        return x, squeeze

    def _weights(self, k: int):
        w, b, n_in, n_out = self.layout[k]
        return self.params[w].reshape(n_in, n_out), self.params[b]

    def value(self, x: np.ndarray) -> np.ndarray:
        """Plain forward pass; (n,) for potentials, (n, out) otherwise."""
        h, squeeze = self._check_input(x)
        last = len(self.layout) - 1
        for k in range(len(self.layout)):
            w, b = self._weights(k)
            h = h @ w + b
            if k != last:
                h = autodiff._act_value(self.activation, h, LEAKY_SLOPE)
        if self.out_dim == 1:
            h = h[:, 0]
        return h[0] if squeeze else h

    def residual_value(self, x: np.ndarray) -> np.ndarray:
        """x + net(x) for map networks."""
        if self.out_dim != self.in_dim:
            raise DimMismatch("residual map needs out_dim == in_dim")
        return np.asarray(x, dtype=np.float64) + self.value(x)

    # -- tape recording

    def param_leaves(self, tape: Tape) -> LeafSet:
        ids, bindings = [], {}
        for k in range(len(self.layout)):
            w, b = self._weights(k)
            wi = tape.leaf(f"W{k}")
            bi = tape.leaf(f"b{k}")
            ids.extend((wi, bi))
            bindings[wi] = w
            bindings[bi] = b
        return LeafSet(ids, bindings)

    def record_forward(self, tape: Tape, x_id: int, leaves: LeafSet) -> int:
        """Affine/activation chain; returns (n,) node for potentials,
        (n, out) node for map networks."""
        h = x_id
        last = len(self.layout) - 1
        for k in range(len(self.layout)):
            h = tape.affine(h, leaves.ids[2 * k], leaves.ids[2 * k + 1])
            if k != last:
                h = tape.activation(self.activation, h, LEAKY_SLOPE)
        if self.out_dim == 1:
            h = tape.squeeze_col(h)
        return h

    def record_residual_map(self, tape: Tape, x_id: int, leaves: LeafSet) -> int:
        if self.out_dim != self.in_dim:
            raise DimMismatch("residual map needs out_dim == in_dim")
        return tape.add(x_id, self.record_forward(tape, x_id, leaves))

    def flatten_param_grads(self, grads: Sequence[np.ndarray]) -> np.ndarray:
        """Concatenate per-leaf gradients back into flat parameter order."""
        flat = np.empty_like(self.params)
        for k, (w, b, n_in, n_out) in enumerate(self.layout):
            flat[w] = grads[2 * k].ravel()
            flat[b] = grads[2 * k + 1]
        return flat

    def with_params(self, params: np.ndarray) -> "PotentialNetwork":
        return PotentialNetwork(self.layer_widths, self.activation, params)


def input_gradient(net: PotentialNetwork, x: np.ndarray) -> np.ndarray:
    """Rows of grad_x net(x); net must be scalar-valued."""
    if net.out_dim != 1:
        raise DimMismatch("input_gradient needs a scalar potential")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    tape = Tape()
    leaves = net.param_leaves(tape)
    x_id = tape.leaf("x")
    out = net.record_forward(tape, x_id, leaves)
    tape.sum_all(out)
    bindings = dict(leaves.bindings)
    bindings[x_id] = x2
    autodiff.evaluate(tape, bindings)
    (g,) = autodiff.grad(tape, [x_id])
    return g[0] if squeeze else g
