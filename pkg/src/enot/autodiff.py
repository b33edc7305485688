"""Reverse-mode automatic differentiation over flat float64 arrays.

Values on the tape are rank-0/1/2 numpy arrays (batches live in the leading
axis). One level of nested differentiation is supported by running both the
forward pass and the reverse sweep in dual-number arithmetic: seeding a
tangent on an input leaf and reading the tangent component of a parameter
adjoint yields d/dtheta of a directional input-derivative, which is exactly
what differentiating through an input-gradient requires.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DERIV_FLOOR = 1e-12  # guards 1/sqrt factors in vjps


class AutodiffError(Exception):
    pass


class UnboundLeaf(AutodiffError):
    pass


class NonFiniteValue(AutodiffError):
    """Raised when the NaN guard trips; training treats it as divergence."""


class NonScalarOutput(AutodiffError):
    pass


# ---------------------------------------------------------------------------
# dual numbers


class Dual:
    """A value paired with a tangent of the same shape."""

    __slots__ = ("p", "t")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, p, t):
        self.p = p
        self.t = t

    @property
    def T(self):
        return Dual(self.p.T, self.t.T)

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p + o.p, self.t + o.t)
        return Dual(self.p + o, self.t)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p - o.p, self.t - o.t)
        return Dual(self.p - o, self.t)

    def __rsub__(self, o):
        return Dual(o - self.p, -self.t)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p * o.p, self.t * o.p + self.p * o.t)
        return Dual(self.p * o, self.t * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p / o.p, self.t / o.p - self.p * o.t / (o.p * o.p))
        return Dual(self.p / o, self.t / o)

    def __rtruediv__(self, o):
        return Dual(o / self.p, -o * self.t / (self.p * self.p))

    def __neg__(self):
        return Dual(-self.p, -self.t)

    def __matmul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p @ o.p, self.t @ o.p + self.p @ o.t)
        return Dual(self.p @ o, self.t @ o)

    def __rmatmul__(self, o):
        return Dual(o @ self.p, o @ self.t)

    def __repr__(self):
        return f"Dual(p={self.p!r}, t={self.t!r})"


def primal(x):
    return x.p if isinstance(x, Dual) else x


def tangent(x):
    """Tangent component; exact zeros for values untouched by any seed."""
    if isinstance(x, Dual):
        return x.t
    return np.zeros_like(x)


def _vexp(x):
    if isinstance(x, Dual):
        e = np.exp(x.p)
        return Dual(e, e * x.t)
    return np.exp(x)


def _vsqrt(x):
    if isinstance(x, Dual):
        s = np.sqrt(x.p)
        return Dual(s, 0.5 * x.t / np.maximum(s, DERIV_FLOOR))
    return np.sqrt(x)


def _vwhere(mask, a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        pa, ta = (a.p, a.t) if isinstance(a, Dual) else (a, 0.0)
        pb, tb = (b.p, b.t) if isinstance(b, Dual) else (b, 0.0)
        return Dual(np.where(mask, pa, pb), np.where(mask, ta, tb))
    return np.where(mask, a, b)


def _vsum(x, axis=None, keepdims=False):
    if isinstance(x, Dual):
        return Dual(
            np.sum(x.p, axis=axis, keepdims=keepdims),
            np.sum(x.t, axis=axis, keepdims=keepdims),
        )
    return np.sum(x, axis=axis, keepdims=keepdims)


def _vreshape(x, shape):
    if isinstance(x, Dual):
        return Dual(np.reshape(x.p, shape), np.reshape(x.t, shape))
    return np.reshape(x, shape)


def _vbroadcast(x, shape):
    if isinstance(x, Dual):
        return Dual(np.broadcast_to(x.p, shape), np.broadcast_to(x.t, shape))
    return np.broadcast_to(x, shape)


def _vtranspose(x):
    return x.T


def _vfloor(x, floor):
    """max(x, floor) with a zero tangent on the floored entries."""
    return _vwhere(primal(x) >= floor, x, floor)


def _unbroadcast(g, shape):
    """Sum a broadcasted adjoint back down to the operand shape."""
    gshape = primal(g).shape
    if gshape == tuple(shape):
        return g
    while len(primal(g).shape) > len(shape):
        g = _vsum(g, axis=0)
    for i, s in enumerate(shape):
        if s == 1 and primal(g).shape[i] != 1:
            g = _vsum(g, axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# activations (value and first derivative, dual-aware so second derivatives
# fall out of tangent propagation)

C2_ACTIVATIONS = ("smoothed_elu",)


def _split_sign(z):
    """Clamp each branch's argument so exp never overflows in dead lanes."""
    mask = primal(z) > 0
    zneg = _vwhere(mask, 0.0, z)
    zpos = _vwhere(mask, z, 0.0)
    return mask, zneg, zpos


def _act_value(kind, z, alpha):
    if not isinstance(z, Dual):
        # branchless forms: the off-branch contribution vanishes exactly
        if kind == "elu":
            v = np.expm1(np.minimum(z, 0.0))
            v += np.maximum(z, 0.0)
            return v
        if kind == "smoothed_elu":
            zp = np.maximum(z, 0.0)
            v = np.expm1(np.minimum(z, 0.0))
            v += zp + 0.5 * zp * zp * np.exp(-zp)
            return v
        if kind == "leaky_relu":
            return np.maximum(z, 0.0) + alpha * np.minimum(z, 0.0)
        raise AutodiffError(f"unknown activation kind: {kind}")
    mask, zneg, zpos = _split_sign(z)
    if kind == "elu":
        return _vwhere(mask, z, _vexp(zneg) - 1.0)
    if kind == "smoothed_elu":
        # exp(z)-1 for z<=0, z + z^2 exp(-z)/2 for z>0: value, slope and
        # curvature all agree at 0, so the blend is C^2 everywhere.
        pos = zpos + 0.5 * zpos * zpos * _vexp(-zpos)
        return _vwhere(mask, pos, _vexp(zneg) - 1.0)
    if kind == "leaky_relu":
        return _vwhere(mask, z, alpha * z)
    raise AutodiffError(f"unknown activation kind: {kind}")


def _act_deriv(kind, z, alpha, out=None):
    """First derivative; the plain path reuses the cached activation value
    (exp(z) = out + 1 on the negative branch of both elu variants, and the
    positive branch is where out >= 0)."""
    if not isinstance(z, Dual) and not isinstance(out, Dual) and out is not None:
        if kind == "elu":
            return 1.0 + np.minimum(out, 0.0)
        if kind == "smoothed_elu":
            zp = np.maximum(z, 0.0)
            d = 1.0 + np.minimum(out, 0.0)
            d += np.exp(-zp) * (zp - 0.5 * zp * zp)
            return d
        if kind == "leaky_relu":
            return alpha + (1.0 - alpha) * np.greater(z, 0.0)
        raise AutodiffError(f"unknown activation kind: {kind}")
    mask, zneg, zpos = _split_sign(z)
    if kind == "elu":
        return _vwhere(mask, 1.0, _vexp(zneg))
    if kind == "smoothed_elu":
        pos = 1.0 + _vexp(-zpos) * (zpos - 0.5 * zpos * zpos)
        return _vwhere(mask, pos, _vexp(zneg))
    if kind == "leaky_relu":
        return _vwhere(mask, 1.0, alpha)
    raise AutodiffError(f"unknown activation kind: {kind}")


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    args: tuple
    aux: object = None


class Tape:
    """Append-only record of operations; node ids are topologically ordered.

    Leaves are declared up front and bound at evaluate() time, so one tape
    can be re-evaluated against fresh batches. Single-owner: do not share a
    tape between concurrent sweeps.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.roots: list[int] = []
        self.values: list | None = None

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, args, aux=None) -> int:
        for a in args:
            if not (0 <= a < len(self.nodes)):
                raise AutodiffError(f"operand id {a} out of range")
        self.nodes.append(Node(op, args, aux))
        return len(self.nodes) - 1

    # -- leaves and constants

    def leaf(self, name: str | None = None) -> int:
        i = self._push("leaf", (), name)
        self.roots.append(i)
        return i

    def const(self, value) -> int:
        return self._push("const", (), np.asarray(value, dtype=np.float64))

    # -- arithmetic

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._push("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._push("mul", (a, b))

    def neg(self, a: int) -> int:
        return self._push("neg", (a,))

    def scale(self, a: int, c: float) -> int:
        return self._push("scale", (a,), float(c))

    def affine(self, x: int, w: int, b: int) -> int:
        return self._push("affine", (x, w, b))

    def activation(self, kind: str, z: int, alpha: float = 0.01) -> int:
        if kind not in ("elu", "smoothed_elu", "leaky_relu"):
            raise AutodiffError(f"unknown activation kind: {kind}")
        return self._push("act", (z,), (kind, float(alpha)))

    # -- shape and reductions

    def squeeze_col(self, a: int) -> int:
        return self._push("squeeze_col", (a,))

    def sum_all(self, a: int) -> int:
        return self._push("sum_all", (a,))

    def sum_rows(self, a: int) -> int:
        return self._push("sum_rows", (a,))

    def mean_all(self, a: int) -> int:
        return self._push("mean_all", (a,))

    # -- nonlinearities used by costs and losses

    def sqrt_safe(self, a: int) -> int:
        return self._push("sqrt_safe", (a,))

    def acos_clamped(self, a: int, eps: float = 1e-12) -> int:
        return self._push("acos_clamped", (a,), float(eps))

    def normalize_rows(self, a: int) -> int:
        return self._push("normalize_rows", (a,))

    def expectile_penalty(self, u: int, tau: float) -> int:
        return self._push("expectile_penalty", (u,), float(tau))


# ---------------------------------------------------------------------------
# forward rules


def _forward(node: Node, vals):
    op = node.op
    a = node.args
    if op == "add":
        return vals[a[0]] + vals[a[1]]
    if op == "sub":
        return vals[a[0]] - vals[a[1]]
    if op == "mul":
        return vals[a[0]] * vals[a[1]]
    if op == "neg":
        return -vals[a[0]]
    if op == "scale":
        return vals[a[0]] * node.aux
    if op == "affine":
        x, w, b = vals[a[0]], vals[a[1]], vals[a[2]]
        if not (isinstance(x, Dual) or isinstance(w, Dual) or isinstance(b, Dual)):
            v = x @ w
            v += b
            return v
        return x @ w + b
    if op == "act":
        kind, alpha = node.aux
        return _act_value(kind, vals[a[0]], alpha)
    if op == "squeeze_col":
        v = vals[a[0]]
        return _vreshape(v, (primal(v).shape[0],))
    if op == "sum_all":
        return _vsum(vals[a[0]])
    if op == "sum_rows":
        return _vsum(vals[a[0]], axis=1)
    if op == "mean_all":
        v = vals[a[0]]
        return _vsum(v) / primal(v).size
    if op == "sqrt_safe":
        return _vsqrt(vals[a[0]])
    if op == "acos_clamped":
        eps = node.aux
        v = vals[a[0]]
        inside = (primal(v) > -1.0 + eps) & (primal(v) < 1.0 - eps)
        u = _vwhere(inside, v, np.clip(primal(v), -1.0 + eps, 1.0 - eps))
        if isinstance(u, Dual):
            s = np.sqrt(1.0 - u.p * u.p)
            return Dual(np.arccos(u.p), -u.t / s)
        return np.arccos(u)
    if op == "normalize_rows":
        v = vals[a[0]]
        nrm = _vfloor(_vsqrt(_vsum(v * v, axis=1, keepdims=True)), DERIV_FLOOR)
        return v / nrm
    if op == "expectile_penalty":
        tau = node.aux
        u = vals[a[0]]
        w = np.where(primal(u) <= 0.0, 1.0 - tau, tau)
        return w * u * u
    raise AutodiffError(f"no forward rule for op {op}")


# ---------------------------------------------------------------------------
# reverse rules: return one adjoint per operand; slots whose needed flag is
# False may come back as None so dead branches cost nothing


def _vjp(node: Node, vals, out, g, needed):
    op = node.op
    a = node.args
    if op == "add":
        return (
            _unbroadcast(g, primal(vals[a[0]]).shape) if needed[0] else None,
            _unbroadcast(g, primal(vals[a[1]]).shape) if needed[1] else None,
        )
    if op == "sub":
        return (
            _unbroadcast(g, primal(vals[a[0]]).shape) if needed[0] else None,
            _unbroadcast(-g, primal(vals[a[1]]).shape) if needed[1] else None,
        )
    if op == "mul":
        va, vb = vals[a[0]], vals[a[1]]
        return (
            _unbroadcast(g * vb, primal(va).shape) if needed[0] else None,
            _unbroadcast(g * va, primal(vb).shape) if needed[1] else None,
        )
    if op == "neg":
        return (-g,)
    if op == "scale":
        return (g * node.aux,)
    if op == "affine":
        x, w = vals[a[0]], vals[a[1]]
        return (
            g @ _vtranspose(w) if needed[0] else None,
            _vtranspose(x) @ g if needed[1] else None,
            _vsum(g, axis=0) if needed[2] else None,
        )
    if op == "act":
        kind, alpha = node.aux
        z = vals[a[0]]
        if kind == "elu" and not (isinstance(z, Dual) or isinstance(out, Dual)
                                  or isinstance(g, Dual)):
            d = np.minimum(out, 0.0)
            d += 1.0
            d *= g
            return (d,)
        return (g * _act_deriv(kind, z, alpha, out),)
    if op == "squeeze_col":
        n = primal(vals[a[0]]).shape[0]
        return (_vreshape(g, (n, 1)),)
    if op == "sum_all":
        return (_vbroadcast(g, primal(vals[a[0]]).shape),)
    if op == "sum_rows":
        shape = primal(vals[a[0]]).shape
        return (_vbroadcast(_vreshape(g, (shape[0], 1)), shape),)
    if op == "mean_all":
        v = vals[a[0]]
        return (_vbroadcast(g / primal(v).size, primal(v).shape),)
    if op == "sqrt_safe":
        return (g * 0.5 / _vfloor(out, DERIV_FLOOR),)
    if op == "acos_clamped":
        eps = node.aux
        v = vals[a[0]]
        inside = (primal(v) > -1.0 + eps) & (primal(v) < 1.0 - eps)
        u = _vwhere(inside, v, 0.0)
        d = _vwhere(inside, -1.0 / _vsqrt(1.0 - u * u), 0.0)
        return (g * d,)
    if op == "normalize_rows":
        v = vals[a[0]]
        nrm = _vfloor(_vsqrt(_vsum(v * v, axis=1, keepdims=True)), DERIV_FLOOR)
        dot = _vsum(g * out, axis=1, keepdims=True)
        return ((g - dot * out) / nrm,)
    if op == "expectile_penalty":
        tau = node.aux
        u = vals[a[0]]
        w = np.where(primal(u) <= 0.0, 1.0 - tau, tau)
        return (g * 2.0 * w * u,)
    raise AutodiffError(f"no vjp rule for op {op}")


# ---------------------------------------------------------------------------
# driver functions


def _as_value(x):
    return np.asarray(x, dtype=np.float64)


def evaluate(tape: Tape, bindings: dict, tangents: dict | None = None,
             check_output: bool = True):
    """Forward pass. Returns the value of the final node.

    bindings maps leaf id -> array. tangents (optional) seeds dual numbers on
    a subset of leaves; downstream values become Dual pairs.
    """
    if len(tape) == 0:
        raise AutodiffError("empty tape")
    vals: list = [None] * len(tape)
    for i, node in enumerate(tape.nodes):
        if node.op == "leaf":
            if i not in bindings:
                raise UnboundLeaf(f"leaf {i} ({node.aux or 'unnamed'}) not bound")
            v = _as_value(bindings[i])
            if tangents is not None and i in tangents:
                v = Dual(v, _as_value(tangents[i]))
            vals[i] = v
        elif node.op == "const":
            vals[i] = node.aux
        else:
            vals[i] = _forward(node, vals)
    tape.values = vals
    out = vals[-1]
    if check_output and not np.all(np.isfinite(primal(out))):
        raise NonFiniteValue("non-finite forward value at tape output")
    return out


def grad(tape: Tape, wrt: Sequence[int], output: int | None = None):
    """Reverse sweep; returns one gradient per requested leaf.

    Leaves with no path to the output get exact zeros. Adjoints are only
    propagated along paths that reach a requested leaf.
    """
    if tape.values is None:
        raise AutodiffError("evaluate() must run before grad()")
    vals = tape.values
    out_id = len(tape) - 1 if output is None else output
    out_val = vals[out_id]
    if primal(out_val).ndim != 0:
        raise NonScalarOutput(
            f"grad needs a scalar output, got shape {primal(out_val).shape}")

    wrt = list(wrt)
    needs = [False] * len(tape)
    for i in wrt:
        if tape.nodes[i].op != "leaf":
            raise AutodiffError(f"wrt id {i} is not a leaf")
        needs[i] = True
    for i, node in enumerate(tape.nodes):
        if not needs[i] and any(needs[a] for a in node.args):
            needs[i] = True

    seed = np.float64(1.0)
    if isinstance(out_val, Dual):
        seed = Dual(np.float64(1.0), np.float64(0.0))
    adj: dict[int, object] = {out_id: seed}

    for i in range(out_id, -1, -1):
        if i not in adj:
            continue
        node = tape.nodes[i]
        if node.op in ("leaf", "const"):
            continue
        needed = tuple(needs[a] for a in node.args)
        if not any(needed):
            continue
        contribs = _vjp(node, vals, vals[i], adj[i], needed)
        for a, gcontrib in zip(node.args, contribs):
            if gcontrib is None or not needs[a]:
                continue
            if a in adj:
                adj[a] = adj[a] + gcontrib
            else:
                adj[a] = gcontrib
    out = []
    for i in wrt:
        if i in adj:
            g = adj[i]
            shape = primal(vals[i]).shape
            if primal(g).shape != shape:  # scalar leaf broadcast upward
                g = _unbroadcast(g, shape)
            out.append(g)
        else:
            out.append(np.zeros_like(primal(vals[i])))
    return out


def grad_of_input_grad(potential, x, downstream: Callable[[Tape, int], int],
                       check_smooth: bool = True):
    """d/dtheta of downstream(grad_x potential(x)) for a scalar potential.

    ``potential`` is any object exposing ``param_leaves(tape)`` and
    ``record_forward(tape, x_id, leaves)`` (see nn.PotentialNetwork);
    ``downstream`` records a scalar expression of the input-gradient node on
    a fresh tape. ``x`` may be a single point or an (n, d) batch, in which
    case the input gradient holds per-row gradients and downstream sees the
    full block.

    Returns (flat_param_gradient, downstream_value, input_gradient).
    """
    act = getattr(potential, "activation", None)
    if check_smooth and act is not None and act not in C2_ACTIVATIONS:
        warnings.warn(
            f"activation {act!r} is not C^2; differentiating through its "
            "input-gradient uses an almost-everywhere second derivative",
            RuntimeWarning,
            stacklevel=2,
        )

    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x

    tape = Tape()
    leaves = potential.param_leaves(tape)
    x_id = tape.leaf("x")
    out = potential.record_forward(tape, x_id, leaves)
    total = tape.sum_all(out)
    del total
    bindings = dict(leaves.bindings)
    bindings[x_id] = x2
    evaluate(tape, bindings)
    (z,) = grad(tape, [x_id])

    down_tape = Tape()
    z_id = down_tape.leaf("input_grad")
    down_tape_out = downstream(down_tape, z_id)
    if down_tape_out != len(down_tape) - 1:
        raise AutodiffError("downstream must return the final node it records")
    value = evaluate(down_tape, {z_id: z})
    (w,) = grad(down_tape, [z_id])

    evaluate(tape, bindings, tangents={x_id: w}, check_output=False)
    param_grads = grad(tape, leaves.ids)
    flat = potential.flatten_param_grads([tangent(g) for g in param_grads])
    return flat, value, (z[0] if squeeze else z)
