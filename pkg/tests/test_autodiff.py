import math

import numpy as np
import pytest

from enot import autodiff
from enot.autodiff import (Dual, NonFiniteValue, NonScalarOutput, Tape,
                           UnboundLeaf, evaluate, grad, grad_of_input_grad)
from enot.nn import ArchitectureSpec, LeafSet, PotentialNetwork, input_gradient


def fd_param_gradient(net, x, step=1e-5):
    """Central-difference oracle over the flat parameter vector."""
    base = net.params.copy()
    g = np.zeros_like(base)
    for i in range(base.size):
        p = base.copy()
        p[i] += step
        hi = float(np.sum(net.with_params(p).value(x)))
        p[i] -= 2 * step
        lo = float(np.sum(net.with_params(p).value(x)))
        g[i] = (hi - lo) / (2 * step)
    return g


def fd_input_gradient(net, x, step=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        hi = float(np.sum(net.value(xp[None, :])))
        xp[i] -= 2 * step
        lo = float(np.sum(net.value(xp[None, :])))
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestEvaluate:
    def test_square(self):
        t = Tape()
        x = t.leaf("x")
        t.mul(x, x)
        assert evaluate(t, {x: 3.0}) == 9.0

    def test_product(self):
        t = Tape()
        x, y = t.leaf(), t.leaf()
        t.mul(x, y)
        assert evaluate(t, {x: 2.0, y: 5.0}) == 10.0

    def test_elu_at_minus_one(self):
        t = Tape()
        x = t.leaf()
        t.activation("elu", x)
        got = evaluate(t, {x: np.array(-1.0)})
        assert got == pytest.approx(math.exp(-1.0) - 1.0, abs=1e-15)

    def test_unbound_leaf(self):
        t = Tape()
        x, y = t.leaf("x"), t.leaf("y")
        t.add(x, y)
        with pytest.raises(UnboundLeaf):
            evaluate(t, {x: 1.0})

    def test_nan_guard(self):
        t = Tape()
        x = t.leaf()
        t.mul(x, x)
        with pytest.raises(NonFiniteValue):
            evaluate(t, {x: np.nan})

    def test_caches_values(self):
        t = Tape()
        x = t.leaf()
        m = t.mul(x, x)
        evaluate(t, {x: 4.0})
        assert t.values[m] == 16.0


class TestGrad:
    def test_square_gradient(self):
        t = Tape()
        x = t.leaf()
        t.mul(x, x)
        evaluate(t, {x: 3.0})
        assert grad(t, [x])[0] == 6.0

    def test_half_norm_gradient_is_identity(self):
        t = Tape()
        x = t.leaf()
        t.scale(t.sum_all(t.mul(x, x)), 0.5)
        v = np.array([[1.0, 2.0]])
        evaluate(t, {x: v})
        np.testing.assert_allclose(grad(t, [x])[0], v)

    def test_disconnected_leaf_gets_exact_zero(self):
        t = Tape()
        x, y = t.leaf(), t.leaf()
        t.mul(x, x)
        evaluate(t, {x: 2.0, y: np.array([1.0, 1.0])})
        gy = grad(t, [y])[0]
        assert gy.shape == (2,) and np.all(gy == 0.0)

    def test_nonscalar_output_rejected(self):
        t = Tape()
        x = t.leaf()
        t.mul(x, x)
        evaluate(t, {x: np.array([1.0, 2.0])})
        with pytest.raises(NonScalarOutput):
            grad(t, [x])

    def test_requires_evaluate_first(self):
        t = Tape()
        x = t.leaf()
        t.mul(x, x)
        with pytest.raises(autodiff.AutodiffError):
            grad(t, [x])

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for case in range(10):
            d = int(rng.integers(1, 9))
            hidden = tuple(int(w) for w in rng.integers(2, 33, size=rng.integers(1, 4)))
            act = ("elu", "smoothed_elu", "leaky_relu")[case % 3]
            net = PotentialNetwork.init(
                ArchitectureSpec(hidden, act, init_seed=case), d, 1)
            x = rng.normal(size=(3, d))
            tape = Tape()
            leaves = net.param_leaves(tape)
            x_id = tape.leaf("x")
            tape.sum_all(net.record_forward(tape, x_id, leaves))
            evaluate(tape, {**leaves.bindings, x_id: x})
            flat = net.flatten_param_grads(grad(tape, leaves.ids))
            assert rel_err(flat, fd_param_gradient(net, x)) < 1e-6
            gx = input_gradient(net, x[0])
            assert rel_err(gx, fd_input_gradient(net, x[0])) < 1e-6

    def test_linearity(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            a, b = rng.normal(), rng.normal()
            vals = rng.normal(size=4)
            t = Tape()
            p, q = t.leaf(), t.leaf()
            u = t.sum_all(t.mul(p, t.activation("elu", q)))
            v = t.sum_all(t.mul(q, q))
            combo = t.add(t.scale(u, a), t.scale(v, b))
            evaluate(t, {p: vals[:2], q: vals[2:]})
            gu = grad(t, [p, q], output=u)
            gv = grad(t, [p, q], output=v)
            gc = grad(t, [p, q], output=combo)
            for k in range(2):
                np.testing.assert_allclose(gc[k], a * gu[k] + b * gv[k],
                                           rtol=1e-12, atol=1e-14)

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(0)
        net = PotentialNetwork.init(ArchitectureSpec((16, 16), "elu", 1), 4, 1)
        x = rng.normal(size=(8, 4))

        def run():
            tape = Tape()
            leaves = net.param_leaves(tape)
            x_id = tape.leaf()
            tape.sum_all(net.record_forward(tape, x_id, leaves))
            evaluate(tape, {**leaves.bindings, x_id: x})
            return net.flatten_param_grads(grad(tape, leaves.ids))

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)


class TestNested:
    def test_quadratic_scale_case(self):
        # f_a(x) = a/2 ||x||^2, downstream(v) = ||v||^2 / 2  ->  d/da = a ||x||^2
        class ScalePot:
            activation = "smoothed_elu"

            def __init__(self, a):
                self.a = np.array([a])

            def param_leaves(self, tape):
                i = tape.leaf("a")
                return LeafSet([i], {i: self.a})

            def record_forward(self, tape, x_id, leaves):
                half_sq = tape.scale(tape.sum_rows(tape.mul(x_id, x_id)), 0.5)
                return tape.mul(half_sq, leaves.ids[0])

            def flatten_param_grads(self, grads):
                return grads[0]

        a, x = 1.7, np.array([1.0, 2.0])
        gflat, _, z = grad_of_input_grad(
            ScalePot(a), x,
            lambda tp, zid: tp.scale(tp.sum_all(tp.mul(zid, zid)), 0.5))
        np.testing.assert_allclose(gflat, [a * np.dot(x, x)], rtol=1e-12)
        np.testing.assert_allclose(z, a * x, rtol=1e-12)

    def test_unused_parameter_gets_zero(self):
        # the input gradient never depends on the final bias
        net = PotentialNetwork.init(
            ArchitectureSpec((6,), "smoothed_elu", 3), 2, 1)
        gflat, _, _ = grad_of_input_grad(
            net, np.array([0.3, -0.7]),
            lambda tp, zid: tp.sum_all(tp.mul(zid, zid)))
        assert gflat[-1] == 0.0

    @pytest.mark.parametrize("case", range(4))
    def test_matches_finite_differences_over_params(self, case):
        rng = np.random.default_rng(100 + case)
        d = int(rng.integers(2, 5))
        net = PotentialNetwork.init(
            ArchitectureSpec((8, 6), "smoothed_elu", case), d, 1)
        x = rng.normal(size=(3, d))
        c = rng.normal(size=(3, d))

        def downstream(tp, zid):
            delta = tp.sub(zid, tp.const(c))
            return tp.mean_all(tp.sum_rows(tp.mul(delta, delta)))

        gflat, _, _ = grad_of_input_grad(net, x, downstream)

        def phi(params):
            z = input_gradient(net.with_params(params), x)
            return float(np.mean(np.sum((z - c) ** 2, axis=1)))

        step = 1e-5
        fd = np.zeros_like(net.params)
        for i in range(net.n_params):
            p = net.params.copy()
            p[i] += step
            hi = phi(p)
            p[i] -= 2 * step
            fd[i] = (hi - phi(p)) / (2 * step)
        assert rel_err(gflat, fd) < 1e-6

    def test_non_smooth_activation_warns(self):
        net = PotentialNetwork.init(ArchitectureSpec((6,), "elu", 0), 2, 1)
        with pytest.warns(RuntimeWarning, match="C\\^2"):
            grad_of_input_grad(net, np.array([0.5, 0.5]),
                               lambda tp, zid: tp.sum_all(tp.mul(zid, zid)))


class TestDualArithmetic:
    def test_matmul_product_rule(self):
        rng = np.random.default_rng(3)
        a, da = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        b, db = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        out = Dual(a, da) @ Dual(b, db)
        np.testing.assert_allclose(out.p, a @ b)
        np.testing.assert_allclose(out.t, da @ b + a @ db)

    def test_division_quotient_rule(self):
        x = Dual(np.array(2.0), np.array(1.0))
        y = Dual(np.array(4.0), np.array(3.0))
        out = x / y
        assert out.p == pytest.approx(0.5)
        assert out.t == pytest.approx((1.0 * 4.0 - 2.0 * 3.0) / 16.0)

    def test_numpy_defers_to_dual(self):
        arr = np.ones(3)
        out = arr * Dual(np.ones(3), np.full(3, 2.0))
        assert isinstance(out, Dual)
        np.testing.assert_allclose(out.t, 2.0)
