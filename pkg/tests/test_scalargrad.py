import math

import numpy as np
import pytest

from rrcal.scalargrad import DomainError, Graph, evaluate, finite_diff


def random_graph(seed, n_params=4, n_ops=20):
    """Random domain-safe composite graph; returns (builder, params).

    The builder rebuilds the same expression for a given parameter vector,
    so finite differences see exactly the function backward differentiates.
    """
    rng = np.random.default_rng(seed)
    choices = rng.integers(0, 6, size=n_ops)
    picks = rng.integers(0, 10**9, size=(n_ops, 2))
    consts = rng.uniform(-1.5, 1.5, size=n_ops)

    def build(values):
        g = Graph()
        nodes = [g.parameter(float(v)) for v in values]
        for op, (i1, i2), c in zip(choices, picks, consts):
            x = nodes[i1 % len(nodes)]
            y = nodes[i2 % len(nodes)]
            if op == 0:
                nodes.append(x + y)
            elif op == 1:
                nodes.append(x * y)
            elif op == 2:
                nodes.append(-x)
            elif op == 3:
                nodes.append(g.logistic(x))
            elif op == 4:
                nodes.append(g.exp(g.logistic(x) * c))
            else:
                nodes.append(g.log(g.logistic(x) + 0.5))
        # combine everything so all parameters stay reachable
        root = nodes[0]
        for nd in nodes[1:]:
            root = root + g.logistic(nd) * 0.25
        return g, root

    params = rng.uniform(-2.0, 2.0, size=n_params)
    return build, params


class TestForward:
    def test_constant_addition(self):
        g = Graph()
        assert evaluate(g.constant(3.0) + g.constant(4.0)) == 7.0

    def test_log_exp_identity(self):
        g = Graph()
        x = g.parameter(2.5)
        assert evaluate(g.log(g.exp(x))) == pytest.approx(2.5, abs=1e-12)

    def test_logistic_at_zero(self):
        g = Graph()
        assert evaluate(g.logistic(g.constant(0.0))) == 0.5

    def test_operator_sugar(self):
        g = Graph()
        x = g.parameter(3.0)
        assert evaluate((2.0 * x - 1.0) / x) == pytest.approx(5.0 / 3.0)

    def test_log_domain_error_names_node(self):
        g = Graph()
        with pytest.raises(DomainError, match="node"):
            g.log(g.constant(-1.0))

    def test_division_by_zero(self):
        g = Graph()
        with pytest.raises(DomainError, match="division by zero"):
            g.div(g.constant(1.0), g.constant(0.0))

    def test_maxc_value(self):
        g = Graph()
        assert evaluate(g.maxc(g.constant(-2.0), 0.5)) == 0.5
        assert evaluate(g.maxc(g.constant(2.0), 0.5)) == 2.0


class TestBackward:
    def test_product_rule(self):
        g = Graph()
        x, y = g.parameter(3.0), g.parameter(4.0)
        grads = g.backward(x * y)
        assert grads[x.node_id] == 4.0 and grads[y.node_id] == 3.0

    def test_logistic_derivative_at_zero(self):
        g = Graph()
        x = g.parameter(0.0)
        grads = g.backward(g.logistic(x))
        assert grads[x.node_id] == pytest.approx(0.25, abs=1e-15)

    def test_unreachable_parameter_gets_zero(self):
        g = Graph()
        x, y = g.parameter(1.0), g.parameter(2.0)
        grads = g.backward(g.exp(x))
        assert grads[y.node_id] == 0.0 and len(grads) == 2

    def test_shared_subexpression(self):
        # d/dx of (x*x + x*x) = 4x
        g = Graph()
        x = g.parameter(1.5)
        sq = x * x
        grads = g.backward(sq + sq)
        assert grads[x.node_id] == pytest.approx(6.0)

    def test_maxc_subgradient(self):
        g = Graph()
        x = g.parameter(2.0)
        assert g.backward(g.maxc(x, 0.0))[x.node_id] == 1.0
        g2 = Graph()
        x2 = g2.parameter(-2.0)
        assert g2.backward(g2.maxc(x2, 0.0))[x2.node_id] == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_random_graph_matches_finite_diff(self, seed):
        build, params = random_graph(seed)
        g, root = build(params)
        order = g.parameters()[: len(params)]
        ad = np.array([g.backward(root)[i] for i in order])

        def f(vec):
            g2, root2 = build(vec)
            return evaluate(root2)

        fd = finite_diff(f, params, 1e-5)
        rel = np.abs(ad - fd) / np.maximum.reduce([np.abs(ad), np.abs(fd), np.full_like(fd, 1e-6)])
        assert rel.max() < 1e-6

    def test_linearity(self):
        # d(a*f + b*g)/dp == a*df/dp + b*dg/dp with shared graph
        g = Graph()
        x = g.parameter(0.7)
        f = g.exp(x * 0.5)
        h = g.logistic(x)
        a, b = 1.7, -0.9
        combined = a * f + b * h
        df = g.backward(f)[x.node_id]
        dh = g.backward(h)[x.node_id]
        dc = g.backward(combined)[x.node_id]
        assert dc == pytest.approx(a * df + b * dh, rel=1e-12)

    def test_backward_deterministic(self):
        build, params = random_graph(3)
        g, root = build(params)
        assert g.backward(root) == g.backward(root)


class TestFiniteDiff:
    def test_quadratic(self):
        fd = finite_diff(lambda v: v[0] ** 2, np.array([3.0]), 1e-5)
        assert fd[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant_function(self):
        fd = finite_diff(lambda v: 1.25, np.array([0.3, -0.7]), 1e-5)
        np.testing.assert_array_equal(fd, [0.0, 0.0])

    def test_exp_plus_log(self):
        fd = finite_diff(lambda v: math.exp(v[0]) + math.log(v[1]), np.array([0.0, 1.0]), 1e-6)
        np.testing.assert_allclose(fd, [1.0, 1.0], atol=1e-7)

    def test_h_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff(lambda v: 0.0, np.array([1.0]), 0.0)

    def test_non_finite_value_raises(self):
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff(lambda v: float("nan"), np.array([1.0]), 1e-5)


class TestRawInterface:
    def test_fused_builders_match_primitives(self):
        g1 = Graph()
        a1 = g1.iparam(0.8)
        b1 = g1.iconst(1.3)
        shift1 = g1.iconst(-0.4)
        out1 = g1.iexp(g1.iadd(g1.imul(a1, b1), shift1))
        base1 = g1.iconst(0.2)
        rec1 = g1.iadd(base1, g1.ilog(g1.iadd(out1, g1.ineg(g1.iconst(0.5)))))

        g2 = Graph()
        a2 = g2.iparam(0.8)
        b2 = g2.iconst(1.3)
        shift2 = g2.iconst(-0.4)
        out2 = g2.iexp_mul_add(a2, b2, shift2)
        base2 = g2.iconst(0.2)
        half = g2.iconst(0.5)
        rec2 = g2.ilog_diff_add(base2, out2, half, 1e-30)

        assert g1.value(rec1) == pytest.approx(g2.value(rec2), rel=1e-15)
        assert g1.backward(rec1)[a1] == pytest.approx(g2.backward(rec2)[a2], rel=1e-12)

    def test_iconst_helpers(self):
        g = Graph()
        x = g.iparam(2.0)
        assert g.value(g.iconst_add(x, 3.0)) == 5.0
        assert g.value(g.iconst_mul(x, 3.0)) == 6.0
