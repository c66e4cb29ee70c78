"""Reverse-mode automatic differentiation over a dynamically built scalar graph.

Nodes live in an append-only arena (the tape); values are computed eagerly at
construction, so a node's cached value is always consistent with its operands.
Graphs are rebuilt per evaluation during fitting, which keeps the engine free
of any refresh machinery. Single-owner per graph; distinct graphs are
independent.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "DomainError",
    "Graph",
    "OP_NAMES",
    "Scalar",
    "evaluate",
    "finite_diff",
]

# Operation tags. Binary ops read two operand ids, unary ops one;
# max-with-constant keeps its bound in the aux slot.
OP_CONST = 0
OP_PARAM = 1
OP_ADD = 2
OP_MUL = 3
OP_DIV = 4
OP_NEG = 5
OP_EXP = 6
OP_LOG = 7
OP_LOGISTIC = 8
OP_MAXC = 9

OP_NAMES = {
    OP_CONST: "constant",
    OP_PARAM: "parameter",
    OP_ADD: "add",
    OP_MUL: "multiply",
    OP_DIV: "divide",
    OP_NEG: "negate",
    OP_EXP: "exp",
    OP_LOG: "log",
    OP_LOGISTIC: "logistic",
    OP_MAXC: "max-with-constant",
}

_LOG_FLOOR = 1e-300  # log() domain guard; callers clamp probabilities upstream


class DomainError(ArithmeticError):
    """Raised for log of a non-positive value or division by zero; names the node."""

    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class Scalar:
    """Handle to one node of a :class:`Graph`; supports arithmetic operators."""

    __slots__ = ("graph", "node_id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.node_id = node_id

    @property
    def value(self) -> float:
        return self.graph._vals[self.node_id]

    def __add__(self, other):
        return self.graph.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.graph.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return self.graph.add(self, self.graph.neg(self.graph._wrap(other)))

    def __rsub__(self, other):
        return self.graph.add(self.graph._wrap(other), self.graph.neg(self))

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(self.graph._wrap(other), self)

    def __neg__(self):
        return self.graph.neg(self)

    def __repr__(self) -> str:
        op = OP_NAMES[self.graph._ops[self.node_id]]
        return f"Scalar(#{self.node_id} {op} = {self.value:.6g})"


class Graph:
    """Append-only expression arena with eager forward values."""

    __slots__ = ("_ops", "_a", "_b", "_vals", "_params", "_maxc_bounds")

    def __init__(self):
        self._ops: list[int] = []
        self._a: list[int] = []
        self._b: list[int] = []
        self._vals: list[float] = []
        self._params: list[int] = []
        self._maxc_bounds: dict[int, float] = {}

    def __len__(self) -> int:
        return len(self._ops)

    def _wrap(self, x) -> Scalar:
        if isinstance(x, Scalar):
            if x.graph is not self:
                raise ValueError("operands belong to different graphs")
            return x
        return self.constant(float(x))

    # -- leaves ------------------------------------------------------------

    def constant(self, value: float) -> Scalar:
        return Scalar(self, self.iconst(float(value)))

    def parameter(self, value: float) -> Scalar:
        return Scalar(self, self.iparam(float(value)))

    def parameters(self) -> list[int]:
        return list(self._params)

    # -- operations ---------------------------------------------------------

    def add(self, x, y) -> Scalar:
        x, y = self._wrap(x), self._wrap(y)
        return Scalar(self, self.iadd(x.node_id, y.node_id))

    def mul(self, x, y) -> Scalar:
        x, y = self._wrap(x), self._wrap(y)
        return Scalar(self, self.imul(x.node_id, y.node_id))

    def div(self, x, y) -> Scalar:
        x, y = self._wrap(x), self._wrap(y)
        return Scalar(self, self.idiv(x.node_id, y.node_id))

    def neg(self, x) -> Scalar:
        return Scalar(self, self.ineg(self._wrap(x).node_id))

    def exp(self, x) -> Scalar:
        return Scalar(self, self.iexp(self._wrap(x).node_id))

    def log(self, x) -> Scalar:
        return Scalar(self, self.ilog(self._wrap(x).node_id))

    def logistic(self, x) -> Scalar:
        return Scalar(self, self.ilogistic(self._wrap(x).node_id))

    def maxc(self, x, bound: float) -> Scalar:
        """max(x, bound) with a constant bound; gradient passes through iff x > bound."""
        return Scalar(self, self.imaxc(self._wrap(x).node_id, float(bound)))

    # -- raw index interface -------------------------------------------------
    # Hot construction paths (objective builders) work on bare node ids to
    # avoid per-node handle objects; semantics match the Scalar methods.

    def iconst(self, value: float) -> int:
        idx = len(self._ops)
        self._ops.append(OP_CONST)
        self._a.append(-1)
        self._b.append(-1)
        self._vals.append(value)
        return idx

    def iparam(self, value: float) -> int:
        idx = len(self._ops)
        self._ops.append(OP_PARAM)
        self._a.append(-1)
        self._b.append(-1)
        self._vals.append(value)
        self._params.append(idx)
        return idx

    def iadd(self, a: int, b: int) -> int:
        idx = len(self._ops)
        self._ops.append(OP_ADD)
        self._a.append(a)
        self._b.append(b)
        self._vals.append(self._vals[a] + self._vals[b])
        return idx

    def imul(self, a: int, b: int) -> int:
        idx = len(self._ops)
        self._ops.append(OP_MUL)
        self._a.append(a)
        self._b.append(b)
        self._vals.append(self._vals[a] * self._vals[b])
        return idx

    def idiv(self, a: int, b: int) -> int:
        if self._vals[b] == 0.0:
            raise DomainError(len(self._ops), "division by zero")
        idx = len(self._ops)
        self._ops.append(OP_DIV)
        self._a.append(a)
        self._b.append(b)
        self._vals.append(self._vals[a] / self._vals[b])
        return idx

    def ineg(self, a: int) -> int:
        idx = len(self._ops)
        self._ops.append(OP_NEG)
        self._a.append(a)
        self._b.append(-1)
        self._vals.append(-self._vals[a])
        return idx

    def iexp(self, a: int) -> int:
        try:
            val = math.exp(self._vals[a])
        except OverflowError:
            val = math.inf
        idx = len(self._ops)
        self._ops.append(OP_EXP)
        self._a.append(a)
        self._b.append(-1)
        self._vals.append(val)
        return idx

    def ilog(self, a: int) -> int:
        v = self._vals[a]
        if not v >= _LOG_FLOOR:
            raise DomainError(len(self._ops), f"log of non-positive value {v!r}")
        idx = len(self._ops)
        self._ops.append(OP_LOG)
        self._a.append(a)
        self._b.append(-1)
        self._vals.append(math.log(v))
        return idx

    def ilogistic(self, a: int) -> int:
        v = self._vals[a]
        if v >= 0.0:
            val = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            val = e / (1.0 + e)
        idx = len(self._ops)
        self._ops.append(OP_LOGISTIC)
        self._a.append(a)
        self._b.append(-1)
        self._vals.append(val)
        return idx

    def imaxc(self, a: int, bound: float) -> int:
        v = self._vals[a]
        idx = len(self._ops)
        self._ops.append(OP_MAXC)
        self._a.append(a)
        self._b.append(-1)
        self._vals.append(v if v > bound else bound)
        self._maxc_bounds[idx] = bound
        return idx

    def isum(self, ids: list[int]) -> int:
        """Left fold of iadd over at least one node id."""
        ops, aa, bb, vals = self._ops, self._a, self._b, self._vals
        push_op, push_a = ops.append, aa.append
        push_b, push_val = bb.append, vals.append
        total = ids[0]
        acc = vals[total]
        for nid in ids[1:]:
            idx = len(ops)
            push_op(OP_ADD)
            push_a(total)
            push_b(nid)
            acc += vals[nid]
            push_val(acc)
            total = idx
        return total

    # Fused builders: single Python call appending several nodes. The arena
    # contents are identical to composing the primitive methods.

    def iconst_add(self, a: int, value: float) -> int:
        """a + constant(value); appends the constant and the add."""
        ops, aa, bb, vals = self._ops, self._a, self._b, self._vals
        c = len(ops)
        ops.append(OP_CONST)
        aa.append(-1)
        bb.append(-1)
        vals.append(value)
        ops.append(OP_ADD)
        aa.append(a)
        bb.append(c)
        vals.append(vals[a] + value)
        return c + 1

    def iconst_mul(self, a: int, value: float) -> int:
        """a * constant(value); appends the constant and the multiply."""
        ops, aa, bb, vals = self._ops, self._a, self._b, self._vals
        c = len(ops)
        ops.append(OP_CONST)
        aa.append(-1)
        bb.append(-1)
        vals.append(value)
        ops.append(OP_MUL)
        aa.append(a)
        bb.append(c)
        vals.append(vals[a] * value)
        return c + 1

    def iexp_mul_add(self, a: int, b: int, shift: int) -> int:
        """exp(a * b + shift) as three primitive nodes in one call."""
        ops, aa, bb, vals = self._ops, self._a, self._b, self._vals
        m = len(ops)
        ops.append(OP_MUL)
        aa.append(a)
        bb.append(b)
        mv = vals[a] * vals[b]
        vals.append(mv)
        ops.append(OP_ADD)
        aa.append(m)
        bb.append(shift)
        sv = mv + vals[shift]
        vals.append(sv)
        ops.append(OP_EXP)
        aa.append(m + 1)
        bb.append(-1)
        try:
            vals.append(math.exp(sv))
        except OverflowError:
            vals.append(math.inf)
        return m + 2

    def ilog_diff_add(self, base: int, total: int, sub: int, floor: float) -> int:
        """base + log(max(total - sub, floor)) in one call.

        The clamp node is only materialized when the difference actually
        approaches the floor (it is the identity in value and gradient
        otherwise).
        """
        ops, aa, bb, vals = self._ops, self._a, self._b, self._vals
        i = len(ops)
        ops.append(OP_NEG)
        aa.append(sub)
        bb.append(-1)
        vals.append(-vals[sub])
        ops.append(OP_ADD)
        aa.append(total)
        bb.append(i)
        diff = vals[total] - vals[sub]
        vals.append(diff)
        rem = i + 1
        if diff <= floor * 1e8:
            ops.append(OP_MAXC)
            aa.append(rem)
            bb.append(-1)
            vals.append(diff if diff > floor else floor)
            self._maxc_bounds[i + 2] = floor
            rem = i + 2
            diff = vals[rem]
        j = len(ops)
        ops.append(OP_LOG)
        aa.append(rem)
        bb.append(-1)
        if not diff >= _LOG_FLOOR:
            raise DomainError(j, f"log of non-positive value {diff!r}")
        vals.append(math.log(diff))
        ops.append(OP_ADD)
        aa.append(base)
        bb.append(j)
        vals.append(vals[base] + vals[j])
        return j + 1

    def scalar(self, node_id: int) -> Scalar:
        return Scalar(self, node_id)

    # -- evaluation ----------------------------------------------------------

    def value(self, node: Scalar | int) -> float:
        idx = node.node_id if isinstance(node, Scalar) else node
        return self._vals[idx]

    def backward(self, root: Scalar | int) -> dict[int, float]:
        """Partials of ``root`` with respect to every parameter node.

        Parameters the root does not depend on get gradient 0.
        """
        if isinstance(root, Scalar):
            if root.graph is not self:
                raise ValueError("root belongs to a different graph")
            root_id = root.node_id
        else:
            root_id = int(root)
        n = root_id + 1
        ops, aa, bb, vals = self._ops, self._a, self._b, self._vals
        adj = [0.0] * n
        adj[root_id] = 1.0
        bounds = self._maxc_bounds
        for i in range(root_id, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            op = ops[i]
            if op <= OP_PARAM:
                continue
            a = aa[i]
            if op == OP_ADD:
                adj[a] += g
                adj[bb[i]] += g
            elif op == OP_MUL:
                b = bb[i]
                adj[a] += g * vals[b]
                adj[b] += g * vals[a]
            elif op == OP_DIV:
                b = bb[i]
                adj[a] += g / vals[b]
                adj[b] -= g * vals[i] / vals[b]
            elif op == OP_NEG:
                adj[a] -= g
            elif op == OP_EXP:
                adj[a] += g * vals[i]
            elif op == OP_LOG:
                adj[a] += g / vals[a]
            elif op == OP_LOGISTIC:
                v = vals[i]
                adj[a] += g * v * (1.0 - v)
            else:  # OP_MAXC: subgradient 0 at the bound
                if vals[a] > bounds[i]:
                    adj[a] += g
        grads = {}
        for p in self._params:
            grads[p] = adj[p] if p < n else 0.0
        return grads


def evaluate(root: Scalar) -> float:
    """Forward value of a node (cached at construction)."""
    return root.value


def finite_diff(fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` at ``params``: (f(p+h e_i) - f(p-h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("h must be positive")
    params = np.asarray(params, dtype=np.float64)
    out = np.empty_like(params)
    for i in range(params.size):
        shifted = params.copy()
        shifted[i] = params[i] + h
        hi = fn(shifted)
        shifted[i] = params[i] - h
        lo = fn(shifted)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        out[i] = (hi - lo) / (2.0 * h)
    return out
