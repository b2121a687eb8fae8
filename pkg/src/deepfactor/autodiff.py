"""Reverse-mode automatic differentiation over scalars, vectors and dense
matrices, plus the Adam optimizer used to train every network in this package.

All arithmetic is float64. A :class:`Tape` records every primitive operation
as a node in topological order; :meth:`Tape.backward` sweeps the record once
in reverse, applies each node's vector-Jacobian product, and accumulates (+=)
the resulting adjoints into ``Parameter.grad``. Tapes are cheap, rebuilt per
minibatch, and confined to a single thread.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericsError, ShapeError

__all__ = [
    "Adam",
    "AdamState",
    "Parameter",
    "Tape",
    "Var",
    "adam_step",
    "clip",
    "concat",
    "dot",
    "exp",
    "log",
    "logdet_psd",
    "matmul",
    "outer",
    "sigmoid",
    "softplus",
    "solve_psd",
    "sqrt",
    "square",
    "stack",
    "tanh",
    "transpose",
]


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function on raw arrays."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_values(x: np.ndarray) -> np.ndarray:
    """Overflow-safe softplus max(x,0) + log(1+exp(-|x|)) on raw arrays."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Parameter:
    """A named trainable array paired with an accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = _as_value(value).copy()
        self.grad = np.zeros_like(self.value)

    @classmethod
    def uniform(cls, name: str, shape, fan_in: int, rng) -> "Parameter":
        """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        bound = 1.0 / np.sqrt(max(int(fan_in), 1))
        return cls(name, rng.uniform(-bound, bound, size=shape))

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Node:
    __slots__ = ("kind", "inputs", "value", "aux", "param")

    def __init__(self, kind, inputs, value, aux=None, param=None):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.aux = aux
        self.param = param


class Var:
    """Handle to one tape node. Arithmetic on Vars records new nodes."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> "Var":
        return transpose(self)

    def sum(self, axis=None) -> "Var":
        x = self.value
        if axis is not None and not (-x.ndim <= axis < x.ndim):
            raise ShapeError(f"sum axis {axis} out of range for shape {x.shape}")
        return self.tape.record("sum", (self,), np.sum(x, axis=axis), aux=axis)

    def __getitem__(self, key) -> "Var":
        # basic (int/slice/tuple) indexing only; adjoint scatters back
        return self.tape.record("getitem", (self,), self.value[key], aux=key)

    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", _lift(self.tape, other), self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", _lift(self.tape, other), self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", _lift(self.tape, other), self)

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", _lift(self.tape, other), self)

    def __neg__(self):
        return self.tape.record("neg", (self,), -self.value)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


def _lift(tape: "Tape", x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ShapeError("operands recorded on different tapes")
        return x
    return tape.const(x)


def _binary(kind: str, a: Var, b) -> Var:
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {av.shape} and {bv.shape} do not broadcast")
    if kind == "add":
        out = av + bv
    elif kind == "sub":
        out = av - bv
    elif kind == "mul":
        out = av * bv
    else:
        out = av / bv
    return a.tape.record(kind, (a, b), out)


class Tape:
    """Append-only record of differentiable operations (a dynamic DAG)."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._adjoints: list | None = None
        self._param_vars: dict[int, Var] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: tuple, value: np.ndarray, aux=None, param=None) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ShapeError("input recorded on a different tape")
        node = Node(kind, tuple(v.index for v in inputs), _as_value(value), aux, param)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, node.value)

    def const(self, value) -> Var:
        return self.record("const", (), value)

    def param(self, p: Parameter) -> Var:
        """A leaf bound to ``p``; backward() accumulates its adjoint into p.grad.
        Repeated lookups of the same parameter reuse one leaf node."""
        var = self._param_vars.get(id(p))
        if var is None:
            var = self.record("param", (), p.value, param=p)
            self._param_vars[id(p)] = var
        return var

    def adjoint(self, v: Var) -> np.ndarray:
        """Adjoint of ``v`` after the latest backward pass (zeros if unreachable)."""
        if self._adjoints is None:
            raise NumericsError("no backward pass has been run on this tape")
        g = self._adjoints[v.index]
        return np.zeros_like(v.value) if g is None else g

    def backward(self, root: Var, accumulate: bool = True) -> dict:
        """Reverse sweep from a scalar ``root``.

        Returns {Parameter: adjoint}; when ``accumulate`` each adjoint is also
        added (+=) onto the parameter's ``grad``.
        """
        if root.tape is not self:
            raise ShapeError("root recorded on a different tape")
        if root.value.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
        adj: list = [None] * len(self.nodes)
        adj[root.index] = np.ones_like(root.value)
        grads: dict[Parameter, np.ndarray] = {}
        nodes = self.nodes
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            kind = node.kind
            if kind == "const":
                continue
            if kind == "param":
                p = node.param
                grads[p] = g if p not in grads else grads[p] + g
                continue
            contribs = _VJPS[kind](node, g, nodes)
            for j, gj in zip(node.inputs, contribs):
                if gj is None:
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj
        self._adjoints = adj
        out = {}
        for p, g in grads.items():
            g = np.asarray(g)
            if g.shape != p.value.shape:
                g = g.reshape(p.value.shape)
            out[p] = g
            if accumulate:
                p.grad += g
        return out


# ---------------------------------------------------------------------------
# primitive ops


def tanh(a: Var) -> Var:
    return a.tape.record("tanh", (a,), np.tanh(a.value))


def sigmoid(a: Var) -> Var:
    return a.tape.record("sigmoid", (a,), sigmoid_values(a.value))


def softplus(a: Var) -> Var:
    return a.tape.record("softplus", (a,), softplus_values(a.value))


def exp(a: Var) -> Var:
    return a.tape.record("exp", (a,), np.exp(a.value))


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise NumericsError("log of a non-positive value")
    return a.tape.record("log", (a,), np.log(a.value))


def sqrt(a: Var) -> Var:
    if np.any(a.value < 0):
        raise NumericsError("sqrt of a negative value")
    return a.tape.record("sqrt", (a,), np.sqrt(a.value))


def square(a: Var) -> Var:
    return a.tape.record("square", (a,), a.value * a.value)


def clip(a: Var, lo: float, hi: float) -> Var:
    """Differentiable clamp; gradient is zero outside (lo, hi)."""
    return a.tape.record("clip", (a,), np.clip(a.value, lo, hi), aux=(lo, hi))


def dot(a: Var, b) -> Var:
    b = _lift(a.tape, b)
    if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.value.shape} and {b.value.shape}")
    return a.tape.record("dot", (a, b), np.dot(a.value, b.value))


def outer(a: Var, b) -> Var:
    b = _lift(a.tape, b)
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise ShapeError(f"outer expects vectors, got {a.value.shape} and {b.value.shape}")
    return a.tape.record("outer", (a, b), np.outer(a.value, b.value))


def matmul(a: Var, b) -> Var:
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
        raise ShapeError(f"matmul expects 1-D/2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != (bv.shape[0] if bv.ndim > 0 else 0):
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} vs {bv.shape}")
    return a.tape.record("matmul", (a, b), av @ bv)


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.value.shape}")
    return a.tape.record("transpose", (a,), a.value.T)


def concat(parts: list) -> Var:
    """Concatenate scalars/vectors into one vector."""
    if not parts:
        raise ShapeError("concat of an empty list")
    tape = parts[0].tape
    parts = [_lift(tape, p) for p in parts]
    for p in parts:
        if p.value.ndim > 1:
            raise ShapeError(f"concat expects scalars/vectors, got shape {p.value.shape}")
    flat = [np.atleast_1d(p.value) for p in parts]
    shapes = tuple(p.value.shape for p in parts)
    return tape.record("concat", tuple(parts), np.concatenate(flat), aux=shapes)


def stack(rows: list) -> Var:
    """Stack equal-length vectors as the rows of a matrix."""
    if not rows:
        raise ShapeError("stack of an empty list")
    tape = rows[0].tape
    rows = [_lift(tape, r) for r in rows]
    n = rows[0].value.shape
    for r in rows:
        if r.value.ndim != 1 or r.value.shape != n:
            raise ShapeError(f"stack expects equal-length vectors, got {n} and {r.value.shape}")
    return tape.record("stack", tuple(rows), np.stack([r.value for r in rows]))


def logdet_psd(a: Var) -> Var:
    """log|A| of a symmetric positive-definite matrix, via Cholesky.

    Only the symmetric part of A is used. Raises ``np.linalg.LinAlgError`` if
    the factorization fails; callers that build A with a jitter ladder catch
    it and escalate.
    """
    av = a.value
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeError(f"logdet expects a square matrix, got shape {av.shape}")
    factor = cho_factor(0.5 * (av + av.T), lower=True)
    val = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return a.tape.record("logdet", (a,), val, aux=factor)


def solve_psd(a: Var, b) -> Var:
    """x = A^{-1} b for symmetric positive-definite A (b vector or matrix).

    Only the symmetric part of A is used.
    """
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeError(f"solve expects a square matrix, got shape {av.shape}")
    if bv.ndim not in (1, 2) or bv.shape[0] != av.shape[0]:
        raise ShapeError(f"solve: rhs shape {bv.shape} does not match matrix {av.shape}")
    factor = cho_factor(0.5 * (av + av.T), lower=True)
    return a.tape.record("solve", (a, b), cho_solve(factor, bv), aux=factor)


# ---------------------------------------------------------------------------
# vector-Jacobian products (one entry per recorded op kind)


def _vjp_add(node, g, nodes):
    a, b = (nodes[j].value for j in node.inputs)
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_sub(node, g, nodes):
    a, b = (nodes[j].value for j in node.inputs)
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _vjp_mul(node, g, nodes):
    a, b = (nodes[j].value for j in node.inputs)
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_div(node, g, nodes):
    a, b = (nodes[j].value for j in node.inputs)
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _vjp_neg(node, g, nodes):
    return (-g,)


def _vjp_matmul(node, g, nodes):
    a, b = (nodes[j].value for j in node.inputs)
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g * b, g * a


def _vjp_outer(node, g, nodes):
    a, b = (nodes[j].value for j in node.inputs)
    return g @ b, a @ g


def _vjp_dot(node, g, nodes):
    a, b = (nodes[j].value for j in node.inputs)
    return g * b, g * a


def _vjp_transpose(node, g, nodes):
    return (g.T,)


def _vjp_tanh(node, g, nodes):
    y = node.value
    return (g * (1.0 - y * y),)


def _vjp_sigmoid(node, g, nodes):
    y = node.value
    return (g * y * (1.0 - y),)


def _vjp_softplus(node, g, nodes):
    x = nodes[node.inputs[0]].value
    return (g * sigmoid_values(x),)


def _vjp_exp(node, g, nodes):
    return (g * node.value,)


def _vjp_log(node, g, nodes):
    x = nodes[node.inputs[0]].value
    return (g / x,)


def _vjp_sqrt(node, g, nodes):
    return (g / (2.0 * node.value),)


def _vjp_square(node, g, nodes):
    x = nodes[node.inputs[0]].value
    return (g * 2.0 * x,)


def _vjp_clip(node, g, nodes):
    x = nodes[node.inputs[0]].value
    lo, hi = node.aux
    return (g * ((x > lo) & (x < hi)),)


def _vjp_sum(node, g, nodes):
    x = nodes[node.inputs[0]].value
    axis = node.aux
    if axis is None:
        return (np.broadcast_to(g, x.shape),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)


def _vjp_concat(node, g, nodes):
    shapes = node.aux
    out, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        out.append(g[offset:offset + size].reshape(shape))
        offset += size
    return out


def _vjp_stack(node, g, nodes):
    return [g[i] for i in range(len(node.inputs))]


def _vjp_getitem(node, g, nodes):
    x = nodes[node.inputs[0]].value
    gz = np.zeros_like(x)
    gz[node.aux] = g
    return (gz,)


def _vjp_logdet(node, g, nodes):
    factor = node.aux
    n = factor[0].shape[0]
    inv = cho_solve(factor, np.eye(n))
    ga = g * inv
    return (0.5 * (ga + ga.T),)


def _vjp_solve(node, g, nodes):
    factor = node.aux
    x = node.value
    w = cho_solve(factor, g)
    if x.ndim == 1:
        ga = -np.outer(w, x)
    else:
        ga = -w @ x.T
    return 0.5 * (ga + ga.T), w


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "matmul": _vjp_matmul,
    "outer": _vjp_outer,
    "dot": _vjp_dot,
    "transpose": _vjp_transpose,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "softplus": _vjp_softplus,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "sqrt": _vjp_sqrt,
    "square": _vjp_square,
    "clip": _vjp_clip,
    "sum": _vjp_sum,
    "concat": _vjp_concat,
    "stack": _vjp_stack,
    "getitem": _vjp_getitem,
    "logdet": _vjp_logdet,
    "solve": _vjp_solve,
}


# ---------------------------------------------------------------------------
# Adam optimizer


class AdamState:
    """Per-parameter first/second moment estimates and a step counter."""

    __slots__ = ("m", "v", "t")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0


def adam_step(params, states, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update from the current grads (grads untouched)."""
    for p, s in zip(params, states):
        s.t += 1
        g = p.grad
        s.m = beta1 * s.m + (1.0 - beta1) * g
        s.v = beta2 * s.v + (1.0 - beta2) * g * g
        m_hat = s.m / (1.0 - beta1 ** s.t)
        v_hat = s.v / (1.0 - beta2 ** s.t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Convenience wrapper pairing parameters with their Adam states."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.states = [AdamState(p.value.shape) for p in self.params]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.states, self.lr, self.beta1, self.beta2, self.eps)
