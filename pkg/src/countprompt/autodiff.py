"""Tape-based reverse-mode differentiation over small dense float64 tensors.

A :class:`Tape` records every operation with its operand indices, attributes
and cached forward value. :func:`backward` walks the tape in reverse and
returns a :class:`GradientMap`.

Leaf values may be :class:`Dual` arrays (value plus tangent). Every forward
rule and vector-Jacobian rule below is written with ufuncs, broadcasting and
matmul only, so running a tape on dual leaves yields gradients whose tangent
part is the Hessian-vector product. That is how second-order meta-gradients
are computed without retaining graphs across inner steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import kernels

MAX_DIM = 4096
SMOOTH_ABS_EPS = 1e-6


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Dual numbers


class Dual:
    """Array with a forward-mode tangent riding along.

    Supports the subset of numpy used by the op rules: arithmetic ufuncs,
    ``exp``/``tanh``/``sqrt``, comparison (on the value part), ``@``,
    ``.sum``, ``.reshape``, ``.T`` and basic indexing.
    """

    __array_priority__ = 1000

    def __init__(self, value, tangent=None):
        self.v = np.asarray(value, dtype=np.float64)
        if tangent is None:
            tangent = np.zeros_like(self.v)
        self.t = np.broadcast_to(np.asarray(tangent, dtype=np.float64), self.v.shape).copy()

    shape = property(lambda self: self.v.shape)
    ndim = property(lambda self: self.v.ndim)
    size = property(lambda self: self.v.size)

    def __repr__(self):
        return f"Dual(v={self.v!r}, t={self.t!r})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        rule = _DUAL_UFUNCS.get(ufunc)
        if rule is None:
            return NotImplemented
        vals = [x.v if isinstance(x, Dual) else np.asarray(x, dtype=np.float64) for x in inputs]
        tans = [x.t if isinstance(x, Dual) else None for x in inputs]
        return rule(vals, tans)

    # arithmetic routes through the ufunc table
    def __add__(self, o): return np.add(self, o)
    def __radd__(self, o): return np.add(o, self)
    def __sub__(self, o): return np.subtract(self, o)
    def __rsub__(self, o): return np.subtract(o, self)
    def __mul__(self, o): return np.multiply(self, o)
    def __rmul__(self, o): return np.multiply(o, self)
    def __truediv__(self, o): return np.true_divide(self, o)
    def __rtruediv__(self, o): return np.true_divide(o, self)
    def __neg__(self): return np.negative(self)

    def __matmul__(self, o):
        ov, ot = (o.v, o.t) if isinstance(o, Dual) else (np.asarray(o), None)
        t = self.t @ ov
        if ot is not None:
            t = t + self.v @ ot
        return Dual(self.v @ ov, t)

    def __rmatmul__(self, o):
        o = np.asarray(o)
        return Dual(o @ self.v, o @ self.t)

    # comparisons act on the value; used for masks
    def __gt__(self, o): return self.v > _val(o)
    def __lt__(self, o): return self.v < _val(o)
    def __ge__(self, o): return self.v >= _val(o)
    def __le__(self, o): return self.v <= _val(o)

    def __getitem__(self, idx):
        return Dual(self.v[idx], self.t[idx])

    def sum(self, axis=None):
        return Dual(self.v.sum(axis=axis), self.t.sum(axis=axis))

    def reshape(self, *shape):
        return Dual(self.v.reshape(*shape), self.t.reshape(*shape))

    @property
    def T(self):
        return Dual(self.v.T, self.t.T)


def _tan_sum(*parts):
    out = None
    for p in parts:
        if p is None:
            continue
        out = p if out is None else out + p
    return out


def _binary(f, df_da, df_db):
    def rule(vals, tans):
        a, b = vals
        ta, tb = tans
        out = f(a, b)
        t = _tan_sum(None if ta is None else df_da(a, b, out) * ta,
                     None if tb is None else df_db(a, b, out) * tb)
        return Dual(out, np.zeros_like(out) if t is None else np.broadcast_to(t, out.shape))
    return rule


def _unary(f, df):
    def rule(vals, tans):
        (a,), (ta,) = vals, tans
        out = f(a)
        return Dual(out, df(a, out) * ta)
    return rule


_DUAL_UFUNCS: dict[Any, Callable] = {
    np.add: _binary(np.add, lambda a, b, o: 1.0, lambda a, b, o: 1.0),
    np.subtract: _binary(np.subtract, lambda a, b, o: 1.0, lambda a, b, o: -1.0),
    np.multiply: _binary(np.multiply, lambda a, b, o: b, lambda a, b, o: a),
    np.true_divide: _binary(np.true_divide, lambda a, b, o: 1.0 / b, lambda a, b, o: -o / b),
    np.negative: _unary(np.negative, lambda a, o: -1.0),
    np.exp: _unary(np.exp, lambda a, o: o),
    np.tanh: _unary(np.tanh, lambda a, o: 1.0 - o * o),
    np.sqrt: _unary(np.sqrt, lambda a, o: 0.5 / o),
    np.square: _unary(np.square, lambda a, o: 2.0 * a),
    np.matmul: lambda vals, tans: Dual(
        vals[0] @ vals[1],
        _tan_sum(None if tans[0] is None else tans[0] @ vals[1],
                 None if tans[1] is None else vals[0] @ tans[1])),
}


def _val(x):
    return x.v if isinstance(x, Dual) else x


def value_of(x) -> np.ndarray:
    """Plain float64 value of an array or :class:`Dual`."""
    return np.asarray(_val(x), dtype=np.float64)


def tangent_of(x) -> np.ndarray:
    return x.t if isinstance(x, Dual) else np.zeros_like(np.asarray(x, dtype=np.float64))


def _linear(fn, x):
    """Apply a linear map to the value and tangent parts separately."""
    if isinstance(x, Dual):
        return Dual(fn(x.v), fn(x.t))
    return fn(x)


# --------------------------------------------------------------------------
# Op rules: forward(vals, attrs) and vjp(g, out, vals, attrs) -> parent grads


def _shape_of(x) -> tuple:
    return tuple(np.shape(_val(x)))


def _check_same(kind, a, b):
    if a != b:
        raise ShapeError(f"{kind}: operand shapes {a} and {b} differ")


def _matmul_shape(kind, a, b):
    if len(a) == 2 and len(b) == 2 and a[1] == b[0]:
        return (a[0], b[1])
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return (a[0],)
    if len(a) == 1 and len(b) == 2 and a[0] == b[0]:
        return (b[1],)
    raise ShapeError(f"{kind}: cannot multiply shapes {a} and {b}")


def _outer(a, b):
    return a[:, None] * b[None, :]


def _matmul_vjp(g, out, vals, attrs):
    a, b = vals
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2:
        return _outer(g, b), a.T @ g
    return b @ g, _outer(a, g)


def _ones_like(x):
    return np.ones(_shape_of(x))


def _cosine_parts(a, b):
    na = np.sqrt((a * a).sum())
    nb = np.sqrt((b * b).sum())
    return na, nb


def _cosine_fwd(vals, attrs):
    a, b = vals
    na, nb = _cosine_parts(a, b)
    if float(_val(na)) == 0.0 or float(_val(nb)) == 0.0:
        return np.zeros(())
    return (a * b).sum() / (na * nb)


def _cosine_vjp(g, out, vals, attrs):
    a, b = vals
    na, nb = _cosine_parts(a, b)
    if float(_val(na)) == 0.0 or float(_val(nb)) == 0.0:
        return np.zeros(_shape_of(a)), np.zeros(_shape_of(b))
    ga = (b / (na * nb) - out * a / (na * na)) * g
    gb = (a / (na * nb) - out * b / (nb * nb)) * g
    return ga, gb


def _render_fwd(vals, attrs):
    p, c = vals
    return kernels.render_blobs(p, c, attrs["sigma"], attrs["height"], attrs["width"])


def _render_vjp(g, out, vals, attrs):
    p, c = vals
    return kernels.render_blobs_vjp(g, p, c, attrs["sigma"])


def _render_shape(kind, shapes, attrs):
    p, c = shapes
    if len(p) != 1 or c != (p[0], 2):
        raise ShapeError(f"{kind}: presence {p} and centers {c} must be (K,) and (K, 2)")
    return (int(attrs["height"]), int(attrs["width"]))


def _conv_shape(kind, shapes, attrs):
    (s,) = shapes
    k = np.shape(attrs["kernel"])
    if len(s) != 2 or len(k) != 2 or k[0] % 2 == 0 or k[1] % 2 == 0:
        raise ShapeError(f"{kind}: image {s} must be 2-D and kernel {k} odd-sized 2-D")
    return s


@dataclass(frozen=True)
class OpRule:
    arity: int
    forward: Callable
    vjp: Callable
    shape: Callable


def _elementwise(fwd, vjp, arity=1):
    def shape(kind, shapes, attrs):
        if arity == 2:
            _check_same(kind, shapes[0], shapes[1])
        return shapes[0]
    return OpRule(arity, fwd, vjp, shape)


def _reduce(fwd, vjp):
    return OpRule(1, fwd, vjp, lambda kind, shapes, attrs: ())


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _reshape_shape(kind, shapes, attrs):
    (s,) = shapes
    new = tuple(attrs["shape"])
    if int(np.prod(s)) != int(np.prod(new)):
        raise ShapeError(f"{kind}: cannot reshape {s} to {new}")
    return new


def _dot_shape(kind, shapes, attrs):
    a, b = shapes
    if len(a) != 1 or a != b:
        raise ShapeError(f"{kind}: expected equal-length vectors, got {a} and {b}")
    return ()


def _cos_shape(kind, shapes, attrs):
    a, b = shapes
    _check_same(kind, a, b)
    return ()


OPS: dict[str, OpRule] = {
    "add": _elementwise(lambda v, at: v[0] + v[1], lambda g, o, v, at: (g, g), 2),
    "sub": _elementwise(lambda v, at: v[0] - v[1], lambda g, o, v, at: (g, -g), 2),
    "mul": _elementwise(lambda v, at: v[0] * v[1], lambda g, o, v, at: (g * v[1], g * v[0]), 2),
    "div": _elementwise(lambda v, at: v[0] / v[1],
                        lambda g, o, v, at: (g / v[1], -g * o / v[1]), 2),
    "matmul": OpRule(2, lambda v, at: v[0] @ v[1], _matmul_vjp,
                     lambda kind, s, at: _matmul_shape(kind, s[0], s[1])),
    "scale": _elementwise(lambda v, at: at["c"] * v[0], lambda g, o, v, at: (at["c"] * g,)),
    "shift": _elementwise(lambda v, at: v[0] + at["c"], lambda g, o, v, at: (g,)),
    "sum": _reduce(lambda v, at: v[0].sum(), lambda g, o, v, at: (g * _ones_like(v[0]),)),
    "mean": _reduce(lambda v, at: v[0].sum() / float(np.prod(_shape_of(v[0]))),
                    lambda g, o, v, at: (g * _ones_like(v[0]) / float(np.prod(_shape_of(v[0]))),)),
    "sigmoid": _elementwise(lambda v, at: _sigmoid(v[0]), lambda g, o, v, at: (g * o * (1.0 - o),)),
    "tanh": _elementwise(lambda v, at: np.tanh(v[0]), lambda g, o, v, at: (g * (1.0 - o * o),)),
    "exp": _elementwise(lambda v, at: np.exp(v[0]), lambda g, o, v, at: (g * o,)),
    "smooth_abs": _elementwise(
        lambda v, at: np.sqrt(v[0] * v[0] + at.get("eps", SMOOTH_ABS_EPS) ** 2),
        lambda g, o, v, at: (g * v[0] / o,)),
    "relu": _elementwise(lambda v, at: v[0] * (v[0] > 0.0),
                         lambda g, o, v, at: (g * (v[0] > 0.0),)),
    "max_with": _elementwise(
        lambda v, at: v[0] * (v[0] > at["c"]) + at["c"] * (1.0 - (v[0] > at["c"])),
        lambda g, o, v, at: (g * (v[0] > at["c"]),)),
    "dot": OpRule(2, lambda v, at: (v[0] * v[1]).sum(),
                  lambda g, o, v, at: (g * v[1], g * v[0]), _dot_shape),
    "cosine": OpRule(2, _cosine_fwd, _cosine_vjp, _cos_shape),
    "render": OpRule(2, _render_fwd, _render_vjp, _render_shape),
    "conv2d": OpRule(1, lambda v, at: _linear(lambda x: kernels.correlate_same(x, at["kernel"]), v[0]),
                     lambda g, o, v, at: (_linear(lambda x: kernels.convolve_same(x, at["kernel"]), g),),
                     _conv_shape),
    "clamp01": _elementwise(
        lambda v, at: v[0] * ((v[0] > 0.0) & (v[0] < 1.0)) + 1.0 * (v[0] >= 1.0),
        lambda g, o, v, at: (g * ((v[0] > 0.0) & (v[0] < 1.0)),)),
    "reshape": OpRule(1, lambda v, at: v[0].reshape(tuple(at["shape"])),
                      lambda g, o, v, at: (g.reshape(_shape_of(v[0])),), _reshape_shape),
}
OPS["max0"] = OPS["relu"]


# --------------------------------------------------------------------------
# Tape, Var, GradientMap


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    attrs: dict
    value: Any
    shape: tuple


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def _append(self, node: Node) -> "Var":
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, node.shape)

    def leaf(self, value, kind: str = "leaf") -> "Var":
        shape = _shape_of(value)
        if len(shape) > 2 or any(d > MAX_DIM for d in shape):
            raise ShapeError(f"{kind}: shape {shape} exceeds rank 2 / {MAX_DIM} per dim")
        if not isinstance(value, Dual):
            value = np.array(value, dtype=np.float64)
        return self._append(Node(kind, (), {}, value, shape))

    def const(self, value) -> "Var":
        return self.leaf(np.asarray(value, dtype=np.float64), kind="const")

    def record(self, kind: str, operands: Sequence["Var"], **attrs) -> "Var":
        rule = OPS.get(kind)
        if rule is None:
            raise ValueError(f"unsupported op kind {kind!r}")
        if len(operands) != rule.arity:
            raise ShapeError(f"{kind}: expected {rule.arity} operands, got {len(operands)}")
        for op in operands:
            if op.tape is not self:
                raise ValueError(f"{kind}: operand belongs to a different tape")
        shape = rule.shape(kind, [op.shape for op in operands], attrs)
        vals = [self.nodes[op.index].value for op in operands]
        value = rule.forward(vals, attrs)
        if not isinstance(value, Dual):
            value = np.asarray(value, dtype=np.float64)
        return self._append(Node(kind, tuple(op.index for op in operands), attrs, value, shape))

    def value(self, var: "Var"):
        return self.nodes[var.index].value

    def replay(self) -> list:
        """Recompute every forward value from the stored leaves."""
        values: list = []
        for node in self.nodes:
            if not node.parents and node.kind in ("leaf", "const"):
                values.append(node.value)
                continue
            rule = OPS[node.kind]
            out = rule.forward([values[i] for i in node.parents], node.attrs)
            values.append(out if isinstance(out, Dual) else np.asarray(out, dtype=np.float64))
        return values


@dataclass(frozen=True)
class Var:
    tape: Tape
    index: int
    shape: tuple

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.const(np.broadcast_to(other, self.shape))

    def __add__(self, other):
        if np.isscalar(other):
            return self.tape.record("shift", [self], c=float(other))
        return self.tape.record("add", [self, self._lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self.tape.record("shift", [self], c=-float(other))
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", [self], c=float(other))
        return self.tape.record("mul", [self, self._lift(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", [self], c=1.0 / float(other))
        return self.tape.record("div", [self, self._lift(other)])

    def __neg__(self):
        return self.tape.record("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return self.tape.record("matmul", [self.tape.const(other), self])


def record(kind: str, operands: Sequence[Var], **attrs) -> Var:
    if not operands:
        raise ValueError("record needs at least one operand")
    return operands[0].tape.record(kind, operands, **attrs)


def _unary_op(kind):
    def op(x: Var, **attrs) -> Var:
        return x.tape.record(kind, [x], **attrs)
    op.__name__ = kind
    return op


sigmoid = _unary_op("sigmoid")
tanh = _unary_op("tanh")
exp = _unary_op("exp")
relu = _unary_op("relu")
max0 = _unary_op("max0")
clamp01 = _unary_op("clamp01")
sum = _unary_op("sum")  # noqa: A001 - mirrors numpy naming
mean = _unary_op("mean")


def smooth_abs(x: Var, eps: float = SMOOTH_ABS_EPS) -> Var:
    return x.tape.record("smooth_abs", [x], eps=eps)


def max_with(x: Var, floor: float) -> Var:
    return x.tape.record("max_with", [x], c=float(floor))


def dot(a: Var, b: Var) -> Var:
    return a.tape.record("dot", [a, b])


def cosine(a: Var, b: Var) -> Var:
    return a.tape.record("cosine", [a, b])


def reshape(x: Var, shape) -> Var:
    return x.tape.record("reshape", [x], shape=tuple(shape))


def conv2d(x: Var, kernel: np.ndarray) -> Var:
    return x.tape.record("conv2d", [x], kernel=np.asarray(kernel, dtype=np.float64))


def render(presence: Var, centers: Var, sigma: float, height: int, width: int) -> Var:
    return presence.tape.record("render", [presence, centers], sigma=float(sigma),
                                height=int(height), width=int(width))


class GradientMap:
    """Read-only map from node index to gradient; unreached nodes are zero."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key):
        idx = key.index if isinstance(key, Var) else int(key)
        g = self._grads[idx]
        if g is None:
            return np.zeros(self._tape.nodes[idx].shape)
        return g

    def __len__(self):
        return len(self._grads)

    def reached(self, key) -> bool:
        idx = key.index if isinstance(key, Var) else int(key)
        return self._grads[idx] is not None


def backward(root: Var) -> GradientMap:
    if root.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    tape = root.tape
    grads: list = [None] * len(tape.nodes)
    grads[root.index] = np.ones(())
    for idx in range(root.index, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or not node.parents:
            continue
        rule = OPS[node.kind]
        vals = [tape.nodes[p].value for p in node.parents]
        parent_grads = rule.vjp(g, node.value, vals, node.attrs)
        for p, pg in zip(node.parents, parent_grads):
            if not isinstance(pg, Dual):
                pg = np.asarray(pg, dtype=np.float64)
            grads[p] = pg if grads[p] is None else grads[p] + pg
    return GradientMap(tape, grads)


def finite_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)
