"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every elementary operation applied to :class:`Var`
objects in execution order, so the node list is already topologically sorted
and a single reverse sweep yields the gradient of a scalar output with respect
to every leaf.

The module-level functions (``exp``, ``sqrt``, ``amax`` ...) accept either
plain arrays or ``Var`` objects. Plain arrays go straight to numpy, which lets
the field pipeline be written once and used both for cheap evaluation and for
fitting.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "Gradients",
    "UnregisteredOpError",
    "backward",
    "finite_diff_check",
    "TieError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "sqrt",
    "tanh",
    "absolute",
    "square",
    "maximum",
    "amax",
    "clamp",
    "dense",
    "vsum",
    "mean",
    "concat",
    "softplus",
    "sigmoid",
    "quat_to_matrix",
]


class UnregisteredOpError(RuntimeError):
    """Raised when a tape node is built for an op that has no adjoint."""


_ADJOINTS: dict[str, Callable] = {}
_MARGINS: dict[str, Callable] = {}
_BRANCHES: dict[str, Callable] = {}


def adjoint(name: str, margin: Callable | None = None, branch: Callable | None = None):
    """Register the adjoint for op ``name``.

    ``margin`` optionally maps a node to its distance from the nearest
    non-differentiable point (max ties, clamp bounds), used by gradient checks
    to reject evaluation points that sit on a kink. ``branch`` maps a node to
    the discrete choices it made (which argument won, which side of a bound).
    """

    def deco(fn):
        _ADJOINTS[name] = fn
        if margin is not None:
            _MARGINS[name] = margin
        if branch is not None:
            _BRANCHES[name] = branch
        return fn

    return deco


class _Node:
    __slots__ = ("op", "parents", "ctx", "value")

    def __init__(self, op, parents, ctx, value):
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.value = value


class Tape:
    """Append-only record of operations; single owner while it is built."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.leaves: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), None, value))
        idx = len(self.nodes) - 1
        self.leaves.append(idx)
        return Var(self, idx)

    def record(self, op: str, value, parents: Sequence["Var"], ctx=None) -> "Var":
        if op not in _ADJOINTS:
            raise UnregisteredOpError(f"no adjoint registered for op {op!r}")
        for p in parents:
            if p.tape is not self:
                raise ValueError("cannot mix Vars from different tapes")
        self.nodes.append(_Node(op, tuple(p.idx for p in parents), ctx, value))
        return Var(self, len(self.nodes) - 1)

    def min_margin(self) -> float:
        """Smallest kink margin over all recorded max/clamp/abs nodes."""
        worst = np.inf
        for node in self.nodes:
            fn = _MARGINS.get(node.op)
            if fn is None:
                continue
            m = fn(node, self)
            if m.size:
                worst = min(worst, float(np.min(m)))
        return worst

    def branch_signature(self) -> bytes:
        """Every discrete branch taken at a kink node, packed into bytes.
        Two evaluations with equal signatures lie on the same smooth piece."""
        parts = []
        for node in self.nodes:
            fn = _BRANCHES.get(node.op)
            if fn is not None:
                parts.append(np.asarray(fn(node, self), dtype=np.int8).ravel())
        return np.concatenate(parts).tobytes() if parts else b""


class Var:
    """Handle to a node on a tape. Supports the arithmetic operators."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None

    def __init__(self, tape: Tape, idx: int) -> None:
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, idx={self.idx})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.record("const", np.asarray(x, dtype=np.float64), ())


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@adjoint("const")
def _const_adj(g, node, tape):
    return ()


# -- binary arithmetic -------------------------------------------------------


def _binary(op, fn, a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return fn(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.record(op, fn(a.value, b.value), (a, b))


def add(a, b):
    return _binary("add", np.add, a, b)


def sub(a, b):
    return _binary("sub", np.subtract, a, b)


def mul(a, b):
    return _binary("mul", np.multiply, a, b)


def div(a, b):
    return _binary("div", np.divide, a, b)


def _shapes(node, tape):
    return [tape.nodes[p].value.shape for p in node.parents]


@adjoint("add")
def _add_adj(g, node, tape):
    sa, sb = _shapes(node, tape)
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


@adjoint("sub")
def _sub_adj(g, node, tape):
    sa, sb = _shapes(node, tape)
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@adjoint("mul")
def _mul_adj(g, node, tape):
    a, b = (tape.nodes[p].value for p in node.parents)
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@adjoint("div")
def _div_adj(g, node, tape):
    a, b = (tape.nodes[p].value for p in node.parents)
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def maximum(a, b):
    """Elementwise max; on ties the first argument takes the gradient."""
    return _binary("maximum", np.maximum, a, b)


def _maximum_margin(node, tape):
    a, b = (tape.nodes[p].value for p in node.parents)
    return np.abs(a - b).ravel()


def _maximum_branch(node, tape):
    a, b = (tape.nodes[p].value for p in node.parents)
    return np.broadcast_to(a >= b, node.value.shape)


@adjoint("maximum", margin=_maximum_margin, branch=_maximum_branch)
def _maximum_adj(g, node, tape):
    a, b = (tape.nodes[p].value for p in node.parents)
    first = a >= b
    return _unbroadcast(np.where(first, g, 0.0), a.shape), _unbroadcast(np.where(first, 0.0, g), b.shape)


# -- unary -------------------------------------------------------------------


def _unary(op, fn, x, ctx=None):
    if not isinstance(x, Var):
        return fn(x)
    return x.tape.record(op, fn(x.value), (x,), ctx)


def neg(x):
    return _unary("neg", np.negative, x)


@adjoint("neg")
def _neg_adj(g, node, tape):
    return (-g,)


def exp(x):
    return _unary("exp", np.exp, x)


@adjoint("exp")
def _exp_adj(g, node, tape):
    return (g * node.value,)


def sqrt(x):
    return _unary("sqrt", np.sqrt, x)


@adjoint("sqrt")
def _sqrt_adj(g, node, tape):
    out = node.value
    # d sqrt(x)/dx is unbounded at 0; route zero there (Euclidean norm subgradient)
    safe = np.where(out > 0.0, out, 1.0)
    return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)


def tanh(x):
    return _unary("tanh", np.tanh, x)


@adjoint("tanh")
def _tanh_adj(g, node, tape):
    t = np.square(node.value)
    np.subtract(1.0, t, out=t)
    t *= g
    return (t,)


def square(x):
    return _unary("square", np.square, x)


@adjoint("square")
def _square_adj(g, node, tape):
    x = tape.nodes[node.parents[0]].value
    return (2.0 * g * x,)


def absolute(x):
    return _unary("abs", np.abs, x)


def _abs_margin(node, tape):
    x = tape.nodes[node.parents[0]].value.ravel()
    # an exact zero only arises from a saturated (locally constant) upstream value
    return np.abs(x[x != 0.0])


@adjoint("abs", margin=_abs_margin, branch=lambda node, tape: np.sign(tape.nodes[node.parents[0]].value))
def _abs_adj(g, node, tape):
    x = tape.nodes[node.parents[0]].value
    return (g * np.sign(x),)


def softplus(x):
    return _unary("softplus", lambda v: np.logaddexp(0.0, v), x)


@adjoint("softplus")
def _softplus_adj(g, node, tape):
    x = tape.nodes[node.parents[0]].value
    return (g * _sigmoid(x),)


def _sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    return _unary("sigmoid", _sigmoid, x)


@adjoint("sigmoid")
def _sigmoid_adj(g, node, tape):
    s = node.value
    return (g * s * (1.0 - s),)


def clamp(x, lo: float = 0.0, hi: float = 1.0):
    """Hard clamp whose gradient passes only through the open interior."""
    if not isinstance(x, Var):
        return np.clip(x, lo, hi)
    return x.tape.record("clamp", np.clip(x.value, lo, hi), (x,), (lo, hi))


def _clamp_margin(node, tape):
    x = tape.nodes[node.parents[0]].value.ravel()
    lo, hi = node.ctx
    return np.minimum(np.abs(x - lo), np.abs(x - hi))


def _clamp_branch(node, tape):
    x = tape.nodes[node.parents[0]].value
    lo, hi = node.ctx
    return (x > lo).astype(np.int8) + (x >= hi)


@adjoint("clamp", margin=_clamp_margin, branch=_clamp_branch)
def _clamp_adj(g, node, tape):
    x = tape.nodes[node.parents[0]].value
    lo, hi = node.ctx
    return (np.where((x > lo) & (x < hi), g, 0.0),)


# -- reductions and shape ops ------------------------------------------------


def amax(x, axis: int = -1):
    """Max along ``axis``; the lowest index wins ties."""
    if not isinstance(x, Var):
        return np.max(x, axis=axis)
    v = x.value
    arg = np.argmax(v, axis=axis)
    out = np.take_along_axis(v, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    return x.tape.record("amax", out, (x,), (axis, arg))


def _amax_margin(node, tape):
    x = tape.nodes[node.parents[0]].value
    axis, _ = node.ctx
    if x.shape[axis] < 2:
        return np.empty(0)
    part = -np.partition(-x, 1, axis=axis)
    top = np.take(part, 0, axis=axis)
    second = np.take(part, 1, axis=axis)
    return (top - second).ravel()


@adjoint("amax", margin=_amax_margin, branch=lambda node, tape: node.ctx[1])
def _amax_adj(g, node, tape):
    x = tape.nodes[node.parents[0]].value
    axis, arg = node.ctx
    out = np.zeros_like(x)
    np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
    return (out,)


def vsum(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    return x.tape.record("sum", np.sum(x.value, axis=axis), (x,), axis)


@adjoint("sum")
def _sum_adj(g, node, tape):
    shape = tape.nodes[node.parents[0]].value.shape
    axis = node.ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x, axis=None):
    n = np.size(_val(x)) if axis is None else np.shape(_val(x))[axis]
    return vsum(x, axis) / float(n)


def index(x, key):
    if not isinstance(x, Var):
        return x[key]
    return x.tape.record("index", x.value[key], (x,), key)


@adjoint("index")
def _index_adj(g, node, tape):
    shape = tape.nodes[node.parents[0]].value.shape
    out = np.zeros(shape)
    if _is_basic(node.ctx):
        out[node.ctx] = g
    else:
        np.add.at(out, node.ctx, g)
    return (out,)


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice)) for k in keys)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    return x.tape.record("reshape", np.reshape(x.value, shape), (x,))


@adjoint("reshape")
def _reshape_adj(g, node, tape):
    return (g.reshape(tape.nodes[node.parents[0]].value.shape),)


def concat(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    if tape is None:
        return np.concatenate(xs, axis=axis)
    xs = [_lift(tape, x) for x in xs]
    value = np.concatenate([x.value for x in xs], axis=axis)
    sizes = [x.value.shape[axis] for x in xs]
    return tape.record("concat", value, xs, (axis, sizes))


@adjoint("concat")
def _concat_adj(g, node, tape):
    axis, sizes = node.ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def dense(x, w, b=None):
    """``x @ w + b`` for a batch of row vectors.

    Plain arrays go through einsum, whose per-row result does not depend on
    how many rows are evaluated together (BLAS gemm does not guarantee this).
    On the tape the faster BLAS product is used.
    """
    tape = _tape_of(x, w, b)
    if tape is None:
        out = np.einsum("nk,km->nm", x, w)
        if b is not None:
            out += b
        return out
    x, w = _lift(tape, x), _lift(tape, w)
    if b is None:
        return tape.record("dot", x.value @ w.value, (x, w))
    b = _lift(tape, b)
    out = x.value @ w.value
    out += b.value
    return tape.record("affine", out, (x, w, b))


@adjoint("dot")
def _dot_adj(g, node, tape):
    x, w = (tape.nodes[p].value for p in node.parents)
    return g @ w.T, x.T @ g


@adjoint("affine")
def _affine_adj(g, node, tape):
    x, w, _ = (tape.nodes[p].value for p in node.parents)
    return g @ w.T, x.T @ g, g.sum(axis=0)


def quat_to_matrix(r):
    """Rotation matrix of a unit quaternion (w, x, y, z), local -> world."""
    if not isinstance(r, Var):
        return _quat_matrix(np.asarray(r, dtype=np.float64))
    return r.tape.record("quat_to_matrix", _quat_matrix(r.value), (r,))


def _quat_matrix(r):
    w, x, y, z = r
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@adjoint("quat_to_matrix")
def _quat_matrix_adj(g, node, tape):
    w, x, y, z = tape.nodes[node.parents[0]].value
    dw = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    dx = np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    dz = np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    return (2.0 * np.array([np.sum(g * d) for d in (dw, dx, dy, dz)]),)


@adjoint("leaf")
def _leaf_adj(g, node, tape):
    return ()


# -- backward ----------------------------------------------------------------


class Gradients:
    """Leaf gradients from one backward sweep, indexed by the leaf ``Var``."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]) -> None:
        self._tape = tape
        self._grads = grads

    def __getitem__(self, leaf: Var) -> np.ndarray:
        if leaf.tape is not self._tape:
            raise KeyError("leaf belongs to a different tape")
        g = self._grads.get(leaf.idx)
        if g is None:
            return np.zeros_like(leaf.value)
        return g


def backward(tape: Tape, output: Var) -> Gradients:
    """Gradient of the scalar ``output`` with respect to every leaf."""
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    if np.size(output.value) != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: list[np.ndarray | None] = [None] * (output.idx + 1)
    grads[output.idx] = np.ones_like(output.value)
    leaves = {}
    for i in range(output.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.op == "leaf":
            leaves[i] = g
            continue
        for p, gp in zip(node.parents, _ADJOINTS[node.op](g, node, tape)):
            grads[p] = gp if grads[p] is None else grads[p] + gp
    return Gradients(tape, leaves)


class TieError(ValueError):
    """The evaluation point lies within the tie margin of a kink."""


def finite_diff_check(
    fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    params: np.ndarray,
    h: float = 1e-5,
    tie_margin: float = 0.0,
    margin_fn: Callable[[np.ndarray], float] | None = None,
    coords: Sequence[int] | None = None,
    richardson: bool = False,
) -> float:
    """Worst relative error between central differences and ``grad_fn``.

    The relative error per coordinate uses ``max(|analytic|, |numeric|, 1e-8)``
    as denominator. ``coords`` restricts the check to a subset of parameters.
    When ``margin_fn`` is given, :class:`TieError` is raised if the point (or
    any perturbed point) is closer than ``tie_margin`` to a kink, so that the
    caller can resample.

    ``richardson=True`` replaces each central difference ``D(h)`` by
    ``(4 D(h/2) - D(h)) / 3``, which cancels the O(h^2) truncation term and
    so permits a step large enough to keep float64 rounding noise small.
    """
    params = np.asarray(params, dtype=np.float64)
    if margin_fn is not None and margin_fn(params) <= tie_margin:
        raise TieError(f"evaluation point within {tie_margin} of a kink")
    analytic = np.asarray(grad_fn(params), dtype=np.float64)
    if coords is None:
        coords = range(params.size)
    worst = 0.0
    def central(k, step):
        up = params.copy()
        dn = params.copy()
        up[k] += step
        dn[k] -= step
        return (fn(up) - fn(dn)) / (2.0 * step)

    for k in coords:
        numeric = central(k, h)
        if richardson:
            numeric = (4.0 * central(k, h / 2) - numeric) / 3.0
        a = analytic[k]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
