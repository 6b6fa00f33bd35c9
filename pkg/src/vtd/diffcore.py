"""Reverse-mode differentiation over float64 numpy arrays.

A program is any Python callable that takes named :class:`Var` arguments and
combines them with the primitives defined here.  Each primitive records its
parents and a vector-Jacobian product, so a single reverse sweep yields exact
gradients for every input.

Primitives: matmul, add, sub, mul, broadcast_to, concat, getitem (slice),
reshape, transpose, sigmoid, tanh, softplus, exp, log, square, sum, mean,
scale, clip.

Guarded positions: ``log(x, floor=...)`` evaluates ``log(max(x, floor))`` and
``clip`` passes zero gradient outside its bounds.  Gradient checks must keep
their inputs away from those boundaries.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-12
_TINY = np.nextafter(0.0, 1.0)
_ONE_BELOW = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class Var:
    """A node in the computation graph holding a float64 value."""

    __slots__ = ("value", "parents", "vjp", "name")
    __array_priority__ = 100.0

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __float__(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_var(x) -> Var:
    """Wrap an array or scalar as a constant node; pass Vars through."""
    if isinstance(x, Var):
        return x
    return Var(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Var, b: Var) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- binary elementwise -------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Var(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Var(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return Var(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return Var(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# -- structural ---------------------------------------------------------------


def broadcast_to(a, shape: Sequence[int]) -> Var:
    a = as_var(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    sa = a.shape
    return Var(out, (a,), lambda g: (_unbroadcast(g, sa),))


def concat(items: Sequence, axis: int = -1) -> Var:
    items = [as_var(v) for v in items]
    if not items:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([v.value for v in items], axis=axis)
    except ValueError:
        shapes = [v.shape for v in items]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([v.shape[axis] for v in items])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Var(out, tuple(items), vjp)


def getitem(a, index) -> Var:
    a = as_var(a)
    try:
        out = a.value[index]
    except IndexError as err:
        raise ShapeError(f"getitem: {err} for shape {a.shape}") from None
    shape = a.shape

    accumulate = _needs_accumulate(index)

    def vjp(g):
        full = np.zeros(shape)
        if accumulate:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Var(np.array(out, dtype=np.float64), (a,), vjp)


def _needs_accumulate(index) -> bool:
    # Basic slicing never repeats an element; integer-array indexing can.
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def reshape(a, shape: Sequence[int]) -> Var:
    a = as_var(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    sa = a.shape
    return Var(out, (a,), lambda g: (g.reshape(sa),))


def transpose(a) -> Var:
    a = as_var(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return Var(a.value.T, (a,), lambda g: (g.T,))


# -- unary elementwise --------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # Saturated values are pinned to the nearest representable interior point.
    return np.clip(out, _TINY, _ONE_BELOW)


def sigmoid(a) -> Var:
    a = as_var(a)
    s = _sigmoid(a.value)
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Var:
    a = as_var(a)
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a) -> Var:
    a = as_var(a)
    x = a.value
    # Underflow would give exactly 0 below about -745; keep the output positive.
    out = np.maximum(np.logaddexp(0.0, x), _TINY)
    return Var(out, (a,), lambda g: (g * _sigmoid(x),))


def exp(a) -> Var:
    a = as_var(a)
    e = np.exp(a.value)
    return Var(e, (a,), lambda g: (g * e,))


def log(a, floor: float | None = None) -> Var:
    """Natural log; with ``floor`` set, evaluates log(max(x, floor))."""
    a = as_var(a)
    x = a.value
    if floor is None:
        return Var(np.log(x), (a,), lambda g: (g / x,))
    xc = np.maximum(x, floor)
    live = x >= floor
    return Var(np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),))


def square(a) -> Var:
    a = as_var(a)
    x = a.value
    return Var(x * x, (a,), lambda g: (2.0 * g * x,))


def scale(a, c: float) -> Var:
    a = as_var(a)
    c = float(c)
    return Var(a.value * c, (a,), lambda g: (g * c,))


def clip(a, lo: float | None = None, hi: float | None = None) -> Var:
    a = as_var(a)
    x = a.value
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    live = (x >= lo_) & (x <= hi_)
    return Var(np.clip(x, lo_, hi_), (a,), lambda g: (np.where(live, g, 0.0),))


# -- reductions ---------------------------------------------------------------


def sum(a, axis: int | None = None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(out, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- driver -------------------------------------------------------------------


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Var, wrt: Sequence[Var], cotangent=None) -> list[np.ndarray]:
    """Gradients of ``output`` (scalarized by ``cotangent``) w.r.t. ``wrt``."""
    if cotangent is None:
        if output.value.size != 1:
            raise ValueError(
                f"backward: output has shape {output.shape}; a cotangent is required for non-scalar outputs"
            )
        cotangent = np.ones_like(output.value)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != output.shape:
        raise ShapeError(f"backward: cotangent shape {cotangent.shape} != output shape {output.shape}")

    wanted = {id(v) for v in wrt}
    grads: dict[int, np.ndarray] = {id(output): cotangent}
    for node in reversed(_toposort(output)):
        g = grads.pop(id(node), None)
        if g is None or node.vjp is None:
            if g is not None:
                grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.vjp is None and id(parent) not in wanted:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(v), np.zeros_like(v.value)) for v in wrt]


def evaluate(program: Callable[..., Var], inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Forward value of ``program`` on the named inputs."""
    out = program(**{k: Var(np.asarray(v, dtype=np.float64), name=k) for k, v in inputs.items()})
    return as_var(out).value.copy()


def gradient(
    program: Callable[..., Var],
    inputs: Mapping[str, np.ndarray],
    cotangent=None,
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of the (scalarized) output w.r.t. every input."""
    leaves = {k: Var(np.asarray(v, dtype=np.float64), name=k) for k, v in inputs.items()}
    out = as_var(program(**leaves))
    names = list(leaves)
    grads = backward(out, [leaves[k] for k in names], cotangent)
    return dict(zip(names, grads))


def fd_gradient(
    program: Callable[..., Var],
    inputs: Mapping[str, np.ndarray],
    step: float = 1e-5,
    cotangent=None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient, one coordinate at a time."""
    if step <= 0:
        raise ValueError("fd_gradient: step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    cot = None if cotangent is None else np.asarray(cotangent, dtype=np.float64)

    def f(vals):
        out = evaluate(program, vals)
        if cot is None:
            if out.size != 1:
                raise ValueError(f"fd_gradient: output has shape {out.shape}; a cotangent is required")
            return float(out.reshape(()))
        return float(np.sum(out * cot))

    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(base)
            flat[i] = orig - step
            f_minus = f(base)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]) -> float:
    """max |a - n| / max(1, |n|) over all entries of all named arrays."""
    worst = 0.0
    for k, n in numeric.items():
        a = analytic[k]
        if n.size:
            err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
            worst = max(worst, float(err.max()))
    return worst
