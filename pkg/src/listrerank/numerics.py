"""Dense float64 arrays with a small reverse-mode differentiation tape.

Values are plain ``numpy`` arrays. Differentiable computations wrap them in
:class:`Node`; every op records a closure that maps the output gradient back
to its inputs. Calling :meth:`Node.backward` on a scalar node fills ``grad``
on every node that requires a gradient.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np

Tensor = np.ndarray


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class PreconditionError(ValueError):
    """An operation was called outside its domain."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or infinity."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite probe."""


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of all upstream nodes."""
        if self.value.size != 1:
            raise DimensionError(f"backward() needs a scalar output, got shape {self.value.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def parameter(value, name: str | None = None) -> Node:
    """A leaf that collects gradients."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _result(value: np.ndarray, parents: tuple[Node, ...], backward_fn, op: str) -> Node:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    needs = False
    for p in parents:
        if p.requires_grad:
            needs = True
            break
    return Node(value, parents if needs else (), backward_fn if needs else None, needs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {sa} and {sb}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise DimensionError(f"sub shape mismatch: {sa} and {sb}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    try:
        out = av * bv
    except ValueError as exc:
        raise DimensionError(f"mul shape mismatch: {av.shape} and {bv.shape}") from exc
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def scale(a, c: float) -> Node:
    a = as_node(a)
    return _result(a.value * c, (a,), lambda g: (g * c,), "scale")


def transpose(a) -> Node:
    a = as_node(a)
    return _result(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: tuple[int, ...]) -> Node:
    a = as_node(a)
    old = a.value.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index) -> Node:
    """``a[index]`` for any numpy basic or integer-array index."""
    a = as_node(a)
    shape = a.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.value[index]), (a,), backward, "take")


def concat(nodes: Iterable, axis: int = 0) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        shapes = [n.value.shape for n in nodes]
        raise DimensionError(f"concat shape mismatch along axis {axis}: {shapes}") from exc
    bounds = np.cumsum([n.value.shape[axis] for n in nodes])[:-1]
    return _result(out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def total(a) -> Node:
    a = as_node(a)
    shape = a.value.shape
    return _result(np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a) -> Node:
    a = as_node(a)
    n = a.value.size
    return scale(total(a), 1.0 / n)


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log1p(a) -> Node:
    a = as_node(a)
    av = a.value
    # log(1 + x) is as accurate as log1p once x >= 1, and matches it bitwise
    # on integer-valued sums.
    out = np.where(av < 1.0, np.log1p(av), np.log(1.0 + np.maximum(av, 1.0)))
    return _result(out, (a,), lambda g: (g / (1.0 + av),), "log1p")


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    if np.any(av <= 0):
        raise PreconditionError("log of a non-positive value")
    return _result(np.log(av), (a,), lambda g: (g / av,), "log")


def softplus(a) -> Node:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_node(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * sigmoid_value(x),), "softplus")


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Node:
    a = as_node(a)
    out = sigmoid_value(a.value)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Node:
    """GELU, tanh approximation."""
    a = as_node(a)
    x = a.value
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), backward, "gelu")


def masked_softmax(logits, mask) -> Node:
    """Row-wise softmax restricted to positions where ``mask`` is true.

    Masked positions come out exactly zero. Every row needs at least one
    allowed position.
    """
    logits = as_node(logits)
    mask = np.asarray(mask, dtype=bool)
    lv = logits.value
    if lv.ndim != 2 or mask.shape != lv.shape:
        raise DimensionError(f"masked_softmax shape mismatch: logits {lv.shape}, mask {mask.shape}")
    allowed = mask.sum(axis=1)
    if np.any(allowed == 0):
        rows = np.flatnonzero(allowed == 0).tolist()
        raise PreconditionError(f"masked_softmax: rows {rows} have no allowed position")
    z = np.where(mask, lv, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (logits,), backward, "masked_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Node:
    """Standardize each row, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    xv, gv = x.value, gain.value
    if xv.ndim != 2 or xv.shape[1] < 1:
        raise DimensionError(f"layer_norm expects a 2-d input with d >= 1, got {xv.shape}")
    d = xv.shape[1]
    if gv.shape != (d,) or bias.value.shape != (d,):
        raise DimensionError(
            f"layer_norm parameter shapes {gv.shape}, {bias.value.shape} do not match d={d}"
        )
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gv + bias.value

    def backward(g):
        dxhat = g * gv
        dx = inv * (
            dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, gain, bias), backward, "layer_norm")


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    order: int = 2,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``f`` receives a dict of arrays. Each scalar entry is nudged on a private
    copy; the caller's arrays are never touched. ``order=2`` is the two-point
    stencil (f(x+h) - f(x-h)) / 2h. ``order=4`` is the five-point stencil,
    whose truncation error is O(h^4); it tolerates a larger ``h`` and so keeps
    roundoff down on entries whose true gradient is tiny.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out: dict[str, np.ndarray] = {}
    for name in names if names is not None else list(work):
        arr = work[name]
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]

            def probe(step):
                flat[i] = orig + step
                v = float(f(work))
                flat[i] = orig
                if not math.isfinite(v):
                    raise OracleError(f"non-finite objective probing {name}[{i}] at offset {step:g}")
                return v

            if order == 2:
                gflat[i] = (probe(h) - probe(-h)) / (2.0 * h)
            else:
                gflat[i] = (8.0 * (probe(h) - probe(-h)) - (probe(2 * h) - probe(-2 * h))) / (12.0 * h)
        out[name] = grad
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
