"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Design: a dynamic tape (`Tape`) records one evaluation at a time. Ops run
eagerly on numpy arrays; when a tape is active and any input requires a
gradient, the op appends a node holding a vector-Jacobian closure. Backward
walks nodes in strict reverse recording order and accumulates adjoints into
`Tensor.grad` buffers. A tape can be consumed by backward exactly once.

Broadcasting is deliberately strict: elementwise ops require identical shapes
or a () scalar operand; anything else must go through an explicit
`broadcast_to`, so shape bugs fail loudly at the op that caused them.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class DiffError(Exception):
    """Base class for errors raised by the differentiation core."""


class ShapeMismatch(DiffError):
    def __init__(self, op: str, *shapes: tuple) -> None:
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


class NonFiniteOutput(DiffError):
    def __init__(self, op: str, detail: str = "") -> None:
        self.op = op
        msg = f"{op}: non-finite value in output"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class TapeError(DiffError):
    pass


_STATE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with optional gradient buffer.

    `node_id` is set only while the tensor is the output of an op recorded on
    the active tape; tensors built outside a recording context keep None.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; python scalars become () constants
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, as_tensor(other))

    def __rsub__(self, other):
        return subtract(as_tensor(other), self)

    def __mul__(self, other):
        return multiply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, as_tensor(other))

    def __rtruediv__(self, other):
        return divide(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Computation record for one evaluation; thread-confined."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad tensor's grad.

    root must be a scalar (shape ()); the tape is consumed and cannot be
    replayed.
    """
    if tape._consumed:
        raise TapeError("backward called twice on a consumed record")
    if root.shape != ():
        raise DiffError(f"backward root must be scalar, got shape {root.shape}")
    tape._consumed = True
    root.accumulate_grad(np.ones((), dtype=np.float64))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.accumulate_grad(gi)


def _finish(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteOutput(op)
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(op, inputs, out, vjp))
    return out


def custom_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    vjp: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Register an externally implemented primitive (forward already computed).

    `vjp(g)` must return one cotangent array (or None) per input. Used by the
    warp module, whose bilinear sampler is a single fused primitive.
    """
    return _finish(name, tuple(inputs), out_data, vjp)


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeMismatch(op, a.shape, b.shape)


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    # inverse of the implicit ()-scalar broadcast in elementwise ops
    if shape == ():
        return np.asarray(g.sum(), dtype=np.float64)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, g)

    return _finish("add", (a, b), out, vjp)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("subtract", a, b)
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, -g)

    return _finish("subtract", (a, b), out, vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("multiply", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(a.shape, g * bd), _reduce_to(b.shape, g * ad)

    return _finish("multiply", (a, b), out, vjp)


def divide(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes("divide", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(a.shape, g / bd), _reduce_to(b.shape, -g * ad / (bd * bd))

    return _finish("divide", (a, b), out, vjp)


def scale(a: Tensor, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    out = a.data * k

    def vjp(g):
        return (g * k,)

    return _finish("scale", (a,), out, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d x 2-d, batched 3-d x 2-d, or batched 3-d x 3-d matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.ndim == 2 and b.ndim == 3:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ bd.T, ad.T @ g
        if b.ndim == 2:  # (B,n,k) @ (k,m)
            ga = g @ bd.T
            gb = np.einsum("bnk,bnm->km", ad, g)
            return ga, gb
        # (B,n,k) @ (B,k,m)
        ga = g @ bd.transpose(0, 2, 1)
        gb = ad.transpose(0, 2, 1) @ g
        return ga, gb

    return _finish("matmul", (a, b), out, vjp)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _finish("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    """Natural log with the input floored at LOG_FLOOR (flat below it)."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_FLOOR)
    out = np.log(clamped)
    above = a.data > LOG_FLOOR

    def vjp(g):
        return (np.where(above, g / clamped, 0.0),)

    return _finish("log", (a,), out, vjp)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _finish("tanh", (a,), out, vjp)


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, p)
    ad = a.data

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * p * np.power(ad, p - 1.0),)

    return _finish("power", (a,), out, vjp)


def _restore_axis(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        return (_restore_axis(np.asarray(g), shape, axis, keepdims),)

    return _finish("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def vjp(g):
        return (_restore_axis(np.asarray(g), shape, axis, keepdims) / count,)

    return _finish("mean", (a,), np.asarray(out), vjp)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis (max-shifted for stability)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", (a,), out, vjp)


def norm(a: Tensor) -> Tensor:
    """Euclidean norm of a vector. Subgradient 0 at the origin."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeMismatch("norm", a.shape)
    value = float(np.sqrt(np.dot(a.data, a.data)))
    ad = a.data

    def vjp(g):
        if value == 0.0:
            return (np.zeros_like(ad),)
        return (g * ad / value,)

    return _finish("norm", (a,), np.asarray(value), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch("cosine_similarity", a.shape, b.shape)
    na = float(np.sqrt(np.dot(a.data, a.data)))
    nb = float(np.sqrt(np.dot(b.data, b.data)))
    if na == 0.0 or nb == 0.0:
        raise DiffError("cosine_similarity: zero-norm input")
    dot = float(np.dot(a.data, b.data))
    value = dot / (na * nb)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g * (bd / (na * nb) - value * ad / (na * na))
        gb = g * (ad / (na * nb) - value * bd / (nb * nb))
        return ga, gb

    return _finish("cosine_similarity", (a, b), np.asarray(value), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DiffError("concat: empty input")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", ts, out, vjp)


def slice_(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _finish("slice", (a,), np.asarray(out).copy(), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _finish("reshape", (a,), out, vjp)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.transpose(axes).copy()
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _finish("transpose", (a,), out, vjp)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast of a scalar / 1-sized-axis tensor to `shape`."""
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as err:
        raise ShapeMismatch("broadcast_to", a.shape, tuple(shape)) from err
    orig = a.shape

    def vjp(g):
        g = np.asarray(g)
        extra = g.ndim - len(orig)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        for ax, n in enumerate(orig):
            if n == 1 and g.shape[ax] != 1:
                g = g.sum(axis=ax, keepdims=True)
        return (g.reshape(orig),)

    return _finish("broadcast_to", (a,), out, vjp)


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps one Tensor to a scalar Tensor and must be deterministic. The
    relative error per coordinate is |analytic - fd| / max(1, |fd|).
    """
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(leaf)
    backward(tape, out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        try:
            hi = fn(Tensor((flat + bump).reshape(x.shape))).item()
            lo = fn(Tensor((flat - bump).reshape(x.shape))).item()
        except DiffError as err:
            raise DiffError(f"grad_check: non-finite evaluation at coordinate {i}") from err
        fd = (hi - lo) / (2.0 * h)
        an = analytic.reshape(-1)[i]
        if not (np.isfinite(fd) and np.isfinite(an)):
            raise DiffError(f"grad_check: non-finite value at coordinate {i}")
        err = abs(an - fd) / max(1.0, abs(fd))
        if err > worst:
            worst = err
    return float(worst)
