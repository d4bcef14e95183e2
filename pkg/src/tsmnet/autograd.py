"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the pipeline is a `Tensor`: a numpy float64 array plus an
optional gradient slot. Operations eagerly compute their result and attach
two closures to the output node: one that recomputes the forward value from
the parents (used for record replay) and one that distributes the output
gradient back to the parents. Gradients are obtained either through
`Tensor.backward()` (graph traversal from a scalar loss) or through
`backward(record, loss)` on an explicitly captured `ComputationRecord`.

Broadcasting is deliberately restricted: two operands must have equal
shapes, or one must be a single-element scalar, or the smaller shape must
be a suffix of the larger (leading-axis broadcast). Anything else requires
an explicit `repeat`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Norms are floored at this value (inside the square root as a floor on the
# squared norm) so normalizing a zero vector never divides by zero.
NORM_EPS = 1e-12

_RECORD_STACK: list["ComputationRecord"] = []


class Tensor:
    """A dense float64 array, optionally carrying a gradient.

    Leaf tensors are created directly; interior nodes are created by the
    operations below and remember their parents plus forward/backward
    closures. `grad` stays None until a backward pass touches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op", "_forward", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._op = "leaf"
        self._forward: Callable[[], Array] | None = None
        self._backprop: Callable[[Array], None] | None = None

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
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from this scalar through its whole graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)

    # Operator sugar. Plain numbers are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: Array, parents: tuple[Tensor, ...], op: str,
          forward: Callable[[], Array],
          backprop: Callable[[Array], None] | None) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents
    out._op = op
    out._forward = forward
    out._backprop = backprop if out.requires_grad else None
    if _RECORD_STACK:
        _RECORD_STACK[-1]._entries.append(out)
    return out


# ---------------------------------------------------------------------------
# Broadcasting policy: equal shapes, scalar, or suffix (leading-axis) only.

def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...], op: str) -> None:
    if sa == sb:
        return
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ValueError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible "
                     "(only equal, scalar, or leading-axis broadcasts are allowed)")


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# Elementwise arithmetic.

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "add")

    def bp(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", lambda: a.data + b.data, bp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "sub")

    def bp(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", lambda: a.data - b.data, bp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bp(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", lambda: a.data * b.data, bp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "div")

    def bp(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), "div", lambda: a.data / b.data, bp)


def neg(a: Tensor) -> Tensor:
    def bp(g: Array) -> None:
        a._accumulate(-g)

    return _make(-a.data, (a,), "neg", lambda: -a.data, bp)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bp(g: Array) -> None:
        a._accumulate(g * p * np.power(a.data, p - 1.0))

    return _make(np.power(a.data, p), (a,), "pow", lambda: np.power(a.data, p), bp)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bp(g: Array) -> None:
        a._accumulate(g * np.exp(a.data))

    return _make(out_data, (a,), "exp", lambda: np.exp(a.data), bp)


def log(a: Tensor) -> Tensor:
    def bp(g: Array) -> None:
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), "log", lambda: np.log(a.data), bp)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bp(g: Array) -> None:
        a._accumulate(g * 0.5 / np.sqrt(a.data))

    return _make(out_data, (a,), "sqrt", lambda: np.sqrt(a.data), bp)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    lo = float(lo)

    def bp(g: Array) -> None:
        a._accumulate(g * (a.data > lo))

    return _make(np.maximum(a.data, lo), (a,), "clip_min",
                 lambda: np.maximum(a.data, lo), bp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes on the strict interior."""
    lo, hi = float(lo), float(hi)

    def bp(g: Array) -> None:
        a._accumulate(g * ((a.data > lo) & (a.data < hi)))

    return _make(np.clip(a.data, lo, hi), (a,), "clip",
                 lambda: np.clip(a.data, lo, hi), bp)


def sigmoid(a: Tensor) -> Tensor:
    out_data = expit(a.data)

    def bp(g: Array) -> None:
        s = expit(a.data)
        a._accumulate(g * s * (1.0 - s))

    return _make(out_data, (a,), "sigmoid", lambda: expit(a.data), bp)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    def fwd() -> Array:
        return 0.5 * a.data * (1.0 + erf(a.data * _INV_SQRT2))

    def bp(g: Array) -> None:
        x = a.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _make(fwd(), (a,), "gelu", fwd, bp)


# ---------------------------------------------------------------------------
# Linear algebra and structure.

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bp(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", lambda: a.data @ b.data, bp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(ax))

    def bp(g: Array) -> None:
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(ax), (a,), "transpose",
                 lambda: a.data.transpose(ax), bp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape

    def bp(g: Array) -> None:
        a._accumulate(g.reshape(src))

    return _make(a.data.reshape(shape), (a,), "reshape",
                 lambda: a.data.reshape(shape), bp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat: empty input")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fwd() -> Array:
        return np.concatenate([p.data for p in parts], axis=axis)

    def bp(g: Array) -> None:
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(start), int(stop))
                p._accumulate(g[tuple(idx)])

    return _make(fwd(), tuple(parts), "concat", fwd, bp)


def take(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the gradient is zero outside the view."""
    def bp(g: Array) -> None:
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return _make(a.data[key], (a,), "take", lambda: a.data[key], bp)


def gather_rows(table: Tensor, idx: Array) -> Tensor:
    """Row lookup by integer index array; repeated rows accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)

    def bp(g: Array) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return _make(table.data[idx], (table,), "gather_rows",
                 lambda: table.data[idx], bp)


def repeat(a: Tensor, axis: int, n: int) -> Tensor:
    """Explicit expansion of a size-1 axis (the only non-leading broadcast)."""
    if a.shape[axis] != 1:
        raise ValueError(f"repeat: axis {axis} of shape {a.shape} is not 1")

    def bp(g: Array) -> None:
        a._accumulate(g.sum(axis=axis, keepdims=True))

    return _make(np.repeat(a.data, n, axis=axis), (a,), "repeat",
                 lambda: np.repeat(a.data, n, axis=axis), bp)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)

    def fwd() -> Array:
        return a.data.sum(axis=axes, keepdims=keepdims)

    def bp(g: Array) -> None:
        gk = g
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            gk = g.reshape(shape)
        a._accumulate(np.broadcast_to(gk, a.shape).copy())

    return _make(fwd(), (a,), "sum", fwd, bp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def fwd() -> Array:
        return a.data.mean(axis=axes, keepdims=keepdims)

    def bp(g: Array) -> None:
        gk = g
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            gk = g.reshape(shape)
        a._accumulate(np.broadcast_to(gk, a.shape).copy() / count)

    return _make(fwd(), (a,), "mean", fwd, bp)


# ---------------------------------------------------------------------------
# Composite-friendly nonlinear primitives.

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe softmax along `axis`; rejects NaN input."""
    if np.isnan(a.data).any():
        raise ValueError("softmax: NaN in input")
    ax = axis % a.ndim

    def fwd() -> Array:
        shifted = a.data - a.data.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=ax, keepdims=True)

    out_data = fwd()

    def bp(g: Array) -> None:
        s = fwd()
        a._accumulate(s * (g - (g * s).sum(axis=ax, keepdims=True)))

    return _make(out_data, (a,), "softmax", fwd, bp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(a.data).any():
        raise ValueError("log_softmax: NaN in input")
    ax = axis % a.ndim

    def fwd() -> Array:
        shifted = a.data - a.data.max(axis=ax, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))

    out_data = fwd()

    def bp(g: Array) -> None:
        s = np.exp(fwd())
        a._accumulate(g - s * g.sum(axis=ax, keepdims=True))

    return _make(out_data, (a,), "log_softmax", fwd, bp)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    def stats():
        mu = a.data.mean(axis=-1, keepdims=True)
        var = a.data.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return mu, inv

    def fwd() -> Array:
        mu, inv = stats()
        return (a.data - mu) * inv

    out_data = fwd()

    def bp(g: Array) -> None:
        mu, inv = stats()
        y = (a.data - mu) * inv
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - y * gym))

    return _make(out_data, (a,), "layer_norm", fwd, bp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Unit-normalize along `axis` with the squared norm floored at NORM_EPS**2.

    The floor (rather than an additive term) keeps the result exactly
    invariant under power-of-two rescaling of the input and still never
    divides by zero.
    """
    ax = axis % a.ndim
    n2 = tsum(mul(a, a), axis=ax, keepdims=True)
    n = sqrt(clip_min(n2, NORM_EPS * NORM_EPS))
    return div(a, repeat(n, ax, a.shape[ax]))


def upsample2d(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsample of an (H, W, C) map by an integer factor."""
    if a.ndim != 3:
        raise ValueError(f"upsample2d: expected (H, W, C), got {a.shape}")
    h, w, c = a.shape
    r = reshape(a, (h, 1, w, 1, c))
    r = repeat(r, 1, factor)
    r = repeat(r, 3, factor)
    return reshape(r, (h * factor, w * factor, c))


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack (C,) vectors into an (N, C) matrix."""
    return concat([reshape(r, (1,) + r.shape) for r in rows], axis=0)


def mean_of(items: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors."""
    return tmean(concat([reshape(t, (1,)) for t in items], axis=0))


# ---------------------------------------------------------------------------
# Explicit operation records.

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool


class ComputationRecord:
    """Ordered log of the primitive operations applied while active.

    Entries are the op output tensors in creation order, which is a
    topological order by construction (an op's inputs exist before it runs).
    `replay()` recomputes every entry from its parents' current data and
    reproduces the original values bit-identically for identical inputs.
    """

    def __init__(self):
        self._entries: list[Tensor] = []

    def __enter__(self) -> "ComputationRecord":
        _RECORD_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _RECORD_STACK.pop()

    @property
    def entries(self) -> list[Tensor]:
        return list(self._entries)

    def replay(self) -> None:
        for t in self._entries:
            t.data = t._forward()

    def leaves(self) -> list[Tensor]:
        found: dict[int, Tensor] = {}
        for t in self._entries:
            for p in t._parents:
                if not p._parents and p.requires_grad:
                    found.setdefault(id(p), p)
        return list(found.values())


def backward(record: ComputationRecord, loss: Tensor) -> None:
    """Reverse-mode sweep over an explicit record.

    The loss must be a scalar produced inside the record. Leaves that do
    not influence the loss end with an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    ids = {id(t) for t in record._entries}
    if id(loss) not in ids:
        raise ValueError("backward: loss was not produced by this record")
    for t in record._entries:
        t.grad = None
    for leaf in record.leaves():
        leaf.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(record._entries):
        if t._backprop is not None and t.grad is not None:
            t._backprop(t.grad)
    for leaf in record.leaves():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    `fn` must deterministically map the given tensors to a scalar tensor;
    two forward evaluations are compared bit-for-bit to catch accidental
    randomness. The relative error uses |a - b| / max(1e-8, |a|, |b|).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    inputs = list(inputs)
    first = fn(*inputs)
    second = fn(*inputs)
    if not np.array_equal(first.data, second.data):
        raise ValueError("grad_check: fn is not deterministic")
    if first.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar")

    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    max_rel = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = float(fn(*inputs).data.reshape(()))
            flat[i] = keep - eps
            f_minus = float(fn(*inputs).data.reshape(()))
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - fd) / max(1e-8, abs(aflat[i]), abs(fd))
            if rel > max_rel:
                max_rel = rel
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel <= tol)
