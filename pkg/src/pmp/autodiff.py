"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Record` is active are appended to it in
execution order; :func:`backward` walks that list once in reverse.  Outside an
active record the same functions simply evaluate, which is what inference uses.
"""
from __future__ import annotations

import functools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor", "Parameter", "Record", "backward", "grad_check", "GradCheckReport",
    "ShapeError", "DomainError", "NonFiniteError", "NonDeterministicError",
    "default_dtype", "precision", "tensor", "constant",
    "matmul", "add", "sub", "mul", "neg", "scale", "concat", "slice_cols", "take", "reshape",
    "sum", "mean", "elu", "sigmoid", "tanh", "softmax", "log_softmax", "log",
    "exp", "gather_rows", "scatter_add_rows", "straight_through", "detach",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicError(RuntimeError):
    pass


_state = threading.local()


def _records() -> list:
    stack = getattr(_state, "records", None)
    if stack is None:
        stack = _state.records = []
    return stack


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(bits: int):
    """Temporarily switch the dtype used for freshly created tensors (32 or 64)."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    prev = default_dtype()
    _state.dtype = np.dtype(np.float32 if bits == 32 else np.float64)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''} of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; everything routes through the recorded primitives
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or default_dtype()))


def constant(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


@dataclass
class _Op:
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Record:
    """Ordered log of executed primitives plus the parameters they touched."""

    ops: list[_Op] = field(default_factory=list)
    params: dict[int, Parameter] = field(default_factory=dict)

    def __enter__(self) -> "Record":
        _records().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _records()
        if not stack or stack[-1] is not self:
            raise RuntimeError("records must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.ops)


def _emit(name: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    stack = _records()
    needs = bool(stack) and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        rec = stack[-1]
        rec.ops.append(_Op(name, out, inputs, vjp))
        for t in inputs:
            if isinstance(t, Parameter):
                rec.params.setdefault(id(t), t)
    return out


def backward(record: Record, loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[Parameter, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to parameters.

    Parameters never reached by the loss get zero arrays.  When ``params`` is
    omitted the record's own registry is used.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    targets = list(params) if params is not None else list(record.params.values())
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(record.ops):
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for p in targets:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape)
    return out


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(constant(t) for t in ts)
    try:
        value = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _emit("concat", value, ts, vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor."""
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice: bad column range [{start}, {stop}) for shape {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice", a.data[:, start:stop], (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index) -> Tensor:
    """General basic/advanced indexing ``a[index]`` (gradient scatters back)."""
    value = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("slice", np.array(value), (a,), vjp)


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(value), (a,), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    value = np.where(x > 0, x, neg_part)
    return _emit("elu", value, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + 1.0).astype(x.dtype),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    value = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _emit("sigmoid", value, (a,), lambda g: (g * value * (1.0 - value),))


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    return _emit("tanh", value, (a,), lambda g: (g * (1.0 - value * value),))


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)
    return _emit("exp", value, (a,), lambda g: (g * value,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (value * (g - (g * value).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", value, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    value = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(value) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", value, (a,), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g}) in tensor of shape {a.shape}")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows ``a[index]`` of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"gather-rows: expected 2-D input, got shape {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather-rows: index out of range for {a.shape[0]} rows")

    def vjp(g):
        return (_scatter(g, index, a.shape[0]),)

    return _emit("gather_rows", a.data[index], (a,), vjp)


@functools.lru_cache(maxsize=128)
def _scatter_operator(key: bytes, n: int, dtype: str) -> sparse.csr_matrix:
    # CSR rows list source rows in ascending order, so every sum has a fixed order
    index = np.frombuffer(key, dtype=np.int64)
    order = np.argsort(index, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(index, minlength=n), out=indptr[1:])
    return sparse.csr_matrix((np.ones(index.size, dtype=dtype), order, indptr), shape=(n, index.size))


def _scatter(rows: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    op = _scatter_operator(np.ascontiguousarray(index, dtype=np.int64).tobytes(), n, rows.dtype.str)
    flat = rows.reshape(index.size, -1)
    return np.asarray(op @ flat).reshape((n,) + rows.shape[1:])


def scatter_add_rows(a: Tensor, index, n_rows: int) -> Tensor:
    """``out[index[e]] += a[e]`` for every row ``e``; the single aggregation primitive."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"scatter-add-rows: index of shape {index.shape} does not match rows of {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError(f"scatter-add-rows: index out of range for {n_rows} rows")
    return _emit("scatter_add_rows", _scatter(a.data, index, n_rows), (a,), lambda g: (g[index],))


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward value ``hard``, backward gradient of ``soft`` (identity)."""
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight-through: hard {hard.shape} vs soft {soft.shape}")
    return _emit("straight_through", hard, (soft,), lambda g: (g,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    checked: dict[str, int]

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def lines(self) -> list[str]:
        return [f"{name:<40s} rel_err={err:.3e} ({self.checked[name]} entries)"
                for name, err in self.errors.items()]


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0, grad_transform=None) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` must rebuild its whole computation (including any random draws,
    from a fixed seed) on each call.  The relative error of a parameter is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
    checked entries, and 0 when both vanish.  ``max_entries`` samples a subset
    of each tensor's entries to bound runtime.  ``grad_transform`` may rewrite
    the analytic gradients before comparison (negative-control tests).
    """
    with Record() as rec:
        loss = fn()
    grads = backward(rec, loss, params)
    if grad_transform is not None:
        grads = grad_transform(grads)
    base = loss.item()
    again = fn().item()
    if base != again:
        raise NonDeterministicError(f"function gave {base!r} then {again!r} under identical inputs")

    pick = np.random.default_rng(seed)
    errors, checked = {}, {}
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(pick.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + eps
            up = fn().item()
            flat[k] = orig - eps
            down = fn().item()
            flat[k] = orig
            numeric[n] = (up - down) / (2 * eps)
        analytic = grads[p].reshape(-1)[idx].astype(np.float64)
        denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        err = 0.0 if denom == 0 else float(np.abs(analytic - numeric).max() / denom)
        name = p.name or f"param{i}"
        errors[name] = err
        checked[name] = int(idx.size)
    return GradCheckReport(errors, checked)
