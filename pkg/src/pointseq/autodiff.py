"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is eager: each op computes its numpy result immediately and
records a closure for the backward pass, so a computation graph is written
as an ordinary Python callable mapping a dict of named leaf tensors to an
output ``Tensor``. `forward`, `gradient` and `finite_difference_check`
consume such callables together with a `ParamSet` holding the leaf arrays.

No op mutates its operands. Training code typically runs at float32; the
finite-difference checker re-executes the same callable at float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for an op."""


class DomainError(ValueError):
    """Operand values outside an op's documented domain (log/divide/sqrt)."""


class UnknownNameError(KeyError):
    """A graph or gradient request referenced a parameter name that does not exist."""


class NonScalarOutputError(ValueError):
    """gradient() requires a scalar-valued graph output."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense real array plus the bookkeeping needed for backprop.

    ``data`` is always a numpy float32/float64 array. Leaf tensors have no
    parents; interior tensors keep references to their parents and a
    closure computing parent gradients from the output gradient.
    """

    __slots__ = ("data", "_parents", "_backward")

    def __init__(self, data, parents: Tuple["Tensor", ...] = (),
                 backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None):
        if type(data) is np.ndarray and data.dtype in _FLOAT_DTYPES:
            self.data = data
        else:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(np.float64 if arr.dtype == np.int64 else np.float32)
            self.data = arr
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar; scalars / arrays become constants
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return divide(self, _coerce(other, self))

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self))

    def __neg__(self):
        return neg(self)


def _raise_nonscalar(t: Tensor):
    raise NonScalarOutputError(f"expected scalar output, got shape {t.shape}")


def constant(value, dtype=None) -> Tensor:
    """Wrap a value as a leaf tensor that never receives gradients."""
    arr = np.asarray(value, dtype=dtype) if dtype is not None else np.asarray(value)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum an upstream gradient back down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operands of shape {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def divide(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "divide")
    if np.any(b.data == 0):
        raise DomainError("divide: zero divisor")
    out = a.data / b.data
    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb
    return Tensor(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None
    out = a.data @ b.data
    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return Tensor(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: nonpositive operand")
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("sqrt: nonpositive operand")
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * (0.5 / out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return Tensor(out, (a,), lambda g: (g * (a.data > 0),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_C3 = 3.0 * 0.044715 * _GELU_C


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU; the backward rule is the exact derivative of the approximation."""
    x = a.data
    x2 = x * x
    inner = x2 * (0.044715 * _GELU_C)
    inner += _GELU_C
    inner *= x
    t = np.tanh(inner)
    out = t + 1.0
    out *= x
    out *= 0.5
    def backward(g):
        dx = x2 * _GELU_C3
        dx += _GELU_C
        dx *= 1.0 - t * t
        dx *= x
        dx += 1.0 + t
        dx *= 0.5
        dx *= g
        return (dx,)
    return Tensor(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return Tensor(xhat, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)
    return Tensor(out, (a,), backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return axis % ndim
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)
    return Tensor(out, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)
    return Tensor(out, (a,), backward)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max over an axis; gradient routes to the first occurrence of the max."""
    axis = _norm_axis(axis, a.ndim)
    if axis is not None and not isinstance(axis, int):
        raise ShapeError("reduce_max: axis must be an int or None")
    out = a.data.max(axis=axis, keepdims=keepdims)
    if axis is None:
        idx = int(a.data.argmax())
        def backward(g):
            grad = np.zeros_like(a.data)
            grad.reshape(-1)[idx] = np.asarray(g).reshape(-1)[0]
            return (grad,)
    else:
        idx = np.expand_dims(a.data.argmax(axis=axis), axis)
        def backward(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            grad = np.zeros_like(a.data)
            np.put_along_axis(grad, idx, gg, axis=axis)
            return (grad,)
    return Tensor(out, (a,), backward)


def reduce_min(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Min over an axis; gradient routes to the first occurrence of the min."""
    axis = _norm_axis(axis, a.ndim)
    if axis is not None and not isinstance(axis, int):
        raise ShapeError("reduce_min: axis must be an int or None")
    out = a.data.min(axis=axis, keepdims=keepdims)
    if axis is None:
        idx = int(a.data.argmin())
        def backward(g):
            grad = np.zeros_like(a.data)
            grad.reshape(-1)[idx] = np.asarray(g).reshape(-1)[0]
            return (grad,)
    else:
        idx = np.expand_dims(a.data.argmin(axis=axis), axis)
        def backward(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            grad = np.zeros_like(a.data)
            np.put_along_axis(grad, idx, gg, axis=axis)
            return (grad,)
    return Tensor(out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty input list")
    axis = axis % parts[0].ndim
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(m != n for i, (m, n) in enumerate(zip(other, base)) if i != axis):
            raise ShapeError(f"concat: shape {p.shape} incompatible with {parts[0].shape} on axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))
    return Tensor(out, tuple(parts), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return Tensor(out.copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def gather(a: Tensor, idx, unique: bool = False) -> Tensor:
    """Indexed rows along axis 0: out[i...] = a[idx[i...]]. Gradient scatters with
    accumulation; pass unique=True only when indices never repeat, which allows
    a much faster direct-assignment scatter."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather: index array must be integral")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for axis 0 of length {a.shape[0]}")
    out = a.data[idx]
    def backward(g):
        grad = np.zeros_like(a.data)
        if unique:
            grad[idx] = g
        else:
            np.add.at(grad, idx, g)
        return (grad,)
    return Tensor(out, (a,), backward)


# ---------------------------------------------------------------------------
# fused composites used throughout the model code
# ---------------------------------------------------------------------------

def square(a: Tensor) -> Tensor:
    return mul(a, a)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fused affine map x @ w + b over the last axis."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} for weight {w.shape}")
        out += b.data
    ci, co = w.shape
    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, ci).T @ g.reshape(-1, co)
        if b is None:
            return gx, gw
        gb = g.reshape(-1, co).sum(axis=0)
        return gx, gw, gb
    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, backward)


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, max-subtracted; gradient is exactly softmax."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m).reshape(a.shape[:-1])
    def backward(g):
        return (np.expand_dims(g, -1) * (e / s),)
    return Tensor(out, (a,), backward)


def l2_normalize(a: Tensor, eps: float = 1e-20) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm; all-zero rows stay zero."""
    inv = 1.0 / np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True) + eps)
    out = a.data * inv
    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (inv * (g - out * dot),)
    return Tensor(out, (a,), backward)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class _Entry:
    value: np.ndarray
    trainable: bool


class ParamSet:
    """Ordered map from dotted names to arrays, each flagged trainable or frozen.

    Iteration order is lexicographic in the name, independent of insertion
    order, so optimizers and serializers see a deterministic layout.
    """

    def __init__(self):
        self._entries: Dict[str, _Entry] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._entries:
            raise ValueError(f"parameter {name!r} already present")
        arr = np.asarray(value)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self._entries[name] = _Entry(arr, trainable)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def value(self, name: str) -> np.ndarray:
        if name not in self._entries:
            raise UnknownNameError(name)
        return self._entries[name].value

    def set_value(self, name: str, value: np.ndarray) -> None:
        entry = self._entries.get(name)
        if entry is None:
            raise UnknownNameError(name)
        arr = np.asarray(value, dtype=entry.value.dtype)
        if arr.shape != entry.value.shape:
            raise ShapeError(f"set_value: {name} expects shape {entry.value.shape}, got {arr.shape}")
        entry.value = arr

    def trainable(self, name: str) -> bool:
        if name not in self._entries:
            raise UnknownNameError(name)
        return self._entries[name].trainable

    def names(self) -> List[str]:
        return sorted(self._entries)

    def trainable_names(self) -> List[str]:
        return [n for n in sorted(self._entries) if self._entries[n].trainable]

    def items(self) -> Iterable[Tuple[str, np.ndarray, bool]]:
        for name in sorted(self._entries):
            e = self._entries[name]
            yield name, e.value, e.trainable

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, value, trainable in self.items():
            out.add(name, value.astype(dtype), trainable)
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value, trainable in self.items():
            out.add(name, value.copy(), trainable)
        return out

    def num_scalars(self, trainable_only: bool = False) -> int:
        return sum(v.size for _, v, t in self.items() if t or not trainable_only)


class LeafMap(Mapping):
    """Read-only name -> leaf Tensor view handed to graph callables."""

    def __init__(self, leaves: Dict[str, Tensor]):
        self._leaves = leaves

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._leaves[name]
        except KeyError:
            raise UnknownNameError(name) from None

    def __iter__(self):
        return iter(self._leaves)

    def __len__(self):
        return len(self._leaves)


def make_leaves(params: ParamSet) -> LeafMap:
    return LeafMap({name: Tensor(value) for name, value, _ in params.items()})


# ---------------------------------------------------------------------------
# evaluation and differentiation
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backprop(root: Tensor) -> Dict[int, np.ndarray]:
    """Gradients of a scalar root w.r.t. every tensor in its graph, keyed by id()."""
    if root.data.size != 1:
        raise NonScalarOutputError(f"backprop root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return grads


def grads_by_name(root: Tensor, leaves: LeafMap, names: Sequence[str]) -> Dict[str, np.ndarray]:
    table = backprop(root)
    out = {}
    for name in names:
        leaf = leaves[name]
        out[name] = table.get(id(leaf), np.zeros_like(leaf.data))
    return out


def forward(expr: Callable[[LeafMap], Tensor], params: ParamSet) -> Tensor:
    """Evaluate a graph callable against a parameter set, without mutation."""
    return expr(make_leaves(params))


def gradient(expr: Callable[[LeafMap], Tensor], params: ParamSet,
             wrt: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """Exact reverse-mode partials of a scalar graph w.r.t. named trainable leaves."""
    if wrt is None:
        wrt = params.trainable_names()
    else:
        for name in wrt:
            if name not in params:
                raise UnknownNameError(name)
            if not params.trainable(name):
                raise ValueError(f"gradient: parameter {name!r} is frozen")
    leaves = make_leaves(params)
    out = expr(leaves)
    if out.data.size != 1:
        raise NonScalarOutputError(f"gradient: expression output has shape {out.shape}, expected scalar")
    return grads_by_name(out, leaves, wrt)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_name: str
    worst_index: int = -1
    per_param: Dict[str, float] = field(default_factory=dict)


def finite_difference_check(expr: Callable[[LeafMap], Tensor], params: ParamSet,
                            eps: float = 1e-5,
                            wrt: Optional[Sequence[str]] = None) -> FiniteDiffReport:
    """Compare reverse-mode gradients against central finite differences.

    Runs at float64 regardless of the incoming dtype. Frozen parameters are
    never perturbed or reported. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    if eps <= 0:
        raise ValueError("finite_difference_check: eps must be positive")
    work = params.astype(np.float64)
    if wrt is None:
        wrt = work.trainable_names()
    analytic = gradient(expr, work, wrt)

    def eval_scalar() -> float:
        out = expr(make_leaves(work))
        if out.data.size != 1:
            raise NonScalarOutputError(f"finite_difference_check: output shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    report = FiniteDiffReport(0.0, "", -1, {})
    for name in wrt:
        arr = work.value(name)
        flat = arr.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_scalar()
            flat[i] = orig - eps
            f_minus = eval_scalar()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_name = name
                report.worst_index = i
        report.per_param[name] = worst
    return report
