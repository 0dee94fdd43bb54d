"""Minimal dense-tensor kernel with reverse-mode gradients.

Values live in numpy arrays (row-major, fp32 or fp64); every operation
eagerly records its inputs and a local vector-Jacobian closure on the
output node, so one forward pass builds a fresh tape.  ``backward`` walks
the tape once and accumulates d(loss)/d(value) into every reachable
:class:`Parameter`.  Non-finite results abort immediately: a NaN or Inf
anywhere is a bug upstream, never something to propagate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

FP32 = np.float32
FP64 = np.float64
_ALLOWED_DTYPES = (FP32, FP64)


def _checked(arr: np.ndarray) -> np.ndarray:
    # Summing propagates NaN/Inf; one fused reduction is far cheaper than
    # np.isfinite on every element for the small arrays used here.
    if arr.size and not math.isfinite(float(arr.sum())):
        raise NumericError(f"non-finite values in tensor of shape {arr.shape}")
    return arr


class Tensor:
    """A dense array plus its position in the current tape."""

    __slots__ = ("data", "_parents", "_vjp", "_param")

    def __init__(self, data, dtype=None, _parents=(), _vjp=None, _param=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(FP64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = _checked(arr)
        self._parents = _parents
        self._vjp = _vjp
        self._param = _param

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter:
    """A named trainable array with a persistent gradient buffer."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str):
        value = np.asarray(value, dtype=FP64, order="C")
        if not value.flags.c_contiguous:
            value = np.ascontiguousarray(value)
        self.value = value
        self.grad = np.zeros_like(self.value)
        self.name = name

    def tensor(self) -> Tensor:
        """Fresh leaf node for the current tape, routing grads back here."""
        return Tensor(self.value, _param=self)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def _op(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    # hot path: kernel outputs are known-fp64 C-contiguous ndarrays, so skip
    # the general constructor and do only the finiteness check
    if data.ndim == 0:
        if not math.isfinite(float(data)):
            raise NumericError("non-finite scalar result")
    elif data.size and not math.isfinite(float(data.sum())):
        raise NumericError(f"non-finite values in tensor of shape {data.shape}")
    out = object.__new__(Tensor)
    out.data = data
    out._parents = parents
    out._vjp = vjp
    out._param = None
    return out


def custom(data, parents: tuple, vjp: Callable) -> Tensor:
    """Record one externally computed kernel on the tape.

    ``vjp(grad_out)`` must return one gradient (or None) per parent.
    """
    return _op(np.asarray(data, dtype=FP64), tuple(parents), vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    if exponent == 0.0:
        return _op(out, (a,), lambda g: (np.zeros_like(a.data),))
    return _op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for 1-D and 2-D operands."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError(f"matmul expects 1-D or 2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"inner extents differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad  # 1-D @ 1-D -> scalar

    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    return _op(out, (a, b), vjp)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           activation: str | None = None) -> Tensor:
    """Fused W^T x (+ b) (+ relu/sigmoid) as a single tape node."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"affine extents differ: {xd.shape} @ {wd.shape}")
    pre = xd @ wd
    if bias is not None:
        pre = pre + bias.data
    if activation is None:
        out, factor = pre, None
    elif activation == "relu":
        out = np.maximum(pre, 0.0)
        factor = (pre > 0.0).astype(FP64)
    elif activation == "sigmoid":
        out = np.empty_like(pre)
        pos = pre >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-pre[pos]))
        ex = np.exp(pre[~pos])
        out[~pos] = ex / (1.0 + ex)
        factor = out * (1.0 - out)
    else:
        raise ContractError(f"unknown activation {activation!r}")

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gpre = g if factor is None else g * factor
        if xd.ndim == 1:
            gx = wd @ gpre
            gw = np.outer(xd, gpre)
        else:
            gx = gpre @ wd.T
            gw = xd.T @ gpre
        if bias is None:
            return gx, gw
        gb = gpre if xd.ndim == 1 else gpre.sum(axis=0)
        return gx, gw, gb

    return _op(np.asarray(out), parents, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# shape manipulation


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _op(out, tuple(parts), vjp)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("stack of an empty list")
    try:
        out = np.stack([p.data for p in parts])
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        return tuple(g[i] for i in range(len(parts)))

    return _op(out, tuple(parts), vjp)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _op(np.array(out, dtype=a.dtype), (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _op(out, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    if a.data.size and a.data.min() <= 0.0:
        raise DomainError("log requires strictly positive input")
    out = np.log(a.data)
    return _op(out, (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def softmax(a: Tensor) -> Tensor:
    """Row-normalized exponentials along the last axis, overflow-safe."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _op(out, (a,), vjp)


def clip(a: Tensor, lo=None, hi=None, closed: bool = False) -> Tensor:
    """Clamp values; gradient passes only where the input is un-clamped.

    ``closed`` includes the boundary itself in the pass-through region,
    giving the one-sided derivative of the interior segment at a kink.
    """
    out = np.clip(a.data, lo, hi)
    if closed:
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
    else:
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data > lo
        if hi is not None:
            mask &= a.data < hi
    return _op(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _op(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty extent")
    return tsum(a, axis=axis) * (1.0 / n)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
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


def backward(loss: Tensor):
    """Accumulate d(loss)/d(value) into every Parameter on the tape."""
    if loss.shape != ():
        raise ContractError(f"backward root must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._param is not None:
            node._param.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    epsilon: float
    per_param: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def worst(self, n: int = 5) -> list:
        return sorted(self.per_param.items(), key=lambda kv: -kv[1])[:n]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                      epsilon: float = 1e-5) -> GradCheckReport:
    """Compare recorded gradients against central finite differences.

    ``loss_fn`` must be a deterministic closure over ``params`` returning a
    scalar Tensor.  Relative error uses max(|analytic|, |numeric|) + 1e-8
    as the denominator guard.
    """
    params = list(params)
    zero_grads(params)
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(epsilon=epsilon)
    for p in params:
        flat = p.value.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(loss_fn().data)
            flat[i] = orig - epsilon
            f_minus = float(loss_fn().data)
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * epsilon)
        ag = analytic[p.name].reshape(-1)
        rel = np.abs(ag - fd) / (np.maximum(np.abs(ag), np.abs(fd)) + 1e-8)
        report.per_param[p.name] = float(rel.max()) if rel.size else 0.0
    return report
