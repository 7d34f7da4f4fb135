"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at least one
input requires a gradient. Outside a tape every op is a plain numpy evaluation, which is
how inference runs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every entry routes through a registered op
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class TapeError(RuntimeError):
    pass


_active_tapes: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)[x]
    array([6.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def record(self, node: _Node):
        if self._used:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(node)

    def backward(self, output: Tensor) -> "Gradients":
        if self._used:
            raise TapeError("backward() may run only once per tape")
        if output.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                leaves[key] = t
        self.nodes = []
        result = Gradients()
        for key, t in leaves.items():
            if key in grads:
                result._store[key] = (t, grads[key])
        return result


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self):
        self._store: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        entry = self._store.get(id(t))
        if entry is None:
            return np.zeros_like(t.data)
        return entry[1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store

    def __len__(self):
        return len(self._store)


def backward(output: Tensor, tape: Tape | None = None) -> Gradients:
    """Run the reverse pass of ``tape`` (default: the innermost active tape)."""
    if tape is None:
        if not _active_tapes:
            raise TapeError("no active tape; pass one explicitly")
        tape = _active_tapes[-1]
    return tape.backward(output)


def _make(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _active_tapes:
        _active_tapes[-1].record(_Node(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b, eps: float | None = None) -> Tensor:
    """``a / b``; zero denominators raise unless ``eps`` is given (then ``a / (b + eps)``)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    denom = b.data if eps is None else b.data + eps
    if np.any(denom == 0):
        raise ZeroDivisionError("division by zero without an epsilon guard")
    out = a.data / denom

    def vjp(g):
        ga = _unbroadcast(g / denom, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / denom, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), vjp)


def relu_hinge(a) -> Tensor:
    """``max(0, a)``; the gradient at exactly zero is zero."""
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ValueError("transpose needs at least 2 dims")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, vjp)


def index_select(a, index) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back."""
    a = as_tensor(a)

    basic = _is_basic(index)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), vjp)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def split(a, sections, axis: int = 0) -> list[Tensor]:
    """Split into equal ``sections`` (int) or at the given indices."""
    a = as_tensor(a)
    axis = axis % a.ndim
    size = a.shape[axis]
    if isinstance(sections, int):
        if size % sections:
            raise ValueError(f"split: axis of size {size} not divisible by {sections}")
        edges = list(range(0, size + 1, size // sections))
    else:
        edges = [0, *sections, size]
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(lo, hi)
        out.append(index_select(a, tuple(idx)))
    return out


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (a,), lambda g: (np.array(_expand(g, a.shape, axes, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make(out, (a,), lambda g: (np.array(_expand(g, a.shape, axes, keepdims)) / count,))


def _extreme(a, axis, keepdims, pick):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    kept = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a.data, kept + list(axes))
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(*lead, -1)
    # argmin/argmax return the first extremal index, which fixes tie routing
    idx = pick(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = vals
    if keepdims:
        out = vals.reshape([1 if ax in axes else a.shape[ax] for ax in range(a.ndim)])

    def vjp(g):
        g = np.asarray(g).reshape(lead)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(kept + list(axes))),)

    return _make(np.asarray(out), (a,), vjp)


def min_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.argmin)


def max_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.argmax)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)
    return _make(out, (a,), lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


# ---------------------------------------------------------------- fused ops


def fold(windows, stride: int, length: int) -> Tensor:
    """Accumulate rows of ``windows`` (``[N, L]``) at offsets ``n * stride`` into ``[length]``."""
    windows = as_tensor(windows)
    n, win = windows.shape
    if (n - 1) * stride + win > length:
        raise ValueError("fold: windows overrun the output length")
    idx = (np.arange(n)[:, None] * stride + np.arange(win)[None, :])
    out = np.bincount(idx.ravel(), weights=windows.data.ravel(), minlength=length)
    return _make(out, (windows,), lambda g: (g[idx],))


def minmax_attention(q, k, v, scale_by: float = 1.0, chunk: int = 64):
    """``minmax_rows(scale_by * q @ k^T) @ v`` without storing the score tensor.

    Each score row is affinely rescaled to [0, 1] over the key axis; rows whose min
    equals their max map to zeros. Returns ``(output, n_degenerate_rows)``.
    Inputs are ``[..., rows, d]`` with matching leading dims.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch {q.shape}, {k.shape}, {v.shape}")
    lead = q.shape[:-2]
    qd = q.data.reshape(-1, *q.shape[-2:])
    kd = k.data.reshape(-1, *k.shape[-2:])
    vd = v.data.reshape(-1, *v.shape[-2:])
    batch, rows = qd.shape[:2]
    lo_idx = np.empty((batch, rows), dtype=np.intp)
    hi_idx = np.empty((batch, rows), dtype=np.intp)
    for start in range(0, batch, chunk):
        sl = slice(start, start + chunk)
        s = np.matmul(qd[sl], np.swapaxes(kd[sl], -1, -2))
        lo_idx[sl] = np.argmin(s, axis=-1)
        hi_idx[sl] = np.argmax(s, axis=-1)
    b_ix = np.arange(batch)[:, None]
    k_lo = kd[b_ix, lo_idx]
    k_hi = kd[b_ix, hi_idx]
    mn = scale_by * (qd * k_lo).sum(axis=-1)
    mx = scale_by * (qd * k_hi).sum(axis=-1)
    rng = mx - mn
    live = rng > 0
    inv = np.where(live, 1.0 / np.where(live, rng, 1.0), 0.0)
    ktv = np.matmul(np.swapaxes(kd, -1, -2), vd)  # [b, d, dv]
    vsum = vd.sum(axis=-2)  # [b, dv]
    num = scale_by * np.matmul(qd, ktv) - mn[..., None] * vsum[:, None, :]
    out = num * inv[..., None]
    n_degenerate = int((~live).sum())

    def vjp(g):
        g = g.reshape(out.shape)
        gr = g * inv[..., None]  # G_i / r_i, zero on degenerate rows
        go = (g * out).sum(axis=-1)
        gv_sum = np.matmul(g, vsum[:, :, None])[..., 0]
        g_mn = (go - gv_sum) * inv
        g_mx = -go * inv
        gq = gk = gv = None
        if q.requires_grad:
            gq = scale_by * (np.matmul(gr, np.swapaxes(ktv, -1, -2))
                             + g_mn[..., None] * k_lo + g_mx[..., None] * k_hi)
            gq = gq.reshape(q.shape)
        if k.requires_grad:
            m_qg = np.matmul(np.swapaxes(qd, -1, -2), gr)  # [b, d, dv]
            gk = scale_by * np.matmul(vd, np.swapaxes(m_qg, -1, -2))
            np.add.at(gk, (b_ix, lo_idx), scale_by * g_mn[..., None] * qd)
            np.add.at(gk, (b_ix, hi_idx), scale_by * g_mx[..., None] * qd)
            gk = gk.reshape(k.shape)
        if v.requires_grad:
            m_qg = np.matmul(np.swapaxes(qd, -1, -2), gr)
            coef = (mn * inv)[..., None] * g  # mn_i / r_i * G_i
            gv = scale_by * np.matmul(kd, m_qg) - coef.sum(axis=-2)[:, None, :]
            gv = gv.reshape(v.shape)
        return gq, gk, gv

    result = _make(out.reshape(*lead, rows, vd.shape[-1]), (q, k, v), vjp)
    return result, n_degenerate


# ---------------------------------------------------------------- dispatch

OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "split": split,
    "sum": sum_,
    "mean": mean,
    "min_reduce": min_reduce,
    "max_reduce": max_reduce,
    "square": square,
    "sqrt": sqrt,
    "abs": abs_,
    "gelu": gelu,
    "cumsum": cumsum,
    "relu_hinge": relu_hinge,
    "scale": scale,
    "broadcast": broadcast,
    "reshape": reshape,
    "index": index_select,
    "fold": fold,
}


def apply(op_kind: str, *inputs, **attrs):
    """Dispatch ``op_kind`` by name, e.g. ``apply("mul", a, b)``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)
