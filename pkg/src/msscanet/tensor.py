"""Minimal float64 tensor with reverse-mode differentiation.

Only the operations the network needs are provided.  Every operation returns a
new :class:`Tensor`; when gradient recording is enabled and at least one input
requires a gradient, the output keeps references to its inputs together with a
closure computing the vector-Jacobian product.  The output tensor therefore
doubles as the tape node, and :func:`backward` walks the resulting DAG once in
reverse topological order.

Multiply-accumulate counts of the linear-algebra primitives (``matmul``,
``pointwise_conv`` and ``scale_channels``) can be collected with
:func:`count_macs`.
"""

from __future__ import annotations

import math
import threading
from collections import defaultdict
from contextlib import contextmanager
from functools import lru_cache

import numpy as np

from .exceptions import NumericError, ShapeError

MAX_RANK = 4

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``op`` and ``parents`` describe how the tensor was produced; leaves have
    ``op == "leaf"`` and no parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self._vjp = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- gradient management --------------------------------------------
    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only supported by a Python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    if data.ndim > MAX_RANK:
        raise ShapeError(f"rank {data.ndim} exceeds the supported maximum of {MAX_RANK}")
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# MAC instrumentation


class MacCounter:
    """Accumulates multiply-accumulate counts keyed by the active scope path."""

    def __init__(self):
        self.counts: dict[tuple[str, ...], int] = defaultdict(int)
        self._scopes: list[str] = []

    def add(self, n: int):
        self.counts[tuple(self._scopes) or ("other",)] += int(n)

    def component(self, name: str) -> int:
        """MACs recorded with ``name`` as the outermost scope."""
        return sum(v for k, v in self.counts.items() if k[0] == name)

    def path(self, *names: str) -> int:
        """MACs recorded under any scope path that starts with ``names``."""
        return sum(v for k, v in self.counts.items() if k[:len(names)] == names)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@contextmanager
def count_macs():
    """Collect MACs of every primitive executed in the block on this thread."""
    counter = MacCounter()
    prev = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextmanager
def mac_scope(name: str):
    """Attribute MACs recorded inside the block to ``name`` (nested scopes form a path)."""
    counter = getattr(_state, "counter", None)
    if counter is None:
        yield
        return
    counter._scopes.append(name)
    try:
        yield
    finally:
        counter._scopes.pop()


def _record_macs(n: int):
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter.add(n)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), vjp, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (np.sign(xd) * g,), "abs")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return _make(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # branch-free stable form: exp of a non-positive argument only
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    """Transpose the two trailing axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Select entries of the flattened ``x``; output has the shape of ``index``."""
    index = np.asarray(index, dtype=np.intp)
    size, src = x.size, x.shape
    out = x.data.reshape(-1)[index]

    def vjp(g):
        flat = np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=size)
        return (flat.reshape(src),)

    return _make(out, (x,), vjp, "gather")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), vjp, "concat")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum_(x: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    src = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), vjp, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes with batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    n, k = ad.shape[-2:]
    m = bd.shape[-1]
    if getattr(_state, "counter", None) is not None:
        _record_macs(math.prod(out.shape[:-2]) * n * k * m)

    def vjp(g):
        da = np.matmul(g, np.swapaxes(bd, -1, -2))
        db = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(da, ad.shape), _unbroadcast(db, bd.shape)

    return _make(out, (a, b), vjp, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs feature size {d}")
    xd = x.data
    mu = xd.sum(axis=-1, keepdims=True) / d
    xc = xd - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), vjp, "layer_norm")


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution of a ``[C_in, H, W]`` map with ``w[C_out, C_in]`` and bias ``b``."""
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"pointwise_conv: input {x.shape}, weight {w.shape}, bias {b.shape} do not conform")
    xd, wd = x.data, w.data
    c_in, h, wid = xd.shape
    flat = xd.reshape(c_in, h * wid)
    out = (wd @ flat + b.data[:, None]).reshape(w.shape[0], h, wid)
    _record_macs(w.shape[0] * c_in * h * wid)

    def vjp(g):
        gf = g.reshape(g.shape[0], -1)
        return (wd.T @ gf).reshape(xd.shape), gf @ flat.T, gf.sum(axis=1)

    return _make(out, (x, w, b), vjp, "pointwise_conv")


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each channel of ``x[C, H, W]`` by ``gate[C, 1, 1]``."""
    if x.ndim != 3 or gate.shape != (x.shape[0], 1, 1):
        raise ShapeError(f"scale_channels: map {x.shape} vs gate {gate.shape}")
    _record_macs(x.size)
    out = mul(x, gate)
    out.op = "scale_channels"
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean of a ``[C, H, W]`` map, returned as ``[C, 1, 1]``."""
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"global_avg_pool expects a non-empty [C,H,W] map, got {x.shape}")
    src = x.shape
    n = src[1] * src[2]
    out = x.data.mean(axis=(1, 2), keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / n, src).copy(),), "global_avg_pool")


def adaptive_bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Half-open input ranges ``[floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))``."""
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


@lru_cache(maxsize=64)
def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i, (lo, hi) in enumerate(adaptive_bins(n_in, n_out)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


def adaptive_avg_pool(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Average ``[C, H, W]`` over the floor/ceil bins producing ``[C, h, w]``."""
    if x.ndim != 3:
        raise ShapeError(f"adaptive_avg_pool expects [C,H,W], got {x.shape}")
    h, w = (int(v) for v in out_hw)
    _, H, W = x.shape
    if not (1 <= h <= H and 1 <= w <= W):
        raise ShapeError(f"adaptive_avg_pool target {(h, w)} must lie within 1..{(H, W)}; "
                         "upsampling is not supported")
    if (h, w) == (H, W):
        return _make(x.data.copy(), (x,), lambda g: (g,), "adaptive_avg_pool")
    ph, pw = _pool_matrix(H, h), _pool_matrix(W, w)
    out = ph @ x.data @ pw.T

    def vjp(g):
        return (ph.T @ g @ pw,)

    return _make(out, (x,), vjp, "adaptive_avg_pool")


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64, copy=True).reshape(node.shape)
            else:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f, inputs, eps: float = 1e-4) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f(*inputs)`` must return a scalar tensor.  For each coordinate the error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.  Gradients already
    stored on the inputs are cleared.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: function value is not finite")
    backward(out)
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            an = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"grad_check: non-finite evaluation at coordinate {i}")
                num = (fp - fm) / (2.0 * eps)
                err = abs(an[i] - num) / max(1.0, abs(an[i]), abs(num))
                worst = max(worst, err)
    return worst
