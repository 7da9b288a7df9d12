"""Dense arrays with tape-free reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`.  When gradient recording is
enabled and any input requires a gradient, the output keeps a reference to
its inputs and a closure mapping the output gradient to input gradients.
:func:`backward` orders that graph topologically and walks it once.

Layout is NCHW for feature maps.  Precision follows the module default
(``float64`` unless changed with :func:`default_dtype`).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ConfigurationError, NonFiniteError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

PADDING_MODES = ("zero", "reflect", "symmetric", "circular")


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are cast to."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "fiub":
            arr = arr.astype(_DEFAULT_DTYPE, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

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

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params=params)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Wrap constants in the dtype of the tensor operand, so a float32 graph
    stays float32 when multiplied by a Python or float64 constant."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype if a.dtype.kind == "f" else None)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype if b.dtype.kind == "f" else None), b
    return as_tensor(a), as_tensor(b)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------
class Graph:
    """Topologically ordered nodes reachable from an output tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves in ``params`` that the loss does not depend on receive zeros.
    Gradients of intermediate tensors are released after use.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of df/dx, one coordinate at a time."""
    base = np.array(x.data, dtype=np.float64, copy=True)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            x.data = base.astype(x.dtype, copy=True)
            fp = _scalar(f(x))
            flat[i] = orig - h
            x.data = base.astype(x.dtype, copy=True)
            fm = _scalar(f(x))
            flat[i] = orig
            out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    x.data = base.astype(x.dtype, copy=True)
    return out


def _scalar(v) -> float:
    val = float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)
    if not math.isfinite(val):
        raise NonFiniteError("finite-difference probe produced a non-finite value")
    return val


def gradient_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> tuple[float, bool]:
    """Worst mixed error and pass flag.

    Elements whose analytic magnitude is below ``floor`` are compared
    absolutely against ``floor``; the rest relatively against 1e-4.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    diff = np.abs(a - n)
    small = np.abs(a) < floor
    rel = np.where(small, 0.0, diff / np.maximum(np.abs(a), 1e-300))
    ok = bool(np.all(diff[small] <= floor)) and bool(np.all(rel <= 1e-4))
    worst = float(rel.max(initial=0.0))
    if small.any():
        worst = max(worst, float(diff[small].max()))
    return worst, ok


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _result(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb
    return _result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)
    return _result(out, (a,), bw, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):   # overflow is reported as NonFiniteError
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(a) -> Tensor:
    """log(1 + e^x) in overflow-free form."""
    a = as_tensor(a)
    z = a.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    return _result(out, (a,), lambda g: (g * _sigmoid_np(z),), "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    # in-place passes: these arrays are the largest activations in the encoder
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        d = x * x
        d *= 3 * 0.044715
        d += 1.0
        d *= _GELU_C
        d *= 1.0 - t * t
        d *= x
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)
    return _result(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)
    return _result(np.array(out, copy=True), (a,), bw, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
                     for i, t in enumerate(ts))
    return _result(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) if t.requires_grad else None for i, t in enumerate(ts))
    return _result(out, ts, bw, "stack")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D and shared over the batch."""
    a, b = _operands(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _result(out, (a, b), bw, "matmul")


def softmax_stable(a, axis: int = -1) -> Tensor:
    """Softmax with the max subtracted first."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return _result(s, (a,), bw, "softmax")


def layer_norm(a, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [a]
    w = b = None
    if weight is not None:
        w = as_tensor(weight)
        out = out * w.data
        parents.append(w)
    if bias is not None:
        b = as_tensor(bias)
        out = out + b.data
        parents.append(b)

    def bw(g):
        res = []
        gx = g * w.data if w is not None else g
        if a.requires_grad:
            n = x.shape[-1]
            dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            res.append(dx)
        else:
            res.append(None)
        if w is not None:
            res.append(_unbroadcast(g * xhat, w.shape) if w.requires_grad else None)
        if b is not None:
            res.append(_unbroadcast(g, b.shape) if b.requires_grad else None)
        return tuple(res)
    return _result(out, parents, bw, "layer_norm")


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------
_NP_PAD = {"zero": "constant", "reflect": "reflect", "symmetric": "symmetric", "circular": "wrap"}


def _source_index(i: int, n: int, mode: str) -> int | None:
    if 0 <= i < n:
        return i
    if mode == "zero":
        return None
    if mode == "circular":
        return i % n
    if mode == "reflect":
        period = 2 * (n - 1)
        i = i % period
        return i if i < n else period - i
    # symmetric
    period = 2 * n
    i = i % period
    return i if i < n else period - 1 - i


def _fold_axis(g: np.ndarray, axis: int, before: int, after: int, n: int, mode: str) -> np.ndarray:
    """Adjoint of padding along one axis."""
    core = np.take(g, np.arange(before, before + n), axis=axis).copy()
    if mode == "zero":
        return core
    for padded in list(range(before)) + list(range(before + n, before + n + after)):
        src = _source_index(padded - before, n, mode)
        sl_dst = [slice(None)] * g.ndim
        sl_dst[axis] = src
        sl_src = [slice(None)] * g.ndim
        sl_src[axis] = padded
        core[tuple(sl_dst)] += g[tuple(sl_src)]
    return core


def pad2d(a, pad, mode: str = "zero") -> Tensor:
    """Pad the last two axes; ``pad`` is an int or (top, bottom, left, right)."""
    a = as_tensor(a)
    if mode not in PADDING_MODES:
        raise ConfigurationError(f"unknown padding mode {mode!r}")
    top, bottom, left, right = (pad,) * 4 if isinstance(pad, int) else pad
    H, W = a.shape[-2:]
    if mode == "reflect" and (max(top, bottom) >= H or max(left, right) >= W):
        raise DimensionError("reflect padding wider than the image")
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(a.data, widths, mode=_NP_PAD[mode])

    def bw(g):
        g = _fold_axis(g, a.ndim - 2, top, bottom, H, mode)
        return (_fold_axis(g, a.ndim - 1, left, right, W, mode),)
    return _result(out, (a,), bw, "pad2d")


def _im2col(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    N, C = xp.shape[:2]
    cols = np.empty((N, C, k * k, H, W), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i:i + H, j:j + W]
    return cols


def conv2d(x, kernel, bias=None, groups: int = 1, padding: str = "zero") -> Tensor:
    """Stride-1 'same' cross-correlation of an NCHW input.

    ``kernel`` has shape (C_out, C_in / groups, k, k) with odd k.  ``groups``
    equal to C_in gives a depthwise convolution.
    """
    x, w = as_tensor(x), as_tensor(kernel)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O, Cg, k, k2 = w.shape
    if groups < 1 or C % groups or O % groups:
        raise ConfigurationError(f"groups={groups} must divide channels in={C} out={O}")
    if Cg * groups != C:
        raise DimensionError(f"kernel expects {Cg * groups} input channels, input has {C}")
    if k != k2 or k % 2 == 0:
        raise DimensionError("conv2d needs a square odd kernel")
    if padding not in PADDING_MODES:
        raise ConfigurationError(f"unknown padding mode {padding!r}")
    if b is not None and b.shape != (O,):
        raise DimensionError(f"bias shape {b.shape} != ({O},)")
    p = k // 2
    if p and padding == "reflect" and (H <= p or W <= p):
        raise DimensionError("image smaller than kernel for reflect padding")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode=_NP_PAD[padding]) if p else x.data
    if groups == 1:
        return _conv2d_dense(x, w, b, xp, p, padding)
    G, Og = groups, O // groups
    cols = _im2col(xp, k, H, W).reshape(N, G, Cg * k * k, H * W)
    wm = w.data.reshape(G, Og, Cg * k * k)
    out = np.matmul(wm, cols).reshape(N, O, H, W)
    if b is not None:
        out = out + b.data.reshape(1, O, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gr = g.reshape(N, G, Og, H * W)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(gr, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 2, 1), gr).reshape(N, C, k * k, H, W)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + H, j:j + W] += gcols[:, :, i * k + j]
            if p:
                gxp = _fold_axis(gxp, 2, p, p, H, padding)
                gxp = _fold_axis(gxp, 3, p, p, W, padding)
            gx = gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)
    return _result(out, parents, bw, "conv2d")


def _conv2d_dense(x: Tensor, w: Tensor, b, xp: np.ndarray, p: int, padding: str) -> Tensor:
    """Ungrouped convolution as a sum of k*k channels-last products.

    Each tap multiplies a shifted (N, H, W, C) view by a (C, O) slice of the
    kernel, so no patch matrix is materialized.
    """
    N, C, H, W = x.shape
    O, _, k, _ = w.shape
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(k * k, C, O)
    out = np.zeros((N, H, W, O), dtype=np.result_type(xp.dtype, w.dtype))
    for i in range(k):
        for j in range(k):
            out += xt[:, i:i + H, j:j + W] @ taps[i * k + j]
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = gt.reshape(N * H * W, O)
        gx = gw = gb = None
        if w.requires_grad:
            gtaps = np.empty((k * k, C, O), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gtaps[i * k + j] = xt[:, i:i + H, j:j + W].reshape(N * H * W, C).T @ g2
            gw = np.ascontiguousarray(gtaps.reshape(k, k, C, O).transpose(3, 2, 0, 1))
        if x.requires_grad:
            gxt = np.zeros(xt.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxt[:, i:i + H, j:j + W] += gt @ taps[i * k + j].T
            gxp = gxt.transpose(0, 3, 1, 2)
            if p:
                gxp = _fold_axis(gxp, 2, p, p, H, padding)
                gxp = _fold_axis(gxp, 3, p, p, W, padding)
            gx = np.ascontiguousarray(gxp)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)
    return _result(out, parents, bw, "conv2d")

def conv_transpose2x2(x, kernel, bias=None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel (exact 2x upsampling).

    ``kernel`` has shape (C_in, C_out, 2, 2); each input pixel writes a
    disjoint 2x2 output block.
    """
    x, w = as_tensor(x), as_tensor(kernel)
    b = as_tensor(bias) if bias is not None else None
    N, C, H, W = x.shape
    if w.shape[0] != C or w.shape[2:] != (2, 2):
        raise DimensionError(f"kernel {w.shape} incompatible with input {x.shape}")
    O = w.shape[1]
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wm = w.data.reshape(C, O * 4)
    y = (xm @ wm).reshape(N, H, W, O, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(N, O, 2 * H, 2 * W)
    if b is not None:
        out = out + b.data.reshape(1, O, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gy = g.reshape(N, O, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, O * 4)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gy @ wm.T).reshape(N, H, W, C).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (xm.T @ gy).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)
    return _result(out, parents, bw, "conv_transpose2x2")


def max_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"max_pool2x2 needs even spatial size, got {H}x{W}")
    blocks = x.data.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        return (gb,)
    return _result(out, (x,), bw, "max_pool2x2")


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)
    return _result(out, (x,), bw, "upsample_nearest2x")


def global_avg_pool(x) -> Tensor:
    """Mean over the two spatial axes: (N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def bilinear_sample(x, coords) -> Tensor:
    """Sample an NCHW map at real (y, x) positions.

    ``coords`` has shape (N, *S, 2); the result has shape (N, C, *S).  Each
    value blends the four surrounding pixels; pixels outside the image
    count as zero.  Differentiable in both the image and the coordinates.
    """
    x, c = as_tensor(x), as_tensor(coords)
    if x.ndim != 4 or c.shape[0] != x.shape[0] or c.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: image {x.shape}, coords {c.shape}")
    N, C, H, W = x.shape
    S = c.shape[1:-1]
    P = int(np.prod(S)) if S else 1
    cy = c.data[..., 0].reshape(N, P)
    cx = c.data[..., 1].reshape(N, P)
    y0 = np.floor(cy)
    x0 = np.floor(cx)
    wy = cy - y0
    wx = cx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    flat = x.data.reshape(N, C, H * W)

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            idx = np.where(valid, yy * W + xx, 0)
            vals = np.take_along_axis(flat, np.broadcast_to(idx[:, None, :], (N, C, P)), axis=2)
            vals = vals * valid[:, None, :]
            corners.append((idx, valid, vals))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    out = (w00[:, None] * v00 + w01[:, None] * v01 + w10[:, None] * v10 + w11[:, None] * v11)

    def bw(g):
        g = g.reshape(N, C, P)
        gx = gc = None
        if x.requires_grad:
            base = (np.arange(N)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
            acc = np.zeros(N * C * H * W, dtype=np.float64)
            for (idx, valid, _), wgt in zip(corners, (w00, w01, w10, w11)):
                contrib = g * (wgt * valid)[:, None, :]
                acc += np.bincount((base + idx[:, None, :]).reshape(-1), weights=contrib.reshape(-1),
                                   minlength=acc.size)
            gx = acc.reshape(x.shape).astype(x.dtype, copy=False)
        if c.requires_grad:
            dy = ((1 - wx)[:, None] * (v10 - v00) + wx[:, None] * (v11 - v01))
            dxv = ((1 - wy)[:, None] * (v01 - v00) + wy[:, None] * (v11 - v10))
            gy_ = (g * dy).sum(axis=1)
            gx_ = (g * dxv).sum(axis=1)
            gc = np.stack([gy_, gx_], axis=-1).reshape(c.shape)
        return gx, gc
    return _result(out.reshape((N, C) + tuple(S)), (x, c), bw, "bilinear_sample")


# ---------------------------------------------------------------------------
# debug IO
# ---------------------------------------------------------------------------
def dump_tensor(t, path) -> None:
    """Write ``shape: d0 d1 ...`` then row-major values."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    with open(path, "w") as fh:
        fh.write("shape: " + " ".join(str(d) for d in arr.shape) + "\n")
        fh.write(" ".join(repr(float(v)) for v in arr.reshape(-1)) + "\n")


def load_tensor_dump(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("shape:"):
            raise ContractError(f"{path}: missing shape header")
        shape = tuple(int(d) for d in header[len("shape:"):].split())
        values = np.array([float(v) for v in fh.read().split()], dtype=np.float64)
    return values.reshape(shape)
