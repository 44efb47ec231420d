"""Dense tensors with reverse-mode gradients.

A deliberately small numeric core: every op the encoders, aggregator and
losses need, each with a hand-written backward rule. Graphs are recorded
per forward call and walked once in ``Tensor.backward``; nothing is shared
between threads.
"""

from __future__ import annotations

import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = np.float64


class NumericalError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def set_default_dtype(dtype) -> None:
    """Switch new tensors to float32 (opt-in) or back to float64."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    # make numpy defer to our reflected operators (ndarray - Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(_check_finite(data, op))
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def parameter(data, name: str) -> Tensor:
    """Leaf tensor that records its gradient after ``backward``."""
    t = Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)
    return t


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw, "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (0.5 * g / y,), "sqrt")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = as_tensor(x)
    y = -np.logaddexp(0.0, -x.data)
    s = _sigmoid_np(-x.data)
    return _make(y, (x,), lambda g: (g * s,), "log_sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def getitem(x, idx) -> Tensor:
    """Basic and integer-array indexing; backward scatters with ``np.add.at``."""
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(x.data[idx]), (x,), bw, "getitem")


def take_rows(x, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, index, gm)
        return (out,)

    return _make(np.take(x.data, index, axis=axis), (x,), bw, "take_rows")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -- composite kernels with fused backward -----------------------------------

def softmax_masked(x, mask=None) -> Tensor:
    """Softmax over the last axis; positions with ``mask == False`` get exactly 0.

    ``mask`` is broadcast against ``x`` (a length-L vector or any compatible
    boolean array). A row with no unmasked entry is an error.
    """
    x = as_tensor(x)
    if mask is None:
        logits = x.data
    else:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(mask, x.shape[:-1] + (mask.shape[-1],)).any(axis=-1)):
            raise ValueError("softmax_masked: fully-masked row")
        # additive bias built at the mask's (small) shape; exp(-inf) is exactly 0
        logits = x.data + np.where(mask, 0.0, -np.inf)
    y = logits - logits.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax_masked")


def normalize(x, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw, "normalize")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return add(mul(normalize(x, eps), gamma), beta)


def unfold1d(x, k: int) -> Tensor:
    """Sliding windows along axis 1 of a channels-last [N, W, C] tensor.

    Returns [N, W-k+1, k*C] with out[n, t, j*C + c] = x[n, t+j, c].
    """
    x = as_tensor(x)
    n, w, c = x.shape
    wo = w - k + 1
    if wo < 1:
        raise ValueError("unfold1d: kernel wider than input")
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=1)  # N, wo, C, k
    out = np.ascontiguousarray(np.swapaxes(win, 2, 3)).reshape(n, wo, k * c)

    def bw(g):
        g4 = g.reshape(n, wo, k, c)
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx[:, j:j + wo, :] += g4[:, :, j, :]
        return (gx,)

    return _make(out, (x,), bw, "unfold1d")


def conv1d(x, weight, bias, k: int) -> Tensor:
    """Valid 1-D convolution on channels-last input; weight is [k*C_in, C_out]."""
    return add(matmul(unfold1d(x, k), weight), bias)


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(f, x, step: float = 1e-6, tol: float | None = None) -> GradCheckReport:
    """Compare the backward pass of scalar ``f`` at ``x`` to central differences.

    The error is max|analytic - numeric| scaled by the larger of the two
    gradients' max-norms, so near-zero components do not dominate.
    ``x`` may be an array or a list of parameter tensors (all perturbed).
    """
    leaves = [x] if isinstance(x, Tensor) else (
        list(x) if isinstance(x, (list, tuple)) else [Tensor(x, requires_grad=True)])
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    out = f(leaves[0] if len(leaves) == 1 else leaves)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar function")
    out.backward()
    analytic = np.concatenate([
        (t.grad if t.grad is not None else np.zeros_like(t.data)).ravel() for t in leaves])
    numeric = np.empty_like(analytic)
    pos = 0
    with no_grad():
        for t in leaves:
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(leaves[0] if len(leaves) == 1 else leaves).item()
                flat[i] = orig - step
                fm = f(leaves[0] if len(leaves) == 1 else leaves).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericalError("grad_check: non-finite evaluation")
                numeric[pos] = (fp - fm) / (2 * step)
                pos += 1
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    err = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
    report = GradCheckReport(err, analytic, numeric)
    if tol is not None and not report.passed(tol):
        raise AssertionError(f"grad_check failed: rel error {err:.3e} >= {tol}")
    return report


# -- deterministic randomness ------------------------------------------------

@dataclass(frozen=True)
class RngState:
    """Seeded Philox stream; ``child(name)`` derives independent named substreams."""

    seed: int
    path: tuple = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, name: str) -> "RngState":
        return RngState(self.seed, self.path + (zlib.crc32(name.encode()),))
