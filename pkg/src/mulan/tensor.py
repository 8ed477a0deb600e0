"""Dense tensors with reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever gradients
are enabled and at least one input requires them.  ``tape.backward(loss)``
walks the recorded entries exactly once, in reverse order, accumulating
gradients into leaf tensors (parameters).  Repeated backward calls accumulate;
``zero_grad`` is explicit.

The tape also counts live entries.  Its high-water mark is the instrument
behind the memory-constancy claim of per-view gradient accumulation: a step
that releases each view's subgraph before the next one peaks at a view-count
independent number of live entries.

Everything runs on numpy.  float32 is the training precision; building a
model in float64 turns the same code into the gradient-check build.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatchError, NonFiniteError, ShapeError

__all__ = [
    "Tensor", "Tape", "no_grad", "set_finite_checks",
    "add", "sub", "mul", "scale", "relu", "matmul", "transpose", "sum_all",
    "mean_all", "conv2d", "batchnorm", "BatchNormState", "l2_normalize",
    "global_mean_pool", "stack_rows", "take_diag", "row_logsumexp",
    "custom_op",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# Module-level recording state.  The concurrency model serializes all tape
# writes on the training thread, so plain globals are correct here.
_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED: bool = True
_FINITE_CHECKS: bool = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard on op outputs (on by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _ensure_finite(arr: np.ndarray, op_name: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(
            f"{op_name} produced non-finite values",
            diagnostics={"op": op_name, "shape": tuple(arr.shape)},
        )


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float array, optionally tracked for differentiation.

    Tensors produced by ops are treated as immutable.  ``grad`` is populated
    only on leaves (tensors created with ``requires_grad=True`` that are not
    the output of a recorded op).
    """

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif (isinstance(data, (np.ndarray, np.floating))
              and np.asarray(data).dtype in _FLOAT_DTYPES):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self.requires_grad and not self._recorded

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable ops (a Wengert list).

    Entries appear in execution order, so every entry's inputs were produced
    earlier or are leaves.  ``live_entries`` counts entries currently held;
    ``high_water`` is the maximum ever reached before a ``clear``.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self.high_water = 0

    @property
    def live_entries(self) -> int:
        return len(self._nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def _record(self, node: _Node) -> None:
        self._nodes.append(node)
        if len(self._nodes) > self.high_water:
            self.high_water = len(self._nodes)

    def clear(self) -> None:
        """Release all recorded entries (activations); leaf grads persist."""
        for node in self._nodes:
            node.out._recorded = False
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Walks the recorded entries exactly once in reverse order.  Gradients
        of intermediate tensors live only for the duration of the walk, so a
        second call yields exactly the same increments again.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ShapeError("backward requires a scalar loss tensor")
        if not loss._recorded:
            raise ShapeError("loss is not on the tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if ig.dtype != t.data.dtype:
                    ig = ig.astype(t.data.dtype)
                if t._recorded:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else prev + ig
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += ig


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record_if_tracked(out: Tensor, inputs: Sequence[Tensor],
                       vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    if _GRAD_ENABLED and _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._recorded = True
        _TAPE_STACK[-1]._record(_Node(out, tuple(inputs), vjp))
    return out


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor],
              vjp: Callable[[np.ndarray], tuple], name: str = "custom") -> Tensor:
    """Wrap externally computed forward data as a recorded op.

    ``vjp(g)`` must return one gradient array (or None) per input, each
    matching that input's shape.
    """
    _ensure_finite(out_data, name)
    out = Tensor(out_data)
    return _record_if_tracked(out, [_as_tensor(t) for t in inputs], vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches the original shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _binary_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    try:
        np.broadcast_shapes(a.shape, b.shape)
        return True
    except ValueError:
        return False


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data + b.data
    _ensure_finite(out_data, "add")

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)

    return _record_if_tracked(Tensor(out_data), (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data - b.data
    _ensure_finite(out_data, "sub")

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.data.shape) if b.requires_grad else None)

    return _record_if_tracked(Tensor(out_data), (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data * b.data
    _ensure_finite(out_data, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record_if_tracked(Tensor(out_data), (a, b), vjp)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out_data = x.data * c
    _ensure_finite(out_data, "scale")

    def vjp(g):
        return (g * c,)

    return _record_if_tracked(Tensor(out_data), (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0)
    # subgradient at 0 is 0: mask uses a strict inequality
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _record_if_tracked(Tensor(out_data), (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    _ensure_finite(out_data, "matmul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record_if_tracked(Tensor(out_data), (a, b), vjp)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")
    out_data = x.data.T.copy()

    def vjp(g):
        return (g.T.copy(),)

    return _record_if_tracked(Tensor(out_data), (x,), vjp)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)
    _ensure_finite(out_data, "sum_all")
    shape = x.data.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record_if_tracked(Tensor(out_data), (x,), vjp)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    return scale(sum_all(x), 1.0 / x.data.size)


def stack_rows(tensors: Sequence) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack_rows needs at least one tensor")
    for t in ts:
        if t.ndim != 1 or t.shape != ts[0].shape:
            raise ShapeError("stack_rows expects equal-length 1-D tensors")
    out_data = np.stack([t.data for t in ts])

    def vjp(g):
        return tuple(g[i] if t.requires_grad else None for i, t in enumerate(ts))

    return _record_if_tracked(Tensor(out_data), ts, vjp)


def take_diag(x) -> Tensor:
    """Main diagonal of a matrix (length min(m, n))."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_diag expects a 2-D tensor, got {x.shape}")
    out_data = np.diagonal(x.data).copy()
    shape = x.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        idx = np.arange(min(shape))
        full[idx, idx] = g
        return (full,)

    return _record_if_tracked(Tensor(out_data), (x,), vjp)


def row_logsumexp(x) -> Tensor:
    """Stable log-sum-exp along the last axis of a matrix, one value per row."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"row_logsumexp expects a 2-D tensor, got {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out_data = (m + np.log(s))[:, 0]
    _ensure_finite(out_data, "row_logsumexp")
    softmax = e / s

    def vjp(g):
        return (g[:, None] * softmax,)

    return _record_if_tracked(Tensor(out_data), (x,), vjp)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Divide each row (last axis) by max(its L2 norm, eps)."""
    x = _as_tensor(x)
    if x.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize expects a vector or matrix, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norms, eps)
    out_data = x.data / denom
    _ensure_finite(out_data, "l2_normalize")
    active = (norms > eps).astype(x.data.dtype)

    def vjp(g):
        dot = (out_data * g).sum(axis=-1, keepdims=True)
        return ((g - out_data * dot * active) / denom,)

    return _record_if_tracked(Tensor(out_data), (x,), vjp)


# ---------------------------------------------------------------------------
# convolution / pooling / normalization
# ---------------------------------------------------------------------------

def conv2d(x, kernel, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of NCHW input with an FCkk kernel.

    Direct computation: windows of the padded input contracted against the
    kernel.  With padding 1 and a 3x3 kernel the output spatial size is
    floor((H-1)/stride)+1.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW and FCkk, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ck}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("nchwij,fcij->nfhw", windows, kernel.data, optimize=True)
    out_data = np.ascontiguousarray(out_data)
    _ensure_finite(out_data, "conv2d")
    ho, wo = out_data.shape[2], out_data.shape[3]
    kd = kernel.data

    def vjp(g):
        gk = gx = None
        if kernel.requires_grad:
            gk = np.einsum("nfhw,nchwij->fcij", g, windows, optimize=True)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(kh):
                rows = slice(di, di + stride * (ho - 1) + 1, stride)
                for dj in range(kw):
                    cols = slice(dj, dj + stride * (wo - 1) + 1, stride)
                    gxp[:, :, rows, cols] += np.einsum(
                        "nfhw,fc->nchw", g, kd[:, :, di, dj], optimize=True)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx)
        return (gx, gk)

    return _record_if_tracked(Tensor(out_data), (x, kernel), vjp)


def global_mean_pool(x) -> Tensor:
    """Spatial mean per channel: NCHW -> NC."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_mean_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w),)

    return _record_if_tracked(Tensor(out_data), (x,), vjp)


class BatchNormState:
    """Running statistics of one batchnorm layer (not differentiated)."""

    __slots__ = ("running_mean", "running_var", "momentum")

    def __init__(self, num_features: int, momentum: float = 0.1, dtype=np.float32):
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train",
              eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Batch normalization over (N,) rows of NxD input or (N,H,W) of NCHW.

    Train mode normalizes with batch statistics and, when ``update_stats`` is
    set, folds them into the running statistics with the state's momentum.
    Eval mode normalizes with the running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if mode not in ("train", "eval"):
        raise ShapeError(f"batchnorm: unknown mode {mode!r}")
    if x.ndim == 2:
        axes = (0,)
        stat_shape = (1, -1)
    elif x.ndim == 4:
        axes = (0, 2, 3)
        stat_shape = (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm expects NxD or NCHW input, got {x.shape}")
    num_features = x.shape[1]
    if gamma.shape != (num_features,) or beta.shape != (num_features,):
        raise ShapeError("batchnorm: gamma/beta must have one entry per feature")

    xd = x.data
    n_stat = xd.size // num_features
    if mode == "train":
        if n_stat < 2:
            raise DegenerateBatchError(
                "batchnorm in train mode needs at least 2 rows per feature")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            m = state.momentum
            unbiased = var * (n_stat / (n_stat - 1))
            state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(
                state.running_mean.dtype)
            state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(
                state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(stat_shape)) * inv.reshape(stat_shape)
    out_data = xhat * gamma.data.reshape(stat_shape) + beta.data.reshape(stat_shape)
    _ensure_finite(out_data, "batchnorm")
    gd = gamma.data

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd.reshape(stat_shape)
            if mode == "train":
                term = (n_stat * dxhat
                        - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
                gx = term * inv.reshape(stat_shape) / n_stat
            else:
                gx = dxhat * inv.reshape(stat_shape)
        return (gx, ggamma, gbeta)

    return _record_if_tracked(Tensor(out_data), (x, gamma, beta), vjp)
