"""Reverse-mode autodiff tensor engine on dense numpy buffers.

The engine records operations onto an explicit :class:`Tape`. Recording is
active only inside a ``with Tape() as tape:`` block; outside of one, all
operations run as plain numpy math. Nodes are appended in execution order,
so the tape is topologically sorted by construction and ``backward`` is a
single reverse sweep.

Values are float32 by default; pass ``dtype=np.float64`` at tensor creation
for the high-precision build used by gradient-check tests. Every operation
validates that its output is finite (toggle with :func:`set_finite_checks`).
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    NonFiniteError,
    ShapeError,
    StateError,
)

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = True
_TAPE_STACK: list["Tape"] = []


def set_finite_checks(enabled: bool) -> None:
    """Globally enable/disable post-op finiteness validation."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tape:
    """Ordered record of differentiable operations.

    Single-owner: one training thread builds and consumes a tape; it must
    not be shared. Usable as a context manager that activates recording.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - usage bug guard
            raise StateError("tape stack corrupted: exited a non-innermost tape")


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out, parents, grad_fn):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Tensor:
    """Dense array with optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _pair(a, b):
    """Coerce mixed (Tensor, scalar) operands without dtype promotion."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _tracked(t: Tensor, tape) -> bool:
    return t.requires_grad or t._tape is tape


def _make(out_data, parents, grad_fn) -> Tensor:
    """Build an op result, recording a node when a tape is listening."""
    out_data = np.asarray(out_data)
    if _FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(_tracked(p, tape) for p in parents):
        out._tape = tape
        tape.nodes.append(_Node(out, parents, grad_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``loss`` must be a scalar recorded on ``tape`` (defaults to the tensor's
    own tape). Gradients accumulate additively over multiple uses.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None:
        raise ContractError("loss is not recorded on any tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.out.grad is None:
            continue
        grads = node.grad_fn(node.out.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None and _tracked(parent, tape):
                _accumulate(parent, g)
        if node.out is not loss:
            node.out.grad = None


# ---------------------------------------------------------------------
# elementwise and broadcast arithmetic
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    """Elementwise power with a constant float exponent."""
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = a.data ** exponent

    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (a,), grad_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make(out, (a,), grad_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def grad_fn(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), grad_fn)


# ---------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; supports 2-d operands and stacked 3-d batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn)


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, -1, -2).copy()

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(out, (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape).copy()

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), grad_fn)


def concat_last_axis(parts) -> Tensor:
    """Concatenate tensors along the trailing feature axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last_axis needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last_axis leading extents disagree: {parts[0].shape} vs {p.shape}"
            )
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def grad_fn(g):
        grads, start = [], 0
        for w in widths:
            grads.append(g[..., start:start + w])
            start += w
        return tuple(grads)

    return _make(out, tuple(parts), grad_fn)


def diagonal_2d(a) -> Tensor:
    """Main diagonal of a square matrix."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diagonal_2d needs a square matrix, got {a.shape}")
    out = np.diagonal(a.data).copy()

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.fill_diagonal(full, g)
        return (full,)

    return _make(out, (a,), grad_fn)


# ---------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def sum_axis(a, axis, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def mean_axis(a, axis, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    extent = a.shape[axis]
    return mul(sum_axis(a, axis, keepdims), 1.0 / extent)


def mean_pool_tokens(a) -> Tensor:
    """Arithmetic mean over the token axis (second-to-last)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"mean_pool_tokens needs >=2-d input, got {a.shape}")
    return mean_axis(a, axis=-2)


# ---------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------

def softmax_rows(x) -> Tensor:
    """Row-stable softmax over the trailing axis."""
    x = as_tensor(x)
    row_max = Tensor(x.data.max(axis=-1, keepdims=True))  # constant shift
    e = exp(sub(x, row_max))
    return mul(e, power(sum_axis(e, axis=-1, keepdims=True), -1.0))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize each trailing-axis row (population variance), then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm affine extent {gain.shape}/{bias.shape} != feature extent {x.shape[-1]}"
        )
    mu = mean_axis(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean_axis(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = power(add(var, float(eps)), -0.5)
    return add(mul(mul(centered, inv_std), gain), bias)


class BatchNormState:
    """Affine parameters plus running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches_seen = 0
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm_1d(x, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel standardization of a [batch, channels, tokens] tensor.

    Train mode normalizes with current batch statistics (population
    variance over batch x tokens) and updates running stats with momentum
    0.1; eval mode uses the accumulated running statistics.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"batch_norm_1d expects [batch, channels, tokens], got {x.shape}")
    if x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm_1d channel extent {x.shape[1]} != {state.channels}")
    gamma = reshape(state.gamma, (1, -1, 1))
    beta = reshape(state.beta, (1, -1, 1))
    if train:
        mu = mean_axis_multi(x, axes=(0, 2))
        centered = sub(x, mu)
        var = mean_axis_multi(mul(centered, centered), axes=(0, 2))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean
                              + m * mu.data.reshape(-1)).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var
                             + m * var.data.reshape(-1)).astype(state.running_var.dtype)
        state.batches_seen += 1
        inv_std = power(add(var, float(state.eps)), -0.5)
        return add(mul(mul(centered, inv_std), gamma), beta)
    if state.batches_seen == 0:
        raise StateError("batch_norm_1d eval mode requires accumulated running statistics")
    mean_c = Tensor(state.running_mean.reshape(1, -1, 1))
    scale_c = Tensor(1.0 / np.sqrt(state.running_var.reshape(1, -1, 1) + state.eps))
    return add(mul(mul(sub(x, mean_c), scale_c), gamma), beta)


def mean_axis_multi(a, axes) -> Tensor:
    """Mean over several axes at once, keeping dims (for broadcasting back)."""
    a = as_tensor(a)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = sum_axis(a, axis=axes, keepdims=True)
    return mul(out, 1.0 / n)


def conv1d_tokens(x, kernels, bias=None, padding: int | None = None) -> Tensor:
    """Cross-correlation along the token axis.

    ``x`` is [channels_in, tokens] or [batch, channels_in, tokens];
    ``kernels`` is [channels_out, channels_in, k] with odd k, and padding
    (k-1)/2 keeps the token extent unchanged.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d_tokens got x {x.shape}, kernels {kernels.shape}")
    batch, c_in, tokens = x.shape
    c_out, k_in, k = kernels.shape
    if tokens < 1:
        raise ShapeError("conv1d_tokens requires at least one token")
    if k_in != c_in:
        raise ShapeError(f"kernel input channels {k_in} != input channels {c_in}")
    if k % 2 == 0:
        raise ConfigError(f"conv1d_tokens kernel width must be odd, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ConfigError(f"conv1d_tokens padding must be (k-1)/2 = {(k - 1) // 2}, got {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    # [batch, c_in, tokens, k] sliding windows, then fold channels*k together
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    cols = windows.transpose(0, 2, 1, 3).reshape(batch, tokens, c_in * k)
    w_mat = kernels.data.reshape(c_out, c_in * k)
    out = np.einsum("btm,cm->bct", cols, w_mat, optimize=True).astype(x.dtype)

    def grad_fn(g):
        # g: [batch, c_out, tokens]
        gw = np.einsum("bct,btm->cm", g, cols, optimize=True).reshape(kernels.shape)
        gcols = np.einsum("bct,cm->btm", g, w_mat, optimize=True)
        gxp = np.zeros_like(xp)
        gc = gcols.reshape(batch, tokens, c_in, k).transpose(0, 2, 3, 1)
        for offset in range(k):
            gxp[:, :, offset:offset + tokens] += gc[:, :, offset]
        gx = gxp[:, :, padding:padding + tokens] if padding else gxp
        return gx, gw

    result = _make(out, (x, kernels), grad_fn)
    if bias is not None:
        result = add(result, reshape(as_tensor(bias), (1, -1, 1)))
    if squeeze:
        result = reshape(result, result.shape[1:])
    return result


def dropout(x, rate: float, rng=None, train: bool = True) -> Tensor:
    """Inverted-scaling dropout; identity in eval mode or at rate 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an explicit random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / keep
    return mul(x, Tensor(mask))
