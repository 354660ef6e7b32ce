"""Dense float64 tensors with tape-based reverse-mode differentiation.

Just enough machinery to train a small convolutional detector: elementwise
arithmetic with numpy broadcasting, reductions, a few activations, strided
convolution, max pooling and batch normalization. Differentiable operations
executed while a :class:`GradTape` is active append a backward closure to the
tape; :func:`backward` replays the tape in reverse, accumulating gradients
into ``Tensor.grad`` buffers.

All compute is float64. No tape is active by default, so plain evaluation
builds no graph. Operations whose inputs are all constants (``needs_grad``
false) are not recorded, so gradients never flow into targets or masks.

Gradient buffers are accumulated with an adoption discipline to avoid
copies: a backward closure may hand a tensor either a freshly allocated
array (``_acc_new``) or a view aliasing its own dead output gradient
(``_acc_view``); in both cases the receiving tensor takes ownership. A
closure passing the same buffer to two tensors must copy the second.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_tapes = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_tapes, "stack", None)
    if stack is None:
        stack = []
        _tapes.stack = stack
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of executed operations for one reverse sweep.

    Use as a context manager around the forward computation; each tape is
    owned by a single thread. Replaying in reverse visits every recorded
    operation exactly once.
    """

    def __init__(self) -> None:
        self.records: list[Callable[[], None]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "needs_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc_new(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a freshly allocated gradient; the tensor adopts it."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _acc_view(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient that may alias the closure's own dead out-grad."""
    if t.grad is None:
        t.grad = g if g.flags.writeable else np.ascontiguousarray(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _begin(*inputs: Tensor):
    """(tape, needs) for an op over ``inputs``; record only when both hold."""
    tape = _active_tape()
    if tape is None:
        return None, False
    return tape, any(t.needs_grad for t in inputs)


def _finish(tape: "GradTape | None", needs: bool, out: Tensor, bw: Callable[[], None]) -> Tensor:
    if tape is not None and needs:
        out.needs_grad = True
        tape.records.append(bw)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape, needs = _begin(a, b)
    out = Tensor(a.data + b.data)

    def _bw():
        g = out.grad
        if g is None:
            return
        if a.needs_grad:
            _acc_view(a, _unbroadcast(g, a.data.shape))
        if b.needs_grad:
            gb = _unbroadcast(g, b.data.shape)
            _acc_view(b, gb.copy() if a.needs_grad and gb is a.grad else gb)

    return _finish(tape, needs, out, _bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape, needs = _begin(a, b)
    out = Tensor(a.data - b.data)

    def _bw():
        g = out.grad
        if g is None:
            return
        if a.needs_grad:
            _acc_view(a, _unbroadcast(g, a.data.shape))
        if b.needs_grad:
            _acc_new(b, _unbroadcast(-g, b.data.shape))

    return _finish(tape, needs, out, _bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape, needs = _begin(a, b)
    out = Tensor(a.data * b.data)

    def _bw():
        g = out.grad
        if g is None:
            return
        if a.needs_grad:
            _acc_new(a, _unbroadcast(g * b.data, a.data.shape))
        if b.needs_grad:
            _acc_new(b, _unbroadcast(g * a.data, b.data.shape))

    return _finish(tape, needs, out, _bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape, needs = _begin(a, b)
    out = Tensor(a.data / b.data)

    def _bw():
        g = out.grad
        if g is None:
            return
        if a.needs_grad:
            _acc_new(a, _unbroadcast(g / b.data, a.data.shape))
        if b.needs_grad:
            _acc_new(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _finish(tape, needs, out, _bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    tape, needs = _begin(a)
    out = Tensor(-a.data)

    def _bw():
        if out.grad is not None:
            _acc_new(a, -out.grad)

    return _finish(tape, needs, out, _bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    tape, needs = _begin(x)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def _bw():
        g = out.grad
        if g is None:
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        _acc_view(x, np.broadcast_to(g, x.data.shape))

    return _finish(tape, needs, out, _bw)


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    tape, needs = _begin(x)
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def _bw():
        g = out.grad
        if g is None:
            return
        g = g / count  # scale while still small
        if not keepdims:
            g = np.expand_dims(g, axes)
        _acc_view(x, np.broadcast_to(g, x.data.shape))

    return _finish(tape, needs, out, _bw)


# ---------------------------------------------------------------------------
# nonlinearities and pointwise functions
# ---------------------------------------------------------------------------


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    v = x.data
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)
    tape, needs = _begin(x)
    out = Tensor(s)

    def _bw():
        if out.grad is not None:
            _acc_new(x, out.grad * (s * (1.0 - s)))

    return _finish(tape, needs, out, _bw)


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    """max(x, slope * x); requires 0 <= slope < 1."""
    x = _as_tensor(x)
    d = x.data
    tape, needs = _begin(x)
    out = Tensor(np.maximum(d, slope * d))

    def _bw():
        if out.grad is not None:
            _acc_new(x, out.grad * np.where(d > 0, 1.0, slope))

    return _finish(tape, needs, out, _bw)


def sqrt(x) -> Tensor:
    """Elementwise square root; the subgradient at 0 is defined as 0."""
    x = _as_tensor(x)
    s = np.sqrt(x.data)
    tape, needs = _begin(x)
    out = Tensor(s)

    def _bw():
        if out.grad is None:
            return
        safe = np.where(x.data > 0, s, 1.0)
        _acc_new(x, out.grad * np.where(x.data > 0, 0.5 / safe, 0.0))

    return _finish(tape, needs, out, _bw)


def absolute(x) -> Tensor:
    """Elementwise |x| with sign(0) = 0 as the subgradient."""
    x = _as_tensor(x)
    tape, needs = _begin(x)
    out = Tensor(np.abs(x.data))

    def _bw():
        if out.grad is not None:
            _acc_new(x, out.grad * np.sign(x.data))

    return _finish(tape, needs, out, _bw)


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); gradient passes through where x >= floor."""
    x = _as_tensor(x)
    tape, needs = _begin(x)
    out = Tensor(np.maximum(x.data, floor))

    def _bw():
        if out.grad is not None:
            _acc_new(x, out.grad * (x.data >= floor))

    return _finish(tape, needs, out, _bw)


def log(x) -> Tensor:
    x = _as_tensor(x)
    tape, needs = _begin(x)
    out = Tensor(np.log(x.data))

    def _bw():
        if out.grad is not None:
            _acc_new(x, out.grad / x.data)

    return _finish(tape, needs, out, _bw)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    tape, needs = _begin(x)
    out = Tensor(e)

    def _bw():
        if out.grad is not None:
            _acc_new(x, out.grad * e)

    return _finish(tape, needs, out, _bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    tape, needs = _begin(x)
    out = Tensor(x.data.reshape(shape))

    def _bw():
        if out.grad is not None:
            _acc_view(x, out.grad.reshape(x.data.shape))

    return _finish(tape, needs, out, _bw)


def flatten(x) -> Tensor:
    return reshape(x, (-1,))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    tape, needs = _begin(x)
    out = Tensor(x.data.transpose(axes))

    def _bw():
        if out.grad is not None:
            _acc_view(x, out.grad.transpose(inverse))

    return _finish(tape, needs, out, _bw)


def getitem(x, idx) -> Tensor:
    """Basic (slice/integer) indexing; gradient scatters back into place."""
    x = _as_tensor(x)
    tape, needs = _begin(x)
    out = Tensor(np.ascontiguousarray(x.data[idx]))

    def _bw():
        if out.grad is None:
            return
        g = np.zeros_like(x.data)
        g[idx] = out.grad
        _acc_new(x, g)

    return _finish(tape, needs, out, _bw)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an OIHW kernel.

    Output spatial size is floor((H + 2*padding - kH)/stride) + 1 (same for
    width). Forward and backward are matrix products against an im2col patch
    matrix; the input gradient is skipped entirely for constant inputs.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    n, c_in, h, w = x.data.shape
    c_out, c_k, kh, kw = kernel.data.shape
    if c_in != c_k:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.data.shape} has {c_in} channels, "
            f"kernel shape {kernel.data.shape} expects {c_k}"
        )
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding or h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d kernel {kernel.data.shape} does not fit input {x.data.shape} "
            f"with padding {padding}"
        )

    if padding:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # (N, C_in, H', W', kH, kW)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c_in * kh * kw, h_out * w_out
    )
    kmat = kernel.data.reshape(c_out, c_in * kh * kw)
    tape, needs = _begin(x, kernel)
    out = Tensor(np.matmul(kmat, cols).reshape(n, c_out, h_out, w_out))

    def _bw():
        if out.grad is None:
            return
        go = out.grad.reshape(n, c_out, h_out * w_out)
        if kernel.needs_grad:
            gk = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
            _acc_new(kernel, gk.reshape(kernel.data.shape))
        if x.needs_grad:
            gcols = np.matmul(kmat.T, go).reshape(n, c_in, kh, kw, h_out, w_out)
            gp = np.zeros_like(padded) if padding else np.zeros((n, c_in, h, w))
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i : i + h_out * stride : stride, j : j + w_out * stride : stride] += (
                        gcols[:, :, i, j]
                    )
            if padding:
                gp = gp[:, :, padding : padding + h, padding : padding + w]
            _acc_view(x, gp)

    return _finish(tape, needs, out, _bw)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties share the gradient equally."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d size {size} does not divide spatial dims of {x.data.shape}")
    slabs = [x.data[:, :, i::size, j::size] for i in range(size) for j in range(size)]
    pooled = slabs[0].copy()
    for s in slabs[1:]:
        np.maximum(pooled, s, out=pooled)
    tape, needs = _begin(x)
    out = Tensor(pooled)

    def _bw():
        if out.grad is None:
            return
        masks = [s == pooled for s in slabs]
        counts = masks[0].astype(np.float64)
        for m in masks[1:]:
            counts += m
        share = out.grad / counts
        gx = np.zeros((n, c, h, w))
        for m, (i, j) in zip(masks, ((i, j) for i in range(size) for j in range(size))):
            gx[:, :, i::size, j::size] += share * m
        _acc_view(x, gx)

    return _finish(tape, needs, out, _bw)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormLayer:
    """Per-channel affine normalization state.

    ``gamma``/``beta`` are trainable; running statistics are plain arrays
    updated by exponential moving average during training-mode forwards and
    consumed in eval mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def validate(self) -> None:
        c = self.channels
        if not (
            self.beta.data.shape == (c,)
            and self.running_mean.shape == (c,)
            and self.running_var.shape == (c,)
        ):
            raise ShapeError(f"batchnorm parameter vectors disagree on channel count {c}")
        if self.epsilon <= 0:
            raise ValueError(f"batchnorm epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ValueError("batchnorm running variance must be nonnegative")


def make_batchnorm(channels: int, gamma_init: float = 1.0, epsilon: float = 1e-5) -> BatchNormLayer:
    return BatchNormLayer(
        gamma=Tensor(np.full(channels, gamma_init), requires_grad=True),
        beta=Tensor(np.zeros(channels), requires_grad=True),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        epsilon=epsilon,
    )


def batchnorm_forward(x, layer: BatchNormLayer, training: bool) -> Tensor:
    """Normalize per channel, then scale by gamma and shift by beta.

    Training mode normalizes with biased batch statistics over (N, H, W) and
    updates the running statistics as a side effect; eval mode normalizes
    with the stored running statistics. Backward uses the fused closed form
    so the batch statistics' dependence on x is fully differentiated.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if c != layer.channels:
        raise ShapeError(
            f"batchnorm channel mismatch: input has {c} channels, layer has {layer.channels}"
        )
    gamma, beta = layer.gamma, layer.beta
    gcol = gamma.data.reshape(1, c, 1, 1)
    bcol = beta.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + layer.epsilon)
        xhat = xc * inv
        layer.running_mean *= 1.0 - layer.momentum
        layer.running_mean += layer.momentum * mu.reshape(c)
        layer.running_var *= 1.0 - layer.momentum
        layer.running_var += layer.momentum * var.reshape(c)
    else:
        inv = 1.0 / np.sqrt(layer.running_var.reshape(1, c, 1, 1) + layer.epsilon)
        xhat = (x.data - layer.running_mean.reshape(1, c, 1, 1)) * inv

    tape, needs = _begin(x, gamma, beta)
    out = Tensor(gcol * xhat + bcol)

    def _bw():
        g = out.grad
        if g is None:
            return
        if beta.needs_grad:
            _acc_new(beta, g.sum(axis=(0, 2, 3)))
        if gamma.needs_grad:
            _acc_new(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.needs_grad:
            return
        if training:
            m = n * h * w
            gsum = g.sum(axis=(0, 2, 3), keepdims=True)
            gxsum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            _acc_new(x, (gcol * inv) * (g - gsum / m - xhat * (gxsum / m)))
        else:
            _acc_new(x, g * (gcol * inv))

    return _finish(tape, needs, out, _bw)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate gradients of everything on the tape that fed the scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape.records):
        fn()
