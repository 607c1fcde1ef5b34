"""Dense layer primitives with hand-written backward passes.

Every function here works on plain numpy arrays and keeps the dtype of its
inputs, so the same code path runs in float32 for training and float64 for
gradient checks. Activations are NCHW.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array dimensions do not fit an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in array of shape {np.shape(arr)}")
    return arr


@dataclass
class Param:
    """A named trainable tensor with its gradient buffer.

    ``lr_mult`` scales the learning rate for this tensor; zero freezes it.
    ``decay`` says whether weight decay applies. ``group`` is either
    ``"features"`` or ``"recon"`` and selects the base learning rate.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    lr_mult: float = 1.0
    decay: bool = True
    group: str = "features"

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def frozen(self):
        return self.lr_mult == 0

    def zero_grad(self):
        self.grad[...] = 0


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def he_init(shape, fan_in, seed=None, dtype=np.float32):
    """Zero-mean Gaussian with std sqrt(2 / fan_in)."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    out = _rng(seed).standard_normal(size=shape, dtype=np.float64 if dtype == np.float64 else np.float32)
    out *= out.dtype.type(std)
    return out.astype(dtype, copy=False)


# -- convolution ---------------------------------------------------------------

def _conv_out_size(size, k, pad, stride):
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x, w, pad, stride, bias=None):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]} (weight {w.shape})")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: non-square kernel {w.shape[2:]}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride {stride} / pad {pad}")
    k = w.shape[2]
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {x.shape[2:]} with pad {pad}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({w.shape[0]},)")


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x, k, pad, stride):
    # (N, C, Ho, Wo, k, k) view into the padded input
    win = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, b=None, pad=0, stride=1):
    """Cross-correlate ``x`` (N, I, H, W) with ``w`` (O, I, K, K)."""
    _check_conv(x, w, pad, stride, b)
    k = w.shape[2]
    if k == 1 and pad == 0 and stride == 1:
        out = np.einsum("oi,nihw->nohw", w[:, :, 0, 0], x, optimize=True)
    else:
        cols = _windows(x, k, pad, stride)
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return check_finite(np.ascontiguousarray(out), "conv2d")


def _conv_input_grad(g, w, in_shape, pad, stride):
    """Adjoint of conv2d with respect to its input (col2im scatter)."""
    n, _, h, wd = in_shape
    k = w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    if k == 1 and pad == 0 and stride == 1:
        return np.einsum("oi,nohw->nihw", w[:, :, 0, 0], g, optimize=True)
    # (N, Ho, Wo, I, K, K)
    dcols = np.tensordot(g, w, axes=([1], [0]))
    dxp = np.zeros((n, w.shape[1], h + 2 * pad, wd + 2 * pad), dtype=np.result_type(g, w))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(dxp)


def _conv_weight_grad(g, x, k, pad, stride):
    if k == 1 and pad == 0 and stride == 1:
        return np.einsum("nohw,nihw->oi", g, x, optimize=True)[:, :, None, None]
    cols = _windows(x, k, pad, stride)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_backward(g, x, w, pad=0, stride=1):
    """Return (dx, dw, db) for ``conv2d(x, w, b, pad, stride)`` given upstream ``g``."""
    ho = _conv_out_size(x.shape[2], w.shape[2], pad, stride)
    wo = _conv_out_size(x.shape[3], w.shape[2], pad, stride)
    if g.shape != (x.shape[0], w.shape[0], ho, wo):
        raise ShapeError(f"conv2d_backward: upstream {g.shape} != expected {(x.shape[0], w.shape[0], ho, wo)}")
    dx = _conv_input_grad(g, w, x.shape, pad, stride)
    dw = _conv_weight_grad(g, x, w.shape[2], pad, stride)
    db = g.sum(axis=(0, 2, 3))
    check_finite(dx, "conv2d_backward")
    check_finite(dw, "conv2d_backward")
    return dx, dw.astype(w.dtype, copy=False), db


def transposed_output_size(size, k, pad, stride):
    return (size - 1) * stride - 2 * pad + k


def transposed_conv2d(x, w, b=None, stride=1, pad=0):
    """Transposed convolution: ``x`` (N, I, H, W), ``w`` (I, O, K, K).

    This is exactly the input-adjoint of ``conv2d`` with the same weight,
    stride and padding.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"transposed_conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"transposed_conv2d: bias shape {b.shape} != ({w.shape[1]},)")
    k = w.shape[2]
    ho = transposed_output_size(x.shape[2], k, pad, stride)
    wo = transposed_output_size(x.shape[3], k, pad, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d: empty output for input {x.shape} k={k} pad={pad} stride={stride}")
    out = _conv_input_grad(x, w, (x.shape[0], w.shape[1], ho, wo), pad, stride)
    if b is not None:
        out = out + b[None, :, None, None]
    return check_finite(out, "transposed_conv2d")


def transposed_conv2d_backward(g, x, w, stride=1, pad=0):
    """Return (dx, dw, db) for ``transposed_conv2d(x, w, b, stride, pad)``."""
    dx = conv2d(g, w, None, pad=pad, stride=stride)
    # weight (I, O, K, K) plays the role of a conv weight with O_conv=I, I_conv=O
    dw = _conv_weight_grad(x, g, w.shape[2], pad, stride)
    db = g.sum(axis=(0, 2, 3))
    check_finite(dw, "transposed_conv2d_backward")
    return dx, dw.astype(w.dtype, copy=False), db


# -- pointwise ------------------------------------------------------------------

def prelu(x, slope):
    if slope.ndim != 1 or slope.shape[0] != x.shape[1]:
        raise ShapeError(f"prelu: {slope.shape[0] if slope.ndim == 1 else slope.shape} slopes for {x.shape[1]} channels")
    a = slope.reshape((1, -1) + (1,) * (x.ndim - 2))
    return check_finite(np.where(x >= 0, x, a * x), "prelu")


def prelu_backward(g, x, slope):
    a = slope.reshape((1, -1) + (1,) * (x.ndim - 2))
    neg = x < 0
    dx = np.where(neg, a * g, g)
    axes = (0,) + tuple(range(2, x.ndim))
    dslope = np.where(neg, g * x, 0).sum(axis=axes)
    return dx, dslope.astype(slope.dtype, copy=False)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(g, x):
    return np.where(x > 0, g, 0).astype(g.dtype, copy=False)


def fully_connected(x, w, b=None):
    """``x`` (N, D) times ``w`` (D, M) plus ``b`` (M)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {w.shape}")
    out = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"fully_connected: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b
    return check_finite(out, "fully_connected")


def fully_connected_backward(g, x, w):
    dx = g @ w.T
    dw = x.T @ g
    db = g.sum(axis=0)
    check_finite(dw, "fully_connected_backward")
    return dx, dw, db


# -- batch normalisation (SRResNet / original ablation units only) ------------

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    cache: tuple = field(default=None, repr=False)


def batchnorm(x, gamma, beta, state, training):
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    if training:
        state.cache = (xhat, inv_std)
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return check_finite(out.astype(x.dtype, copy=False), "batchnorm")


def batchnorm_backward(g, gamma, state):
    """Backward through training-mode batch normalisation."""
    xhat, inv_std = state.cache
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx.astype(g.dtype, copy=False), dgamma, dbeta
