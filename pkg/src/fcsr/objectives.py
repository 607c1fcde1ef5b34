"""Training objectives: L2 and the edge-difference constraint, with analytic gradients.

Losses take batches shaped (N, C, H, W) or single 2-D planes (treated as a
batch of one). Sums run over pixels and are averaged over the batch.
"""
import math
from dataclasses import dataclass

import numpy as np

from .layers import ShapeError, check_finite


@dataclass(frozen=True)
class LossConfig:
    """Weights of the combined objective.

    ``eps`` stabilises the gradient magnitude square root and is expressed in
    the units of the arrays handed to the loss (squared intensity).
    """

    beta: float = 0.1
    p: int = 1
    sigma: float = 1.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.p != 1:
            raise ValueError("only the L1 edge difference (p=1) is supported")
        if self.sigma <= 0 or self.eps <= 0:
            raise ValueError("sigma and eps must be positive")


def _batch(a):
    a = np.asarray(a)
    if a.ndim == 2:
        return a[None, None]
    if a.ndim != 4:
        raise ShapeError(f"expected a 2-D plane or an (N, C, H, W) batch, got shape {a.shape}")
    return a


def _check_same(a, b, what):
    if a != b:
        raise ShapeError(f"{what}: shapes differ, {a} vs {b}")


def l2_loss(pred, target):
    """Batch mean of per-sample squared error sums; returns (loss, d loss / d pred)."""
    _check_same(np.shape(pred), np.shape(target), "l2_loss")
    n = _batch(pred).shape[0]
    diff = pred - target
    loss = float(np.sum(diff * diff)) / n
    grad = diff * diff.dtype.type(2.0 / n)
    return loss, grad


# -- edge operator ---------------------------------------------------------------

class EdgeOperator:
    """Separable Gaussian smoothing + derivative-of-Gaussian filters.

    ``smooth`` sums to one, ``deriv`` is antisymmetric and sums to zero.
    Both are applied as correlations with edge-replicated borders.
    """

    def __init__(self, sigma=1.0):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.radius = int(math.ceil(3 * sigma))
        t = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        g = np.exp(-t * t / (2 * sigma * sigma))
        self.smooth = g / g.sum()
        # response is positive where intensity increases along the axis
        self.deriv = t / (sigma * sigma) * self.smooth
        self.deriv[self.radius] = 0.0

    @property
    def support(self):
        return 2 * self.radius + 1

    def _filter(self, x, kernel, axis):
        r = self.radius
        pad = [(0, 0)] * x.ndim
        pad[axis] = (r, r)
        xp = np.pad(x, pad, mode="edge")
        n = x.shape[axis]
        out = np.zeros_like(x)
        for j, w in enumerate(kernel):
            if w:
                out += x.dtype.type(w) * np.take(xp, np.arange(j, j + n), axis=axis)
        return out

    def _filter_adjoint(self, g, kernel, axis):
        r = self.radius
        n = g.shape[axis]
        shape = list(g.shape)
        shape[axis] = n + 2 * r
        gp = np.zeros(shape, dtype=g.dtype)
        for j, w in enumerate(kernel):
            if w:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(j, j + n)
                gp[tuple(idx)] += g.dtype.type(w) * g
        # fold replicated-border contributions back onto the edge pixels
        lo = [slice(None)] * g.ndim
        hi = [slice(None)] * g.ndim
        lo[axis] = slice(0, r + 1)
        hi[axis] = slice(n + r - 1, n + 2 * r)
        first = gp[tuple(lo)].sum(axis=axis, keepdims=True)
        last = gp[tuple(hi)].sum(axis=axis, keepdims=True)
        core = [slice(None)] * g.ndim
        core[axis] = slice(r, n + r)
        out = gp[tuple(core)].copy()
        idx0 = [slice(None)] * g.ndim
        idx0[axis] = slice(0, 1)
        idx1 = [slice(None)] * g.ndim
        idx1[axis] = slice(n - 1, n)
        if n == 1:
            out[tuple(idx0)] = first + last - gp[tuple(core)]
        else:
            out[tuple(idx0)] = first
            out[tuple(idx1)] = last
        return out

    def responses(self, x):
        """Return (H, V): H smooths down columns and differentiates along rows; V the reverse."""
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float64)
        if x.shape[-1] < self.support or x.shape[-2] < self.support:
            raise ShapeError(f"image {x.shape[-2:]} is smaller than the {self.support}-tap edge kernel")
        v = self._filter(self._filter(x, self.smooth, -1), self.deriv, -2)
        h = self._filter(self._filter(x, self.smooth, -2), self.deriv, -1)
        return h, v

    def responses_adjoint(self, dh, dv):
        dx = self._filter_adjoint(self._filter_adjoint(dv, self.deriv, -2), self.smooth, -1)
        dx += self._filter_adjoint(self._filter_adjoint(dh, self.deriv, -1), self.smooth, -2)
        return dx


def edge_extract(img, op=None, eps=1e-6):
    """Edge/texture magnitude sqrt(H^2 + V^2 + eps), same shape as ``img``."""
    op = op or EdgeOperator()
    h, v = op.responses(img)
    return np.sqrt(h * h + v * v + eps)


def _edge_difference(x_h, x, op, eps):
    h1, v1 = op.responses(x_h)
    e1 = np.sqrt(h1 * h1 + v1 * v1 + eps)
    h2, v2 = op.responses(x)
    e2 = np.sqrt(h2 * h2 + v2 * v2 + eps)
    d = e1 - e2
    n = _batch(x_h).shape[0]
    value = float(np.abs(d).sum()) / n
    s = np.sign(d) / n
    grad = op.responses_adjoint(s * h1 / e1, s * v1 / e1)
    return value, grad.astype(np.asarray(x_h).dtype, copy=False)


def edge_difference(x_h, x, config=None):
    """L1 distance between edge maps; returns (value, d value / d x_h)."""
    config = config or LossConfig()
    _check_same(np.shape(x_h), np.shape(x), "edge_difference")
    return _edge_difference(x_h, x, EdgeOperator(config.sigma), config.eps)


def combined_loss(f_out, x_b, x, config=None):
    """Residual-learning objective evaluated at ``x_h = f_out + x_b``.

    Returns (loss, d loss / d f_out). With ``beta == 0`` this is exactly
    ``l2_loss(f_out + x_b, x)``.
    """
    config = config or LossConfig()
    _check_same(np.shape(f_out), np.shape(x_b), "combined_loss")
    _check_same(np.shape(f_out), np.shape(x), "combined_loss")
    x_h = f_out + x_b
    loss, grad = l2_loss(x_h, x)
    if config.beta:
        ed, ged = edge_difference(x_h, x, config)
        loss = loss + config.beta * ed
        grad = grad + grad.dtype.type(config.beta) * ged
    if not math.isfinite(loss):
        raise FloatingPointError(f"combined_loss is not finite ({loss})")
    return loss, check_finite(grad, "combined_loss")
