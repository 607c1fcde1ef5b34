"""SGD with momentum, RMSProp and element-wise gradient clipping."""
import numpy as np


class Optimizer:
    kind = None

    def __init__(self, weight_decay=1e-4):
        self.weight_decay = weight_decay
        self.slots = {}

    def _slot(self, p):
        if p.name not in self.slots:
            if self.slots and getattr(self, "_sealed", False):
                raise KeyError(f"optimizer state has no slot for parameter {p.name!r}")
            self.slots[p.name] = np.zeros_like(p.value)
        slot = self.slots[p.name]
        if slot.shape != p.value.shape:
            raise ValueError(f"slot for {p.name!r} has shape {slot.shape}, parameter has {p.value.shape}")
        return slot

    def seal(self):
        """Refuse to create new slots; used after restoring saved state."""
        self._sealed = True
        return self

    def step(self, params, lr):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        for p in params:
            if p.lr_mult == 0:
                continue
            self._update(p, lr * p.lr_mult)

    def _update(self, p, lr):
        raise NotImplementedError


class SGDMomentum(Optimizer):
    """``m <- momentum * m + grad + wd * value``; ``value <- value - lr * m``."""

    kind = "sgd-momentum"

    def __init__(self, momentum=0.9, weight_decay=1e-4):
        super().__init__(weight_decay)
        self.momentum = momentum

    def _update(self, p, lr):
        m = self._slot(p)
        m *= m.dtype.type(self.momentum)
        m += p.grad
        if p.decay and self.weight_decay:
            m += m.dtype.type(self.weight_decay) * p.value
        p.value -= p.value.dtype.type(lr) * m


class RMSProp(Optimizer):
    """Squared-gradient accumulator with ``eps`` inside the square root.

    Weight decay is decoupled: it is added to the normalised step rather
    than folded into the gradient.
    """

    kind = "rmsprop"

    def __init__(self, decay=0.9, eps=1.0, weight_decay=1e-4):
        if eps <= 0:
            raise ValueError("RMSProp eps must be positive")
        super().__init__(weight_decay)
        self.decay = decay
        self.eps = eps

    def _update(self, p, lr):
        s = self._slot(p)
        t = s.dtype.type
        s *= t(self.decay)
        s += t(1 - self.decay) * p.grad * p.grad
        upd = p.grad / np.sqrt(s + t(self.eps))
        if p.decay and self.weight_decay:
            upd = upd + t(self.weight_decay) * p.value
        p.value -= t(lr) * upd


def make_optimizer(kind, **kw):
    if kind == "sgd-momentum":
        return SGDMomentum(**kw)
    if kind == "rmsprop":
        return RMSProp(**kw)
    raise ValueError(f"unknown optimizer {kind!r}")


def clip_gradients(params, limit):
    """Clamp every gradient element into [-limit, limit] in place."""
    if not limit > 0:
        raise ValueError(f"clip limit must be positive, got {limit}")
    for p in params:
        np.clip(p.grad, -limit, limit, out=p.grad)
    return params
