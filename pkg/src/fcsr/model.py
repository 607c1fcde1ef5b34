"""Residual feature extractor in LR space with a fully connected upsampling head."""
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

import numpy as np

from . import layers as L
from .layers import Param, ShapeError

HEADS = ("fully-connected", "transposed-conv")
VARIANTS = ("ours", "edsr", "srresnet", "original")


def as_scale(value):
    """Coerce ints, floats and strings like ``"2.5"`` or ``"5/2"`` to a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1000)
    return Fraction(str(value))


@dataclass(frozen=True)
class ModelConfig:
    scale: Fraction = Fraction(3)
    lr_patch: int = 32
    num_blocks: int = 5
    ident_dim: int = 128
    bottleneck_dim: int = 64
    final_dim: int = 8
    units_per_block: int = 3
    head: str = "fully-connected"
    unit_variant: str = "ours"

    def __post_init__(self):
        object.__setattr__(self, "scale", as_scale(self.scale))
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.unit_variant not in VARIANTS:
            raise ValueError(f"unit_variant must be one of {VARIANTS}, got {self.unit_variant!r}")
        for name in ("lr_patch", "num_blocks", "ident_dim", "bottleneck_dim", "final_dim", "units_per_block"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.scale <= 1:
            raise ValueError(f"scale must exceed 1, got {self.scale}")
        if (self.scale * self.lr_patch).denominator != 1:
            raise ValueError(f"scale {self.scale} x lr_patch {self.lr_patch} is not an integer")
        if self.head == "transposed-conv" and self.scale.denominator != 1:
            raise ValueError("transposed-conv head needs an integer scale")

    @property
    def hr_patch(self):
        return int(self.scale * self.lr_patch)

    def to_dict(self):
        d = asdict(self)
        d["scale"] = str(self.scale)
        return d


def tconv_geometry(scale):
    """Kernel and padding so a stride-``scale`` transposed conv upsamples exactly by ``scale``."""
    s = int(scale)
    pad = s // 2
    return s + 2 * pad, pad


# -- layer wrappers --------------------------------------------------------------
# Each keeps what backward needs from the last training-mode forward.

class Conv:
    def __init__(self, name, cin, cout, k, rng, dtype, group="features"):
        self.pad = k // 2
        self.weight = Param(f"{name}.weight", L.he_init((cout, cin, k, k), cin * k * k, rng, dtype), group=group)
        self.bias = Param(f"{name}.bias", np.zeros(cout, dtype), decay=False, group=group)

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train):
        if train:
            self._x = x
        return L.conv2d(x, self.weight.value, self.bias.value, pad=self.pad)

    def backward(self, g):
        dx, dw, db = L.conv2d_backward(g, self._x, self.weight.value, pad=self.pad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class PReLU:
    def __init__(self, name, channels, dtype):
        self.slope = Param(f"{name}.slope", np.full(channels, 0.25, dtype), decay=False)

    def params(self):
        return [self.slope]

    def forward(self, x, train):
        if train:
            self._x = x
        return L.prelu(x, self.slope.value)

    def backward(self, g):
        dx, ds = L.prelu_backward(g, self._x, self.slope.value)
        self.slope.grad += ds
        return dx


class ReLU:
    def params(self):
        return []

    def forward(self, x, train):
        if train:
            self._x = x
        return L.relu(x)

    def backward(self, g):
        return L.relu_backward(g, self._x)


class BatchNorm:
    def __init__(self, name, channels, dtype):
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype), decay=False)
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype), decay=False)
        self.state = L.BatchNormState(np.zeros(channels, dtype), np.ones(channels, dtype))

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.state.running_mean,
                f"{self.name}.running_var": self.state.running_var}

    def forward(self, x, train):
        return L.batchnorm(x, self.gamma.value, self.beta.value, self.state, train)

    def backward(self, g):
        dx, dgamma, dbeta = L.batchnorm_backward(g, self.gamma.value, self.state)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class FullyConnected:
    def __init__(self, name, d_in, d_out, rng, dtype):
        self.weight = Param(f"{name}.weight", L.he_init((d_in, d_out), d_in, rng, dtype), group="recon")
        self.bias = Param(f"{name}.bias", np.zeros(d_out, dtype), decay=False, group="recon")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train):
        if train:
            self._x = x
        return L.fully_connected(x, self.weight.value, self.bias.value)

    def backward(self, g):
        dx, dw, db = L.fully_connected_backward(g, self._x, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class TransposedConv:
    def __init__(self, name, cin, cout, scale, rng, dtype):
        self.k, self.pad = tconv_geometry(scale)
        self.stride = int(scale)
        self.weight = Param(f"{name}.weight", L.he_init((cin, cout, self.k, self.k), cin * self.k * self.k, rng, dtype),
                            group="recon")
        self.bias = Param(f"{name}.bias", np.zeros(cout, dtype), decay=False, group="recon")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train):
        if train:
            self._x = x
        return L.transposed_conv2d(x, self.weight.value, self.bias.value, stride=self.stride, pad=self.pad)

    def backward(self, g):
        dx, dw, db = L.transposed_conv2d_backward(g, self._x, self.weight.value, stride=self.stride, pad=self.pad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Sequential:
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


# -- residual units ----------------------------------------------------------------

class ResidualUnit:
    """``out = skip(x) + branch(x)``; ``post`` is an optional after-addition activation."""

    def __init__(self, branch, channels, post=None):
        self.branch = branch
        self.channels = channels
        self.post = post

    def params(self):
        return self.branch.params()

    def buffers(self):
        out = {}
        for layer in self.branch.layers:
            if isinstance(layer, BatchNorm):
                out.update(layer.buffers())
        return out

    def forward(self, x, train):
        out = x + self.branch.forward(x, train)
        if self.post is not None:
            out = self.post.forward(out, train)
        return out

    def backward(self, g):
        if self.post is not None:
            g = self.post.backward(g)
        return g + self.branch.backward(g)


def make_unit(prefix, variant, ident, bneck, rng, dtype):
    if variant == "ours":
        branch = Sequential(
            PReLU(f"{prefix}.act1", ident, dtype), Conv(f"{prefix}.conv1", ident, bneck, 1, rng, dtype),
            PReLU(f"{prefix}.act2", bneck, dtype), Conv(f"{prefix}.conv2", bneck, bneck, 3, rng, dtype),
            PReLU(f"{prefix}.act3", bneck, dtype), Conv(f"{prefix}.conv3", bneck, ident, 1, rng, dtype),
        )
        return ResidualUnit(branch, ident)
    if variant == "edsr":
        branch = Sequential(Conv(f"{prefix}.conv1", ident, ident, 3, rng, dtype), ReLU(),
                            Conv(f"{prefix}.conv2", ident, ident, 3, rng, dtype))
        return ResidualUnit(branch, ident)
    if variant in ("srresnet", "original"):
        branch = Sequential(
            Conv(f"{prefix}.conv1", ident, ident, 3, rng, dtype), BatchNorm(f"{prefix}.bn1", ident, dtype), ReLU(),
            Conv(f"{prefix}.conv2", ident, ident, 3, rng, dtype), BatchNorm(f"{prefix}.bn2", ident, dtype),
        )
        return ResidualUnit(branch, ident, ReLU() if variant == "original" else None)
    raise ValueError(f"unknown unit variant {variant!r}")


def residual_unit_apply(x, unit, train=False):
    if x.ndim != 4 or x.shape[1] != unit.channels:
        raise ShapeError(f"residual unit expects (N, {unit.channels}, H, W), got {x.shape}")
    return unit.forward(x, train)


class ResidualBlock:
    """Units followed by a plain 3x3 tail conv; the block skip spans both.

    The last block's tail conv shrinks to ``final_dim`` channels and has no
    skip, since the dimensions differ.
    """

    def __init__(self, prefix, cfg, last, rng, dtype):
        self.units = [make_unit(f"{prefix}.unit{u}", cfg.unit_variant, cfg.ident_dim, cfg.bottleneck_dim, rng, dtype)
                      for u in range(cfg.units_per_block)]
        self.last = last
        self.tail = Conv(f"{prefix}.tail", cfg.ident_dim, cfg.final_dim if last else cfg.ident_dim, 3, rng, dtype)

    def params(self):
        return [p for u in self.units for p in u.params()] + self.tail.params()

    def buffers(self):
        out = {}
        for u in self.units:
            out.update(u.buffers())
        return out

    def forward(self, x, train):
        h = x
        for unit in self.units:
            h = unit.forward(h, train)
        t = self.tail.forward(h, train)
        return t if self.last else x + t

    def backward(self, g):
        dh = self.tail.backward(g)
        for unit in reversed(self.units):
            dh = unit.backward(dh)
        return dh if self.last else g + dh


class SRModel:
    """Network of residual blocks in LR space plus a reconstruction head.

    ``forward(y, x_b)`` returns ``F(y) + x_b``: the head predicts a residual
    over the bicubic base. Inputs are expected in [0, 1] and are shifted by
    ``input_center`` before the first conv, which keeps the huge common-mode
    component out of the features and speeds up the fully connected head.
    """

    input_center = 0.5

    def __init__(self, config, seed=None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config
        self.head_conv = Conv("head", 1, c.ident_dim, 3, rng, dtype)
        self.blocks = [ResidualBlock(f"block{b}", c, b == c.num_blocks - 1, rng, dtype) for b in range(c.num_blocks)]
        self.recon = self._make_recon(rng)
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise RuntimeError("duplicate parameter names")

    def _make_recon(self, rng):
        c = self.config
        if c.head == "fully-connected":
            return FullyConnected("recon", c.final_dim * c.lr_patch ** 2, c.hr_patch ** 2, rng, self.dtype)
        return TransposedConv("recon", c.final_dim, 1, c.scale, rng, self.dtype)

    # parameters -------------------------------------------------------------------

    def feature_parameters(self):
        return self.head_conv.params() + [p for b in self.blocks for p in b.params()]

    def parameters(self):
        return self.feature_parameters() + self.recon.params()

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def buffers(self):
        out = {}
        for b in self.blocks:
            out.update(b.buffers())
        return out

    def parameter_count(self):
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def zero_parameters(self):
        for p in self.parameters():
            p.value[...] = 0
        return self

    # forward / backward -------------------------------------------------------------

    def _check_inputs(self, y, x_b=None):
        c = self.config
        if y.ndim != 4 or y.shape[1] != 1:
            raise ShapeError(f"expected LR batch (N, 1, H, W), got {y.shape}")
        if c.head == "fully-connected" and y.shape[2:] != (c.lr_patch, c.lr_patch):
            raise ShapeError(f"fully connected head takes {c.lr_patch}x{c.lr_patch} LR patches, got "
                             f"{y.shape[2]}x{y.shape[3]}; use tiled_super_resolve for whole images")
        if x_b is not None:
            want = (y.shape[0], 1, int(c.scale * y.shape[2]), int(c.scale * y.shape[3]))
            if x_b.shape != want:
                raise ShapeError(f"bicubic base has shape {x_b.shape}, expected {want}")

    def features(self, y, train=False):
        self._check_inputs(y)
        h = self.head_conv.forward(y.astype(self.dtype) - self.dtype.type(self.input_center), train)
        for block in self.blocks:
            h = block.forward(h, train)
        return h

    def residual_from_features(self, feats, train=False):
        c = self.config
        n = feats.shape[0]
        if c.head == "fully-connected":
            r = self.recon.forward(feats.reshape(n, -1), train)
            return r.reshape(n, 1, c.hr_patch, c.hr_patch)
        return self.recon.forward(feats, train)

    def forward(self, y, x_b, train=False):
        self._check_inputs(y, x_b)
        r = self.residual_from_features(self.features(y, train), train)
        return r + x_b.astype(self.dtype, copy=False)

    def backward_head(self, g):
        """Backprop ``d loss / d output`` through the head; returns d loss / d features."""
        c = self.config
        if c.head == "fully-connected":
            n = g.shape[0]
            d = self.recon.backward(g.reshape(n, -1))
            return d.reshape(n, c.final_dim, c.lr_patch, c.lr_patch)
        return self.recon.backward(g)

    def backward(self, g):
        """Accumulate parameter gradients; returns d loss / d y."""
        d = self.backward_head(g)
        for block in reversed(self.blocks):
            d = block.backward(d)
        return self.head_conv.backward(d)

    def __call__(self, y, x_b):
        return self.forward(y, x_b)


def build_model(config, seed=None, dtype=np.float32):
    return SRModel(config, seed=seed, dtype=dtype)


def forward_patch(model, y, x_b):
    return model.forward(y, x_b)


def count_parameters(config):
    """Closed-form parameter count for ``config``."""
    c = config
    i, b, f, p = c.ident_dim, c.bottleneck_dim, c.final_dim, c.lr_patch
    conv3 = lambda cin, cout: cin * cout * 9 + cout  # noqa: E731
    if c.unit_variant == "ours":
        unit = (i * b + b) + conv3(b, b) + (b * i + i) + (i + b + b)
    elif c.unit_variant == "edsr":
        unit = 2 * conv3(i, i)
    else:
        unit = 2 * conv3(i, i) + 2 * 2 * i
    total = conv3(1, i) + c.num_blocks * c.units_per_block * unit
    total += (c.num_blocks - 1) * conv3(i, i) + conv3(i, f)
    if c.head == "fully-connected":
        total += f * p * p * c.hr_patch ** 2 + c.hr_patch ** 2
    else:
        k, _ = tconv_geometry(c.scale)
        total += f * k * k + 1
    return total


# -- transfer across scales ------------------------------------------------------------

def transfer_for_scale(model, new_scale, seed=None):
    """New model for ``new_scale`` sharing frozen copies of every feature parameter.

    Only the reconstruction head is re-initialised; feature parameters are
    copied bit-exactly and get a zero learning-rate multiplier.
    """
    cfg = replace(model.config, scale=as_scale(new_scale))
    new = SRModel(cfg, seed=seed, dtype=model.dtype)
    src = model.named_parameters()
    for p in new.feature_parameters():
        p.value[...] = src[p.name].value
        p.lr_mult = 0.0
    src_buf = model.buffers()
    for name, buf in new.buffers().items():
        buf[...] = src_buf[name]
    return new


# -- whole-image inference ----------------------------------------------------------

def _tile_starts(size, patch, stride):
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def tiled_super_resolve(model, y, overlap=None, batch_size=64, base=None, data_range=1.0):
    """Super-resolve a whole 2-D LR plane by blending fixed-size patch predictions.

    Windows of ``lr_patch`` slide with stride ``lr_patch - overlap``; the last
    window on each axis is clamped to the border. Predicted residuals are
    averaged uniformly where tiles overlap and added once to the whole-image
    bicubic base. ``data_range`` is the value range the model was trained on
    as 1.0 (255 for models from ``train``); the network sees ``y / data_range``
    and its residual is scaled back, so the output stays in the units of ``y``.
    """
    from .imaging import bicubic_resample

    c = model.config
    p = c.lr_patch
    if overlap is None:
        overlap = p // 2
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError(f"expected a 2-D image plane, got shape {y.shape}")
    if y.shape[0] < p or y.shape[1] < p:
        raise ShapeError(f"image {y.shape} is smaller than one {p}x{p} patch")
    if not 0 <= overlap < p:
        raise ValueError(f"overlap must be in [0, {p}), got {overlap}")
    if base is None:
        base = bicubic_resample(y, c.scale)
    hp = c.hr_patch
    out_h, out_w = base.shape
    acc = np.zeros(base.shape)
    weight = np.zeros(base.shape)
    stride = p - overlap
    coords = [(r, q) for r in _tile_starts(y.shape[0], p, stride) for q in _tile_starts(y.shape[1], p, stride)]

    def hr_offset(start, size, limit):
        # the border tile is flush with the HR border; others snap to the nearest HR pixel
        if start == size - p:
            return limit - hp
        return min(int(start * c.scale + Fraction(1, 2)), limit - hp)

    for s in range(0, len(coords), batch_size):
        chunk = coords[s:s + batch_size]
        ys = np.stack([y[r:r + p, q:q + p] for r, q in chunk])[:, None] / data_range
        res = model.residual_from_features(model.features(ys.astype(model.dtype))) * data_range
        for (r, q), rr in zip(chunk, res[:, 0]):
            a, b = hr_offset(r, y.shape[0], out_h), hr_offset(q, y.shape[1], out_w)
            acc[a:a + hp, b:b + hp] += rr
            weight[a:a + hp, b:b + hp] += 1
    # with overlap 0 a fractional scale can leave a one-pixel gap; it keeps the base
    return base + np.divide(acc, weight, out=np.zeros_like(acc), where=weight > 0)
