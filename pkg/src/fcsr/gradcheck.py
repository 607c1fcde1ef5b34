"""Central finite-difference checks of every hand-written backward pass.

All checks run in float64. The reported error for a tensor is
``max |analytic - numeric| / max(max |analytic|, max |numeric|)``, except
for gradients that vanish identically (a conv bias feeding batch norm), where
the absolute difference is reported instead.
"""
from dataclasses import dataclass, replace

import numpy as np

from . import layers as L
from .model import ModelConfig, ReLU, SRModel, make_unit
from .objectives import EdgeOperator, LossConfig, combined_loss, edge_difference, l2_loss

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self):
        return self.error < TOLERANCE


def rel_error(analytic, numeric):
    diff = float(np.max(np.abs(analytic - numeric)))
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    return diff if scale < 1e-7 else diff / scale


def numeric_grad(f, x, h=STEP, index=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``index`` restricts the check to a subset of flat positions; the result
    is then returned only at those positions.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.zeros(len(positions))
    for k, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out if index is not None else out.reshape(x.shape)


def _sample(size, rng, limit):
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def check_conv2d(seed, shape=(2, 3, 6, 6), out_ch=4, k=3, pad=1, stride=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((out_ch, shape[1], k, k))
    b = rng.standard_normal(out_ch)
    r = rng.standard_normal(L.conv2d(x, w, b, pad, stride).shape)
    f = lambda: float(np.sum(L.conv2d(x, w, b, pad, stride) * r))  # noqa: E731
    dx, dw, db = L.conv2d_backward(r, x, w, pad, stride)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)), rel_error(db, numeric_grad(f, b)))


def check_transposed_conv2d(seed, shape=(2, 3, 4, 4), out_ch=2, stride=2, k=4, pad=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((shape[1], out_ch, k, k))
    b = rng.standard_normal(out_ch)
    r = rng.standard_normal(L.transposed_conv2d(x, w, b, stride, pad).shape)
    f = lambda: float(np.sum(L.transposed_conv2d(x, w, b, stride, pad) * r))  # noqa: E731
    dx, dw, db = L.transposed_conv2d_backward(r, x, w, stride, pad)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)), rel_error(db, numeric_grad(f, b)))


def check_prelu(seed, shape=(2, 3, 5, 5)):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    a = rng.uniform(0.05, 0.5, shape[1])
    r = rng.standard_normal(shape)
    f = lambda: float(np.sum(L.prelu(x, a) * r))  # noqa: E731
    dx, da = L.prelu_backward(r, x, a)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(da, numeric_grad(f, a)))


def check_fully_connected(seed, n=2, d=16, m=9):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    w = rng.standard_normal((d, m))
    b = rng.standard_normal(m)
    r = rng.standard_normal((n, m))
    f = lambda: float(np.sum(L.fully_connected(x, w, b) * r))  # noqa: E731
    dx, dw, db = L.fully_connected_backward(r, x, w)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)), rel_error(db, numeric_grad(f, b)))


def check_batchnorm(seed, shape=(3, 2, 4, 4)):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    gamma = rng.uniform(0.5, 1.5, shape[1])
    beta = rng.standard_normal(shape[1])
    r = rng.standard_normal(shape)

    def run():
        st = L.BatchNormState(np.zeros(shape[1]), np.ones(shape[1]))
        return L.batchnorm(x, gamma, beta, st, True), st

    f = lambda: float(np.sum(run()[0] * r))  # noqa: E731
    _, st = run()
    dx, dg, db = L.batchnorm_backward(r, gamma, st)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dg, numeric_grad(f, gamma)),
               rel_error(db, numeric_grad(f, beta)))


def check_edge_operator(seed, shape=(2, 1, 12, 12), sigma=1.0):
    rng = np.random.default_rng(seed)
    op = EdgeOperator(sigma)
    x = rng.uniform(0, 1, shape)
    rh, rv = rng.standard_normal(shape), rng.standard_normal(shape)

    def f():
        h, v = op.responses(x)
        return float(np.sum(h * rh) + np.sum(v * rv))

    return rel_error(op.responses_adjoint(rh, rv), numeric_grad(f, x))


def _kink_free_pair(rng, shape, op, eps, margin=1e-3):
    # resample until every pixel of the edge difference is away from the |.| kink
    while True:
        x = rng.uniform(0, 1, shape)
        x_h = x + rng.normal(0, 0.3, shape)
        h1, v1 = op.responses(x_h)
        h2, v2 = op.responses(x)
        d = np.sqrt(h1 * h1 + v1 * v1 + eps) - np.sqrt(h2 * h2 + v2 * v2 + eps)
        if np.min(np.abs(d)) > margin:
            return x_h, x


def check_edge_difference(seed, shape=(2, 1, 10, 10)):
    rng = np.random.default_rng(seed)
    cfg = LossConfig(sigma=1.0, eps=1e-6)
    x_h, x = _kink_free_pair(rng, shape, EdgeOperator(cfg.sigma), cfg.eps)
    _, g = edge_difference(x_h, x, cfg)
    return rel_error(g, numeric_grad(lambda: edge_difference(x_h, x, cfg)[0], x_h))


def check_combined_loss(seed, shape=(2, 1, 10, 10), beta=0.1):
    rng = np.random.default_rng(seed)
    cfg = LossConfig(beta=beta, sigma=1.0, eps=1e-6)
    x_h, x = _kink_free_pair(rng, shape, EdgeOperator(cfg.sigma), cfg.eps)
    x_b = rng.uniform(0, 1, shape)
    f_out = x_h - x_b
    _, g = combined_loss(f_out, x_b, x, cfg)
    return rel_error(g, numeric_grad(lambda: combined_loss(f_out, x_b, x, cfg)[0], f_out))


def check_l2(seed, shape=(3, 1, 4, 4)):
    rng = np.random.default_rng(seed)
    p, t = rng.standard_normal(shape), rng.standard_normal(shape)
    _, g = l2_loss(p, t)
    return rel_error(g, numeric_grad(lambda: l2_loss(p, t)[0], p))


def check_residual_unit(seed, variant="ours", shape=(2, 6, 5, 5)):
    rng = np.random.default_rng(seed)
    unit = make_unit("u", variant, shape[1], 3, rng, np.float64)
    x = rng.standard_normal(shape)
    r = rng.standard_normal(shape)
    f = lambda: float(np.sum(unit.forward(x, True) * r))  # noqa: E731
    for p in unit.params():
        p.zero_grad()
    unit.forward(x, True)
    dx = unit.backward(r)
    errs = [rel_error(dx, numeric_grad(f, x))]
    for p in unit.params():
        errs.append(rel_error(p.grad, numeric_grad(f, p.value)))
    return max(errs)


TINY = ModelConfig(scale=2, lr_patch=8, num_blocks=2, ident_dim=8, bottleneck_dim=4, final_dim=2, units_per_block=2)


def _relu_margin(model):
    """Smallest |input| seen by any ReLU in the last training-mode forward."""
    out = np.inf
    for block in model.blocks:
        for unit in block.units:
            layers = list(unit.branch.layers) + ([unit.post] if unit.post is not None else [])
            for layer in layers:
                if isinstance(layer, ReLU):
                    out = min(out, float(np.min(np.abs(layer._x))))
    return out


def check_model(seed, config=TINY, beta=0.1, per_tensor=12, kink_margin=1e-4):
    """End-to-end: combined loss through the whole network, sampled entries per tensor.

    Inputs are redrawn until every ReLU input is at least ``kink_margin`` away
    from zero, so central differences never straddle a kink.
    """
    rng = np.random.default_rng(seed)
    model = SRModel(config, seed=seed, dtype=np.float64)
    for p in model.parameters():
        if p.name.endswith(".bias"):
            p.value[...] = rng.normal(0, 0.05, p.value.shape)
    n, hp = 2, config.hr_patch
    for _ in range(100):
        y = rng.uniform(0, 1, (n, 1, config.lr_patch, config.lr_patch))
        x_b = rng.uniform(0, 1, (n, 1, hp, hp))
        model.forward(y, x_b, train=True)
        if _relu_margin(model) > kink_margin:
            break
    else:
        raise RuntimeError("could not draw a kink-free input")
    x = x_b + rng.normal(0, 0.2, x_b.shape)
    cfg = LossConfig(beta=beta, eps=1e-6)

    def f():
        return combined_loss(model.forward(y, x_b, train=True) - x_b, x_b, x, cfg)[0]

    model.zero_grad()
    out = model.forward(y, x_b, train=True)
    _, g = combined_loss(out - x_b, x_b, x, cfg)
    dy = model.backward(g)
    errs = {"input": rel_error(dy.reshape(-1), numeric_grad(f, y).reshape(-1))}
    for p in model.parameters():
        idx = _sample(p.value.size, rng, per_tensor)
        errs[p.name] = rel_error(p.grad.reshape(-1)[idx], numeric_grad(f, p.value, index=idx))
    return errs


CHECKS = {
    "conv2d": check_conv2d,
    "conv2d_stride2": lambda s: check_conv2d(s, shape=(2, 2, 7, 7), k=3, pad=1, stride=2),
    "conv2d_1x1": lambda s: check_conv2d(s, k=1, pad=0),
    "transposed_conv2d": check_transposed_conv2d,
    "transposed_conv2d_x3": lambda s: check_transposed_conv2d(s, shape=(1, 2, 3, 3), stride=3, k=5, pad=1),
    "prelu": check_prelu,
    "fully_connected": check_fully_connected,
    "batchnorm": check_batchnorm,
    "l2_loss": check_l2,
    "edge_operator": check_edge_operator,
    "edge_difference": check_edge_difference,
    "combined_loss": check_combined_loss,
    "residual_unit_ours": check_residual_unit,
    "residual_unit_edsr": lambda s: check_residual_unit(s, "edsr"),
    "residual_unit_srresnet": lambda s: check_residual_unit(s, "srresnet"),
    "residual_unit_original": lambda s: check_residual_unit(s, "original"),
}


def adjoint_error(seed):
    """|<conv(a), b> - <a, conv^T(b)>| relative to the magnitude of the products."""
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 4))
    k = int(rng.integers(1, 5))
    pad = int(rng.integers(0, k))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    size = int(rng.integers(k, k + 6))
    a = rng.standard_normal((2, cin, size, size))
    w = rng.standard_normal((cout, cin, k, k))
    ca = L.conv2d(a, w, None, pad, stride)
    b = rng.standard_normal(ca.shape)
    tb = L._conv_input_grad(b, w, a.shape, pad, stride)
    lhs, rhs = float(np.sum(ca * b)), float(np.sum(a * tb))
    return abs(lhs - rhs) / max(np.sum(np.abs(ca * b)), 1e-12)


def run_suite(seeds=range(20), include_model=True):
    results = []
    for name, fn in CHECKS.items():
        for s in seeds:
            results.append(CheckResult(name, s, fn(s)))
    for s in seeds:
        results.append(CheckResult("conv_adjoint", s, adjoint_error(s) * TOLERANCE / 1e-6))
    if include_model:
        tconv = replace(TINY, head="transposed-conv")
        for s in list(seeds)[:3]:
            for label, cfg in (("model", TINY), ("model-tconv", tconv)):
                for tensor, err in check_model(s, cfg).items():
                    results.append(CheckResult(f"{label}:{tensor}", s, err))
    return results
