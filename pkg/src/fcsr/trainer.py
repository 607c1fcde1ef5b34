"""Training loops: scratch training, cross-scale fine-tuning and ablation arms."""
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .layers import NonFiniteError
from .metrics import psnr, ssim
from .model import ModelConfig, SRModel, as_scale, transfer_for_scale
from .objectives import LossConfig, combined_loss
from .optim import RMSProp, SGDMomentum, clip_gradients

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "iter", "loss", "psnr", "ssim", "seconds")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration, lr, max_grad, cause):
        super().__init__(f"non-finite value at iteration {iteration} (lr={lr:g}, max |grad|={max_grad:g}): {cause}")
        self.iteration = iteration
        self.lr = lr
        self.max_grad = max_grad


@dataclass
class TrainSchedule:
    """Learning-rate, clipping and optimiser settings.

    Scratch mode decays step-wise (``lr_decay_factor`` at the start of every
    ``lr_decay_every``-th epoch); finetune mode decays by ``lr_exp_decay``
    each epoch. Clipping decays step-wise in both modes.
    """

    mode: str = "scratch"
    epochs: int = 60
    batch_size: int = 256
    lr_conv: float = 0.1
    lr_fc: float = 0.01
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    lr_exp_decay: float = 0.9
    clip: float = 1.0
    clip_decay_every: int = 10
    clip_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    rms_decay: float = 0.9
    rms_eps: float = 1.0
    max_iterations: int = 0
    eval_every: int = 1
    data_range: float = 255.0

    def __post_init__(self):
        if self.mode not in ("scratch", "finetune"):
            raise ValueError(f"mode must be scratch or finetune, got {self.mode!r}")
        if self.optimizer not in ("sgd-momentum", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if min(self.lr_conv, self.lr_fc, self.clip) <= 0:
            raise ValueError("learning rates and clip limit must be positive")

    @classmethod
    def scratch(cls, **kw):
        return cls(**kw)

    @classmethod
    def finetune(cls, **kw):
        base = dict(mode="finetune", lr_conv=0.001, lr_fc=0.001, optimizer="rmsprop")
        base.update(kw)
        return cls(**base)

    def lr(self, epoch, group="features"):
        base = self.lr_fc if group == "recon" else self.lr_conv
        if self.mode == "finetune":
            return base * self.lr_exp_decay ** epoch
        return base * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def clip_limit(self, epoch):
        return self.clip * self.clip_decay_factor ** (epoch // self.clip_decay_every)

    def make_optimizer(self):
        if self.optimizer == "rmsprop":
            return RMSProp(self.rms_decay, self.rms_eps, self.weight_decay)
        return SGDMomentum(self.momentum, self.weight_decay)


@dataclass
class LogRow:
    epoch: int
    iter: int
    loss: float
    psnr: float
    ssim: float
    seconds: float


@dataclass
class ConvergenceLog:
    label: str = ""
    rows: list = field(default_factory=list)

    def append(self, row):
        if self.rows and row.iter <= self.rows[-1].iter:
            raise ValueError(f"log rows must be strictly ordered by iteration ({row.iter} after {self.rows[-1].iter})")
        self.rows.append(row)

    def to_csv(self, with_label=False):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow((("arm",) if with_label else ()) + LOG_FIELDS)
        for r in self.rows:
            vals = (r.epoch, r.iter, f"{r.loss:.8g}", f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.seconds:.3f}")
            w.writerow(((self.label,) if with_label else ()) + vals)
        return buf.getvalue()

    @property
    def final_psnr(self):
        return self.rows[-1].psnr if self.rows else math.nan


def evaluate_patches(model, dataset, data_range=255.0, batch_size=128):
    """PSNR of the pooled squared error and mean SSIM over patches, on the [0, 255] scale."""
    outs = []
    for s in range(0, len(dataset), batch_size):
        y = dataset.lr[s:s + batch_size] / data_range
        xb = dataset.base[s:s + batch_size] / data_range
        outs.append(model.forward(y.astype(model.dtype), xb.astype(model.dtype)).astype(np.float64) * data_range)
    out = np.concatenate(outs)[:, 0]
    ref = dataset.hr[:, 0].astype(np.float64)
    p = psnr(out.reshape(-1, out.shape[-1]), ref.reshape(-1, ref.shape[-1]))
    s = float(np.mean([ssim(o, r) for o, r in zip(out, ref)])) if out.shape[-1] >= 11 else math.nan
    return p, s


def _has_batchnorm(model):
    return bool(model.buffers())


def train(model, dataset, schedule=None, loss_config=None, eval_set=None, seed=0, label=""):
    """Minibatch training of ``model`` on a PatchDataset.

    Patches are divided by ``schedule.data_range`` before entering the
    network; the loss ``eps`` is rescaled to match. Frozen parameters
    (``lr_mult == 0``) are checked for bit-exact stability after every epoch.
    """
    schedule = schedule or TrainSchedule()
    loss_config = loss_config or LossConfig()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if as_scale(dataset.scale) != model.config.scale or dataset.lr_patch != model.config.lr_patch:
        raise ValueError(f"dataset (scale {dataset.scale}, patch {dataset.lr_patch}) does not match model "
                         f"(scale {model.config.scale}, patch {model.config.lr_patch})")
    rng = np.random.default_rng(seed)
    dr = schedule.data_range
    dt = model.dtype
    lr_all = (dataset.lr / dr).astype(dt)
    hr_all = (dataset.hr / dr).astype(dt)
    base_all = (dataset.base / dr).astype(dt)
    cfg = replace(loss_config, eps=loss_config.eps / (dr * dr))
    opt = schedule.make_optimizer()
    feats = model.feature_parameters()
    recon = model.recon.params()
    everything = feats + recon
    frozen = {p.name: p.value.copy() for p in everything if p.frozen}
    cached = None
    if all(p.frozen for p in feats) and not _has_batchnorm(model):
        cached = np.concatenate([model.features(lr_all[s:s + 256]) for s in range(0, len(dataset), 256)])
    history = ConvergenceLog(label)
    t0 = time.perf_counter()
    it = 0
    n = len(dataset)
    for epoch in range(schedule.epochs):
        lr_f, lr_r = schedule.lr(epoch, "features"), schedule.lr(epoch, "recon")
        limit = schedule.clip_limit(epoch)
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, schedule.batch_size):
            if schedule.max_iterations and it >= schedule.max_iterations:
                break
            idx = perm[s:s + schedule.batch_size]
            model.zero_grad()
            try:
                if cached is not None:
                    res = model.residual_from_features(cached[idx], train=True)
                else:
                    res = model.residual_from_features(model.features(lr_all[idx], train=True), train=True)
                loss, g = combined_loss(res, base_all[idx], hr_all[idx], cfg)
                if cached is not None:
                    model.backward_head(g)
                else:
                    model.backward(g)
            except (NonFiniteError, FloatingPointError) as e:
                gmax = max((float(np.max(np.abs(p.grad[np.isfinite(p.grad)]), initial=0)) for p in everything),
                           default=0.0)
                raise TrainingDivergedError(it, lr_f, gmax, e) from e
            clip_gradients(everything, limit)
            opt.step(feats, lr_f)
            opt.step(recon, lr_r)
            losses.append(loss)
            it += 1
        for name, value in frozen.items():
            if not np.array_equal(model.named_parameters()[name].value, value):
                raise RuntimeError(f"frozen parameter {name} changed during epoch {epoch}")
        last = epoch == schedule.epochs - 1 or (schedule.max_iterations and it >= schedule.max_iterations)
        if losses and ((epoch + 1) % schedule.eval_every == 0 or last):
            p, q = evaluate_patches(model, eval_set, dr) if eval_set is not None else (math.nan, math.nan)
            history.append(LogRow(epoch, it, float(np.mean(losses)), p, q, time.perf_counter() - t0))
            log.info("%s epoch %d iter %d loss %.6g psnr %.3f", label, epoch, it, np.mean(losses), p)
        if last:
            break
    model.optimizer = opt
    return model, history


def finetune(source, new_scale, dataset, schedule=None, loss_config=None, eval_set=None, seed=0, label="finetune"):
    """Transfer ``source`` to ``new_scale`` and train only its reconstruction head."""
    from .checkpoint import load

    if not isinstance(source, SRModel):
        source = load(source)
    if as_scale(dataset.scale) != as_scale(new_scale):
        raise ValueError(f"dataset scale {dataset.scale} does not match requested scale {new_scale}")
    model = transfer_for_scale(source, new_scale, seed=seed)
    return train(model, dataset, schedule or TrainSchedule.finetune(), loss_config, eval_set, seed, label)


# -- ablations ------------------------------------------------------------------------

@dataclass
class Arm:
    label: str
    model_config: ModelConfig
    loss_config: LossConfig
    schedule: TrainSchedule
    log: ConvergenceLog = None

    def settings(self):
        out = {f"model.{k}": v for k, v in self.model_config.to_dict().items()}
        out.update({f"loss.{k}": v for k, v in asdict(self.loss_config).items()})
        out.update({f"schedule.{k}": v for k, v in asdict(self.schedule).items()})
        return out


def config_diff(a, b):
    """Keys whose values differ between two arms."""
    sa, sb = a.settings(), b.settings()
    return sorted(k for k in sa if sa[k] != sb[k])


def ablation_arms(axis, model_config, loss_config, schedule):
    if axis == "head":
        return [Arm(h, replace(model_config, head=h), loss_config, schedule)
                for h in ("fully-connected", "transposed-conv")]
    if axis == "unit_variant":
        return [Arm(v, replace(model_config, unit_variant=v), loss_config, schedule)
                for v in ("original", "srresnet", "edsr", "ours")]
    if axis == "loss":
        beta = loss_config.beta or LossConfig().beta
        return [Arm("l2", model_config, replace(loss_config, beta=0.0), schedule),
                Arm("edge", model_config, replace(loss_config, beta=beta), schedule)]
    if axis == "transfer":
        ft = TrainSchedule.finetune(**{k: getattr(schedule, k) for k in ("epochs", "batch_size", "max_iterations",
                                                                          "eval_every", "data_range")})
        return [Arm("scratch", model_config, loss_config, schedule),
                Arm("finetune", model_config, loss_config, ft)]
    raise ValueError(f"unknown ablation axis {axis!r}")


def ablate(axis, model_config, dataset, schedule=None, loss_config=None, eval_set=None, seed=0, source=None):
    """Train one model per arm of ``axis`` from a shared seed and dataset.

    The ``transfer`` axis needs ``source``, a model trained at another scale;
    its finetune arm reuses that model's feature extractor.
    """
    schedule = schedule or TrainSchedule()
    loss_config = loss_config or LossConfig()
    arms = ablation_arms(axis, model_config, loss_config, schedule)
    for arm in arms:
        if axis == "transfer" and arm.label == "finetune":
            if source is None:
                raise ValueError("the transfer axis needs a source model trained at another scale")
            _, arm.log = finetune(source, model_config.scale, dataset, arm.schedule, arm.loss_config, eval_set,
                                  seed, label=arm.label)
        else:
            model = SRModel(arm.model_config, seed=seed)
            _, arm.log = train(model, dataset, arm.schedule, arm.loss_config, eval_set, seed, label=arm.label)
    return arms


def ablation_csv(arms):
    chunks = [arm.log.to_csv(with_label=True) for arm in arms]
    return chunks[0] + "".join(c.split("\n", 1)[1] for c in chunks[1:])


# -- key/value training config ---------------------------------------------------------

_DESK = dict(
    lr_patch=8, num_blocks=2, ident_dim=16, bottleneck_dim=8, final_dim=4, units_per_block=2,
    epochs=20, batch_size=32, lr_decay_every=1000, clip_decay_every=1000, rms_eps=1e-6, stride=12,
)

# per profile, settings for scratch training and for head-only fine-tuning
PROFILES = {
    "full": {"scratch": {}, "finetune": {}},
    "desk": {"scratch": dict(_DESK, lr_conv=0.001, lr_fc=0.02), "finetune": dict(_DESK, epochs=5)},
}

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_LOSS_KEYS = {"beta", "sigma", "eps"}
_SCHEDULE_KEYS = {f.name for f in fields(TrainSchedule)}
_DATA_KEYS = {"stride", "augment"}


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value).strip()


def parse_kv(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def format_kv(settings):
    return "".join(f"{k} = {v}\n" for k, v in settings.items())


def resolve_settings(profile="full", overrides=None, mode="scratch"):
    """Merge profile defaults and overrides into (ModelConfig, TrainSchedule, LossConfig, data options)."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    merged = dict(PROFILES[profile][mode])
    merged.update(overrides or {})
    unknown = set(merged) - _MODEL_KEYS - _LOSS_KEYS - _SCHEDULE_KEYS - _DATA_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    sched_default = TrainSchedule.finetune() if mode == "finetune" else TrainSchedule()
    mdef, ldef = ModelConfig(), LossConfig()
    model_kw = {k: (as_scale(v) if k == "scale" else _coerce(v, getattr(mdef, k)))
                for k, v in merged.items() if k in _MODEL_KEYS}
    sched_kw = {k: _coerce(v, getattr(sched_default, k)) for k, v in merged.items() if k in _SCHEDULE_KEYS}
    loss_kw = {k: _coerce(v, getattr(ldef, k)) for k, v in merged.items() if k in _LOSS_KEYS}
    data = dict(stride=int(merged.get("stride", 16)), augment=_coerce(merged.get("augment", False), False))
    schedule = replace(sched_default, **sched_kw)
    return ModelConfig(**model_kw), schedule, LossConfig(**loss_kw), data
