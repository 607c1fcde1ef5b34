"""scikit-learn style wrappers: fit on HR luminance planes, predict from LR planes."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load
from .imaging import augment, bicubic_resample, extract_patches
from .layers import ShapeError
from .metrics import psnr
from .model import ModelConfig, SRModel, as_scale, tiled_super_resolve
from .objectives import LossConfig
from .trainer import TrainSchedule, finetune, train


def check_plane(img, name="image", min_size=1):
    """Validate one 2-D luminance plane; returns a float64 copy-free view when possible."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D luminance plane, got shape {arr.shape}")
    if not (np.issubdtype(arr.dtype, np.number) and not np.iscomplexobj(arr)):
        raise TypeError(f"{name} must be real-valued, got dtype {arr.dtype}")
    arr = arr.astype(np.float64, copy=False)
    if min(arr.shape) < min_size:
        raise ShapeError(f"{name} {arr.shape} is smaller than {min_size}x{min_size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_planes(X, name="X", min_size=1):
    """Accept one plane or a sequence of planes; always returns a list."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    planes = [check_plane(x, f"{name}[{i}]", min_size) for i, x in enumerate(X)]
    if not planes:
        raise ValueError(f"{name} is empty")
    return planes


def _unwrap(X, out):
    return out[0] if isinstance(X, np.ndarray) and X.ndim == 2 else out


class BicubicSuperResolver(BaseEstimator):
    """Bicubic upscaling baseline with the same interface as the learned model."""

    def __init__(self, scale=3):
        self.scale = scale

    def fit(self, X=None, y=None):
        self.scale_ = as_scale(self.scale)
        return self

    def predict(self, X):
        check_is_fitted(self, "scale_")
        return _unwrap(X, [bicubic_resample(x, self.scale_, antialias=False) for x in check_planes(X)])

    def score(self, X, y):
        return _mean_psnr(self.predict(X), y, self.scale_)


def _mean_psnr(pred, ref, scale):
    pred = pred if isinstance(pred, list) else [pred]
    ref = check_planes(ref, "y")
    if len(pred) != len(ref):
        raise ValueError(f"{len(pred)} predictions for {len(ref)} references")
    shave = int(np.ceil(scale))
    return float(np.mean([psnr(p, r, shave) for p, r in zip(pred, ref)]))


class FCSRSuperResolver(BaseEstimator):
    """Residual network super-resolver trained on HR luminance planes in [0, 255].

    ``fit(X)`` degrades each HR plane, cuts aligned patch pairs and trains the
    network; ``predict(X)`` super-resolves whole LR planes by tiling. With
    ``source`` (a fitted resolver, an SRModel or a checkpoint path) only the
    reconstruction head is trained and the feature extractor stays frozen.
    """

    def __init__(self, scale=3, lr_patch=32, num_blocks=5, ident_dim=128, bottleneck_dim=64, final_dim=8,
                 units_per_block=3, head="fully-connected", unit_variant="ours", beta=0.1, sigma=1.0, eps=1e-6,
                 epochs=60, batch_size=256, lr_conv=0.1, lr_fc=0.01, max_iterations=0, stride=16, augment=False,
                 overlap=None, source=None, random_state=0):
        self.scale = scale
        self.lr_patch = lr_patch
        self.num_blocks = num_blocks
        self.ident_dim = ident_dim
        self.bottleneck_dim = bottleneck_dim
        self.final_dim = final_dim
        self.units_per_block = units_per_block
        self.head = head
        self.unit_variant = unit_variant
        self.beta = beta
        self.sigma = sigma
        self.eps = eps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_conv = lr_conv
        self.lr_fc = lr_fc
        self.max_iterations = max_iterations
        self.stride = stride
        self.augment = augment
        self.overlap = overlap
        self.source = source
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(as_scale(self.scale), self.lr_patch, self.num_blocks, self.ident_dim,
                           self.bottleneck_dim, self.final_dim, self.units_per_block, self.head, self.unit_variant)

    def _source_model(self):
        src = self.source
        if isinstance(src, FCSRSuperResolver):
            check_is_fitted(src, "model_")
            return src.model_
        if isinstance(src, SRModel):
            return src
        return load(src)

    def patches(self, X):
        """The PatchDataset ``fit`` would train on."""
        planes = check_planes(X, "X")
        tags = None
        if self.augment:
            expanded = augment(planes)
            planes = [img for _, _, img in expanded]
            tags = [(i, t) for i, t, _ in expanded]
        data = extract_patches(planes, as_scale(self.scale), self.lr_patch, self.stride, tags)
        if len(data) == 0:
            raise ValueError(f"no {self.lr_patch}x{self.lr_patch} LR patches fit in the training images "
                             f"({data.skipped} skipped)")
        return data

    def fit(self, X, y=None, eval_set=None):
        """Train on HR planes ``X``; ``y`` is ignored (targets come from ``X`` itself)."""
        data = self.patches(X)
        loss = LossConfig(beta=self.beta, sigma=self.sigma, eps=self.eps)
        common = dict(epochs=self.epochs, batch_size=self.batch_size, max_iterations=self.max_iterations)
        if self.source is not None:
            schedule = TrainSchedule.finetune(**common)
            model, log = finetune(self._source_model(), as_scale(self.scale), data, schedule, loss, eval_set,
                                  seed=self.random_state)
        else:
            schedule = TrainSchedule.scratch(lr_conv=self.lr_conv, lr_fc=self.lr_fc, **common)
            model = SRModel(self._model_config(), seed=self.random_state)
            model, log = train(model, data, schedule, loss, eval_set, seed=self.random_state)
        self.model_ = model
        self.history_ = log
        self.n_patches_ = len(data)
        return self

    @classmethod
    def from_model(cls, model, **kw):
        """Wrap an already trained SRModel (e.g. a loaded checkpoint)."""
        c = model.config
        est = cls(scale=c.scale, lr_patch=c.lr_patch, num_blocks=c.num_blocks, ident_dim=c.ident_dim,
                  bottleneck_dim=c.bottleneck_dim, final_dim=c.final_dim, units_per_block=c.units_per_block,
                  head=c.head, unit_variant=c.unit_variant, **kw)
        est.model_ = model
        return est

    def predict(self, X):
        """Super-resolve LR planes (values in [0, 255]); returns unclamped float planes."""
        check_is_fitted(self, "model_")
        p = self.model_.config.lr_patch
        planes = check_planes(X, "X", min_size=p)
        return _unwrap(X, [tiled_super_resolve(self.model_, x, self.overlap, data_range=255.0) for x in planes])

    def score(self, X, y):
        """Mean PSNR (dB) of ``predict(X)`` against HR planes ``y``, shaving ``scale`` border pixels."""
        return _mean_psnr(self.predict(X), y, self.model_.config.scale)
