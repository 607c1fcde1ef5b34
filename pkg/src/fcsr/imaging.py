"""Image planes, colour conversion, bicubic resampling and training-patch construction.

Image planes are 2-D float64 arrays on the [0, 255] scale. Values are only
rounded and clamped when exported to 8-bit.
"""
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .model import as_scale

# ITU-R BT.601 studio swing, as in MATLAB's rgb2ycbcr (RGB on [0, 1] scale)
_YCBCR = np.array([
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
])
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])
_YCBCR_INV = np.linalg.inv(_YCBCR)

AUG_SCALES = (Fraction(1), Fraction(9, 10), Fraction(8, 10), Fraction(7, 10), Fraction(6, 10))
AUG_ROTATIONS = (0, 90, 180, 270)
AUG_FLIPS = ("none", "horizontal", "vertical")


def rgb_to_ycbcr(rgb):
    """(H, W, 3) RGB on [0, 255] to a (Y, Cb, Cr) tuple of float planes."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {rgb.shape}")
    ycc = rgb @ (_YCBCR.T / 255.0) + _YCBCR_OFFSET
    return ycc[..., 0], ycc[..., 1], ycc[..., 2]


def ycbcr_to_rgb(y, cb, cr):
    ycc = np.stack([y, cb, cr], axis=-1).astype(np.float64) - _YCBCR_OFFSET
    return ycc @ (_YCBCR_INV.T * 255.0)


def to_uint8(img):
    """Round half away from zero, then clamp to [0, 255]."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.sign(img) * np.floor(np.abs(img) + 0.5), 0, 255).astype(np.uint8)


def luminance(img, quantize=True):
    """Y plane of an 8-bit image; grey images are returned as-is.

    With ``quantize`` the Y plane is rounded to 8-bit levels, as MATLAB does
    when rgb2ycbcr is given uint8 input.
    """
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.float64)
    y = rgb_to_ycbcr(img)[0]
    return to_uint8(y).astype(np.float64) if quantize else y


# -- PNG I/O ------------------------------------------------------------------

def read_png(path):
    """Load an image as uint8, (H, W) for grey or (H, W, 3) for colour."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F"):
            return np.asarray(im.convert("L"))
        return np.asarray(im.convert("RGB"))


def write_png(path, img):
    arr = img if np.asarray(img).dtype == np.uint8 else to_uint8(img)
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG")


# -- bicubic resampling -----------------------------------------------------------

def cubic(x, a=-0.5):
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = ((a + 2) * ax3 - (a + 3) * ax2 + 1) * (ax <= 1)
    far = (a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a) * ((ax > 1) & (ax <= 2))
    return near + far


def _contributions(in_len, out_len, scale, antialias):
    # Follows MATLAB imresize: 1-based coordinates, half-pixel centres,
    # symmetric (mirror) boundary indices, zero-weight columns dropped.
    scale = float(scale)
    if scale < 1 and antialias:
        kernel = lambda t: scale * cubic(scale * t)  # noqa: E731
        width = 4.0 / scale
    else:
        kernel = cubic
        width = 4.0
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w = w / w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    idx = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    keep = np.any(w != 0, axis=0)
    return w[:, keep], idx[:, keep]


def _resize_axis(img, axis, out_len, scale, antialias):
    w, idx = _contributions(img.shape[axis], out_len, scale, antialias)
    moved = np.moveaxis(img, axis, 0)
    out = np.einsum("ij,ij...->i...", w, moved[idx])
    return np.moveaxis(out, 0, axis)


def output_size(size, scale):
    return math.ceil(Fraction(size) * as_scale(scale))


def bicubic_resample(img, scale, antialias=True):
    """Resize a 2-D plane (or (H, W, C) stack) by ``scale`` like MATLAB's imresize.

    Downscaling with ``antialias`` widens the kernel by ``1 / scale``.
    """
    scale = as_scale(scale)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    img = np.asarray(img, dtype=np.float64)
    oh, ow = output_size(img.shape[0], scale), output_size(img.shape[1], scale)
    if oh < 1 or ow < 1:
        raise ValueError(f"resizing {img.shape[:2]} by {scale} gives an empty image")
    out = _resize_axis(img, 0, oh, scale, antialias)
    return _resize_axis(out, 1, ow, scale, antialias)


def modcrop(img, n):
    """Crop the bottom/right edges so both dims are multiples of the scale's numerator."""
    m = as_scale(n).numerator
    h, w = img.shape[0], img.shape[1]
    return img[:h - h % m, :w - w % m]


def degrade(x, n, noise_std=0.0, seed=None):
    """HR plane -> (LR plane, bicubic base at HR size).

    Blur and decimation are fused into antialiased bicubic downscaling.
    ``noise_std`` adds Gaussian noise to the LR plane; standard experiments
    leave it at zero.
    """
    n = as_scale(n)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] % n.numerator or x.shape[1] % n.numerator:
        raise ValueError(f"image {x.shape} is not divisible by scale {n}; modcrop it first")
    y = bicubic_resample(x, 1 / n, antialias=True)
    if noise_std:
        y = y + np.random.default_rng(seed).normal(0.0, noise_std, y.shape)
    x_b = bicubic_resample(y, n, antialias=False)
    return y, x_b


# -- augmentation -----------------------------------------------------------------

def _flip(img, flip):
    if flip == "horizontal":
        return img[:, ::-1]
    if flip == "vertical":
        return img[::-1]
    return img


def augment(images):
    """Expand each image into 5 scales x 4 rotations x 3 flips = 60 variants.

    Returns ``(source_index, (scale, rotation, flip), image)`` tuples in a
    fixed order.
    """
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = [images]
    out = []
    for i, img in enumerate(images):
        for s in AUG_SCALES:
            scaled = img if s == 1 else bicubic_resample(img, s, antialias=True)
            for r in AUG_ROTATIONS:
                for f in AUG_FLIPS:
                    out.append((i, (s, r, f), np.ascontiguousarray(_flip(np.rot90(scaled, k=r // 90), f))))
    return out


# -- patch dataset ----------------------------------------------------------------

@dataclass
class PatchDataset:
    """Aligned LR / HR / bicubic-base patch triples, stored as (N, 1, h, w) float32."""

    lr: np.ndarray
    hr: np.ndarray
    base: np.ndarray
    scale: Fraction
    lr_patch: int
    stride: int
    provenance: list = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return self.lr.shape[0]

    def subset(self, index):
        index = np.asarray(index)
        return PatchDataset(self.lr[index], self.hr[index], self.base[index], self.scale, self.lr_patch,
                            self.stride, [self.provenance[i] for i in index], 0)


def extract_patches(hr_images, n, lr_patch=32, k=16, tags=None):
    """Crop LR patches at stride ``k`` with matching HR patches at stride ``n * k``.

    Each HR image is modcropped and degraded first; the bicubic base of every
    pair is the bicubic upscale of its own LR patch. Images smaller than one
    patch are skipped and counted in ``skipped``.
    """
    n = as_scale(n)
    if k < 1:
        raise ValueError(f"stride k must be >= 1, got {k}")
    if (n * k).denominator != 1 or (n * lr_patch).denominator != 1:
        raise ValueError(f"scale {n} needs lr_patch and k that make n*lr_patch and n*k integers")
    hp = int(n * lr_patch)
    if isinstance(hr_images, np.ndarray) and hr_images.ndim == 2:
        hr_images = [hr_images]
    lrs, hrs, bases, prov = [], [], [], []
    skipped = 0
    for i, img in enumerate(hr_images):
        x = modcrop(np.asarray(img, dtype=np.float64), n)
        if x.shape[0] < hp or x.shape[1] < hp:
            skipped += 1
            continue
        y, _ = degrade(x, n)
        if y.shape[0] < lr_patch or y.shape[1] < lr_patch:
            skipped += 1
            continue
        tag = tags[i] if tags is not None else None
        for r in range(0, y.shape[0] - lr_patch + 1, k):
            for c in range(0, y.shape[1] - lr_patch + 1, k):
                yp = y[r:r + lr_patch, c:c + lr_patch]
                hr_r, hr_c = int(n * r), int(n * c)
                lrs.append(yp)
                hrs.append(x[hr_r:hr_r + hp, hr_c:hr_c + hp])
                bases.append(bicubic_resample(yp, n, antialias=False))
                prov.append((i, tag, (r, c)))
    shape = (0, 1, lr_patch, lr_patch)
    def stack(items, s):
        return np.stack(items)[:, None].astype(np.float32) if items else np.zeros(s, np.float32)
    return PatchDataset(stack(lrs, shape), stack(hrs, (0, 1, hp, hp)), stack(bases, (0, 1, hp, hp)),
                        n, lr_patch, k, prov, skipped)


# -- dataset directories -----------------------------------------------------------

def scale_tag(n):
    n = as_scale(n)
    return str(n.numerator) if n.denominator == 1 else f"{n.numerator}_{n.denominator}"


def list_images(root, name):
    """Sorted PNG paths under ``<root>/<name>/HR``."""
    d = Path(root) / name / "HR"
    if not d.is_dir():
        raise FileNotFoundError(f"no HR directory at {d}")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise FileNotFoundError(f"no PNG images in {d}")
    return paths


def prepare_dataset(root, name, n):
    """Write LR images (and their bicubic bases) for scale ``n`` under ``LR_x{n}/``.

    Colour images are degraded per channel; cached files are 8-bit PNGs.
    """
    n = as_scale(n)
    out = Path(root) / name / f"LR_x{scale_tag(n)}"
    (out / "bicubic").mkdir(parents=True, exist_ok=True)
    written = []
    for path in list_images(root, name):
        img = modcrop(read_png(path).astype(np.float64), n)
        y = bicubic_resample(img, 1 / n, antialias=True)
        write_png(out / path.name, y)
        write_png(out / "bicubic" / path.name, bicubic_resample(y, n, antialias=False))
        written.append(out / path.name)
    return written
