"""Benchmark evaluation on the luminance channel of HR image folders."""
import math

import numpy as np

from .imaging import degrade, list_images, luminance, modcrop, read_png
from .metrics import psnr, report_rows, ssim
from .model import as_scale, tiled_super_resolve


def shave_for(scale):
    return math.ceil(as_scale(scale))


def ground_truth(path, scale):
    """8-bit-quantised Y plane of an HR image, cropped to a multiple of the scale."""
    img = read_png(path)
    y = luminance(img) if img.ndim == 3 else img.astype(np.float64)
    return modcrop(y, scale)


def reconstruct(x, scale, model=None, overlap=None):
    """Degrade ``x`` and reconstruct it with ``model`` (bicubic when None)."""
    y, x_b = degrade(x, scale)
    if model is None:
        return x_b
    return tiled_super_resolve(model, y, overlap, base=x_b, data_range=255.0)


def evaluate_image(x, scale, model=None, overlap=None):
    out = reconstruct(x, scale, model, overlap)
    s = shave_for(scale)
    return psnr(out, x, s), ssim(out, x, s)


def evaluate_dataset(root, name, scale, model=None, overlap=None):
    """``[(image_stem, psnr, ssim), ...]`` sorted by filename."""
    results = []
    for path in list_images(root, name):
        p, s = evaluate_image(ground_truth(path, scale), scale, model, overlap)
        results.append((path.stem, p, s))
    return results


def evaluation_report(root, name, scale, model=None, overlap=None, method=None):
    method = method or ("bicubic" if model is None else "checkpoint")
    return report_rows(name, scale, method, evaluate_dataset(root, name, scale, model, overlap))
