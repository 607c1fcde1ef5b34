"""PSNR / SSIM on luminance planes and the per-image CSV report."""
import csv
import io
import math

import numpy as np

from .layers import ShapeError

CSV_FIELDS = ("dataset", "image", "scale", "method", "psnr_db", "ssim")


def _shaved(a, b, shave):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    if shave:
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    if a.size == 0:
        raise ValueError(f"nothing left after shaving {shave} pixels")
    return a, b


def psnr(out, ref, shave=0, data_range=255.0):
    """10 log10(range^2 / MSE); identical images give ``inf``."""
    a, b = _shaved(out, ref, shave)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size=11, sigma=1.5):
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-t * t / (2 * sigma * sigma))
    return g / g.sum()


def _valid_filter(img, g):
    k = g.size
    rows = sum(g[i] * img[i:img.shape[0] - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:rows.shape[1] - k + 1 + j] for j in range(k))


def ssim_map(a, b, data_range=255.0, size=11, sigma=1.5, k1=0.01, k2=0.03):
    g = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _valid_filter(a, g)
    mu_b = _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a * mu_a
    var_b = _valid_filter(b * b, g) - mu_b * mu_b
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(out, ref, shave=0, data_range=255.0):
    """Mean single-scale SSIM over all 11x11 Gaussian-window positions."""
    a, b = _shaved(out, ref, shave)
    if min(a.shape) < 11:
        raise ValueError(f"region {a.shape} is smaller than the 11x11 SSIM window")
    return float(np.mean(ssim_map(a, b, data_range)))


def _fmt(v):
    return "inf" if v == math.inf else f"{v:.4f}"


def report_rows(dataset, scale, method, results):
    """CSV rows for ``[(image_name, psnr, ssim), ...]`` plus a trailing mean row."""
    rows = [dict(dataset=dataset, image=name, scale=str(scale), method=method, psnr_db=_fmt(p), ssim=f"{s:.6f}")
            for name, p, s in results]
    if results:
        mp = float(np.mean([p for _, p, _ in results]))
        ms = float(np.mean([s for _, _, s in results]))
        rows.append(dict(dataset=dataset, image="mean", scale=str(scale), method=method,
                         psnr_db=_fmt(mp), ssim=f"{ms:.6f}"))
    return rows


def write_report(rows, fh=None):
    buf = fh or io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue() if fh is None else None
