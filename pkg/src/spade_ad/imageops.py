"""Small image-array helpers shared by the dataset generator and the saliency code."""

from __future__ import annotations

import numpy as np


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D array with bilinear interpolation (half-pixel-center convention).

    Source coordinates are sampled at ``(dst + 0.5) * scale - 0.5`` and clamped to
    the image, the common align_corners=False convention. Output is float64.
    """
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    in_h, in_w = img.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    img = np.asarray(img, dtype=np.float64)

    def axis_coords(n_out, n_in):
        scale = n_in / n_out
        x = (np.arange(n_out) + 0.5) * scale - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = x - lo
        return lo, hi, frac

    r0, r1, rf = axis_coords(out_h, in_h)
    c0, c1, cf = axis_coords(out_w, in_w)
    rf = rf[:, None]
    cf = cf[None, :]
    top = img[r0][:, c0] * (1.0 - cf) + img[r0][:, c1] * cf
    bot = img[r1][:, c0] * (1.0 - cf) + img[r1][:, c1] * cf
    return top * (1.0 - rf) + bot * rf
