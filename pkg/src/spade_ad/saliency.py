"""Region-of-interest maps from classifier gradients.

The ROI combines two branches computed with gradient-weighted class activation
mapping: the input image's map activated by absolute value (dissimilar regions
matter for detection too) and the reconstruction's map activated by ReLU (a
reconstruction should only ever look like the normal pattern). The branch sum
is upsampled to image resolution and L1-normalized so region size carries no
bias.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .imageops import bilinear_resize
from .models import CnnModel, _to_batch


@dataclass(frozen=True)
class SaliencyMap:
    """Non-negative spatial weighting at image resolution; sums to 1 unless the
    raw map was identically zero (then uniform, flagged degenerate)."""

    values: np.ndarray  # (H, W) float64
    l1_mass: float  # pre-normalization mass
    degenerate: bool = False


def compute_alpha(model: CnnModel, u: np.ndarray) -> np.ndarray:
    """Channel importance weights: spatially averaged gradient of the normal-class
    score with respect to the last conv layer's activation stack (reverse mode)."""
    x = _to_batch(u, model)
    model.eval()
    with torch.no_grad():
        a = model.features(x)
    a = a.detach().requires_grad_(True)
    y = model.head(a)
    (grad,) = torch.autograd.grad(y.sum(), a)
    return grad[0].mean(dim=(1, 2)).numpy().astype(np.float64)


def roi_map(alpha: np.ndarray, features: np.ndarray, activation: str) -> np.ndarray:
    """Elementwise f(sum_k alpha_k * A_k) with f = Abs or ReLU."""
    alpha = np.asarray(alpha, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if alpha.shape[0] != features.shape[0]:
        raise ValueError(f"{alpha.shape[0]} weights for {features.shape[0]} channels")
    weighted = np.tensordot(alpha, features, axes=1)
    if activation == "abs":
        return np.abs(weighted)
    if activation == "relu":
        return np.maximum(weighted, 0.0)
    raise ValueError(f"unknown activation {activation!r} (expected 'abs' or 'relu')")


def to_saliency_map(raw: np.ndarray, output_size: int) -> SaliencyMap:
    """Upsample a non-negative feature-resolution map and L1-normalize it.

    An identically-zero map (untrained or saturated classifier) falls back to
    the uniform map with a warning, so downstream weighting degrades to a plain
    mean instead of zeroing every score.
    """
    upsampled = bilinear_resize(np.asarray(raw, dtype=np.float64), output_size, output_size)
    mass = float(upsampled.sum())
    if mass <= 0.0:
        warnings.warn("saliency map is identically zero; falling back to the uniform map")
        uniform = np.full((output_size, output_size), 1.0 / (output_size * output_size))
        return SaliencyMap(values=uniform, l1_mass=mass, degenerate=True)
    return SaliencyMap(values=upsampled / mass, l1_mass=mass)


def _branch(model: CnnModel, image: np.ndarray, activation: str) -> np.ndarray:
    alpha = compute_alpha(model, image)
    with torch.no_grad():
        features = model.features(_to_batch(image, model))[0].numpy()
    return roi_map(alpha, features, activation)


def spade_roi(model: CnnModel, u: np.ndarray, u_hat: np.ndarray) -> SaliencyMap:
    """Dual-branch ROI: Abs branch from the input, ReLU branch from its
    reconstruction (each branch uses its own forward pass and weights), summed
    at feature resolution, upsampled once, normalized once."""
    raw = _branch(model, u, "abs") + _branch(model, u_hat, "relu")
    return to_saliency_map(raw, model.config.input_size)


def naive_roi(model: CnnModel, u: np.ndarray) -> np.ndarray:
    """Input-only ReLU map, upsampled, deliberately unnormalized (the ablation
    baseline's weighting)."""
    raw = _branch(model, u, "relu")
    return bilinear_resize(raw, model.config.input_size, model.config.input_size)


# ---------------------------------------------------------------------------
# Overlay rendering
# ---------------------------------------------------------------------------

# Fixed blue->cyan->yellow->red lookup table (piecewise linear between anchors),
# kept in-code so overlay bytes never depend on a plotting library's palette.
_LUT_ANCHORS = [
    (0.00, (0, 0, 128)),
    (0.25, (0, 64, 255)),
    (0.50, (0, 255, 255)),
    (0.75, (255, 255, 0)),
    (1.00, (255, 0, 0)),
]


def _build_lut() -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.float64)
    xs = np.array([a[0] for a in _LUT_ANCHORS])
    cols = np.array([a[1] for a in _LUT_ANCHORS], dtype=np.float64)
    t = np.linspace(0.0, 1.0, 256)
    for c in range(3):
        lut[:, c] = np.interp(t, xs, cols[:, c])
    return np.clip(np.rint(lut), 0, 255).astype(np.uint8)


HEAT_LUT = _build_lut()


def colorize(values: np.ndarray) -> np.ndarray:
    """Map a non-negative array to RGB via the fixed LUT (scaled by its max)."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    idx = np.clip(np.rint(scaled * 255), 0, 255).astype(np.intp)
    return HEAT_LUT[idx]


def render_overlay(u: np.ndarray, saliency: SaliencyMap | np.ndarray, path: str | Path) -> Path:
    """Write the grayscale input blended 50/50 with the color-mapped saliency."""
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    u = np.asarray(u)
    if u.shape != values.shape:
        raise ValueError(f"image {u.shape} and saliency {values.shape} shapes differ")
    gray = u.astype(np.float64) * (255.0 if u.dtype != np.uint8 and u.max() <= 1 else 1.0)
    gray_rgb = np.repeat(gray[:, :, None], 3, axis=2)
    heat_rgb = colorize(values).astype(np.float64)
    blended = np.clip(np.rint(0.5 * gray_rgb + 0.5 * heat_rgb), 0, 255).astype(np.uint8)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    Image.fromarray(blended, mode="RGB").save(buf, format="PNG")
    out.write_bytes(buf.getvalue())
    return out
