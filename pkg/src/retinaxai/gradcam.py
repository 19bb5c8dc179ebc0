"""Grad-CAM maps, upsampling, colorization and overlay blending.

Channel weights follow the original Grad-CAM definition: the spatial mean of
dS_c/dA^k. The display map is min-max normalized; constant nonzero maps become
all ones and all-zero maps stay zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T

DEFAULT_LAMBDA = 0.4

# (position, r, g, b): blue -> cyan -> green -> yellow -> red
COLORMAP_STOPS = np.array(
    [
        [0.00, 0.0, 0.0, 1.0],
        [0.25, 0.0, 1.0, 1.0],
        [0.50, 0.0, 1.0, 0.0],
        [0.75, 1.0, 1.0, 0.0],
        [1.00, 1.0, 0.0, 0.0],
    ]
)


@dataclass
class CamMap:
    values: np.ndarray  # [1, h, w], >= 0
    class_index: int


@dataclass
class Heatmap:
    values: np.ndarray  # [1, H0, W0] in [0, 1]
    rgb: np.ndarray  # [3, H0, W0]


@dataclass
class OverlayImage:
    rgb: np.ndarray
    lambda_used: float


def compute_cam(tap_activation, tap_gradient, class_index: int) -> CamMap:
    A = T.as_tensor(tap_activation)
    G = T.as_tensor(tap_gradient)
    if A.shape != G.shape:
        raise T.DimensionError(f"activation {A.shape} and gradient {G.shape} differ")
    alpha = T.global_avg_pool(G).astype(np.float64)
    raw = np.tensordot(alpha, A.astype(np.float64), axes=(0, 0))
    raw = np.maximum(raw, 0.0)[None].astype(A.dtype)
    return CamMap(values=raw, class_index=class_index)


def normalize(values: np.ndarray) -> np.ndarray:
    v = values.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi == 0.0 and lo == 0.0:
        out = np.zeros_like(v)
    elif hi == lo:
        out = np.ones_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return out.astype(np.float32)


def colorize(values) -> np.ndarray:
    """Map [1, H, W] values in [0, 1] to a [3, H, W] rgb image via the stop table."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = v[0]
    if v.min() < 0.0 or v.max() > 1.0:
        warnings.warn("colorize input outside [0, 1]; clamping", RuntimeWarning, stacklevel=2)
        v = np.clip(v, 0.0, 1.0)
    pos = COLORMAP_STOPS[:, 0]
    rgb = np.stack([np.interp(v, pos, COLORMAP_STOPS[:, k]) for k in (1, 2, 3)])
    return rgb.astype(np.float32)


def upsample_cam(cam: CamMap, out_h: int, out_w: int) -> Heatmap:
    up = T.resize_bilinear(cam.values, out_h, out_w)
    values = normalize(up)
    return Heatmap(values=values, rgb=colorize(values))


def overlay(heatmap: Heatmap, image_rgb, lam: float = DEFAULT_LAMBDA) -> OverlayImage:
    """``lam * heatmap.rgb + (1 - lam) * image``, evaluated in float64."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    img = T.as_tensor(image_rgb)
    if img.shape != heatmap.rgb.shape:
        raise T.DimensionError(f"image {img.shape} and heatmap {heatmap.rgb.shape} differ")
    out = lam * heatmap.rgb.astype(np.float64) + (1.0 - lam) * img.astype(np.float64)
    return OverlayImage(rgb=out.astype(np.float32), lambda_used=float(lam))


def explain(spec, weights, image, class_index: int, lam: float = DEFAULT_LAMBDA):
    """Full Grad-CAM path: forward, backward to tap, map, upsample, blend."""
    from .net import forward, grad_score_wrt_tap, preprocess

    image = T.as_tensor(image)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    trace = forward(spec, weights, preprocess(image))
    grad = grad_score_wrt_tap(spec, weights, trace, class_index)
    cam = compute_cam(trace.tap_activation, grad, class_index)
    heat = upsample_cam(cam, image.shape[1], image.shape[2])
    return cam, heat, overlay(heat, image, lam), trace
