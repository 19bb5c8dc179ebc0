"""Few-shot lesion typing with class prototypes over color/texture statistics.

Each region is summarised by a 31-dim vector::

    [mean_r, mean_g, mean_b, var_r, var_g, var_b,
     hist_r[8], hist_g[8], hist_b[8], mean_gradient_magnitude]

Prototypes are per-class means of support embeddings; queries go to the
nearest prototype in Euclidean distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import BBox
from .lesions import LesionClass

EMBED_DIM = 31
HIST_BINS = 8
DEFAULT_SHOTS = 5


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class RegionEmbedding:
    vector: np.ndarray
    box: BBox


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: dict  # LesionClass -> np.ndarray[31]
    support_counts: dict  # LesionClass -> int

    def matrix(self) -> np.ndarray:
        return np.stack([self.prototypes[c] for c in LesionClass])


def crop_bounds(box: BBox, image_h: int, image_w: int) -> tuple[int, int, int, int]:
    """Pixel rows/cols covered by ``box`` after clipping: (y0, y1, x0, x1), half-open."""
    x1, y1, x2, y2 = box.corners()
    x0 = max(int(np.floor(x1)), 0)
    y0 = max(int(np.floor(y1)), 0)
    xe = min(int(np.ceil(x2)), image_w)
    ye = min(int(np.ceil(y2)), image_h)
    return y0, ye, x0, xe


def embed_crop(crop: np.ndarray) -> np.ndarray:
    c = np.asarray(crop, dtype=np.float64)
    if c.ndim != 3 or c.shape[0] != 3:
        raise RegionError(f"crop must be [3, h, w], got {c.shape}")
    _, h, w = c.shape
    if h < 2 or w < 2:
        raise RegionError(f"crop {h}x{w} too small; need at least 2x2 pixels")
    flat = c.reshape(3, -1)
    mean = flat.mean(1)
    var = flat.var(1)
    bins = np.clip(np.floor(flat * HIST_BINS), 0, HIST_BINS - 1).astype(np.int64)
    hist = np.stack([np.bincount(b, minlength=HIST_BINS) for b in bins]) / flat.shape[1]
    lum = c.mean(0)
    gx = lum[:-1, 1:] - lum[:-1, :-1]
    gy = lum[1:, :-1] - lum[:-1, :-1]
    grad = np.sqrt(gx**2 + gy**2).mean()
    return np.concatenate([mean, var, hist.ravel(), [grad]])


def embed_region(image, box: BBox) -> RegionEmbedding:
    image = np.asarray(image)
    _, H, W = image.shape
    y0, y1, x0, x1 = crop_bounds(box, H, W)
    if (y1 - y0) * (x1 - x0) < 4 or y1 - y0 < 2 or x1 - x0 < 2:
        raise RegionError(f"degenerate region {box} in {H}x{W} image")
    return RegionEmbedding(vector=embed_crop(image[:, y0:y1, x0:x1]), box=box)


def build_prototypes(support) -> PrototypeSet:
    """``support`` is an iterable of ``(image, BBox, LesionClass)``."""
    sums: dict = {}
    counts: dict = {}
    for image, box, cls in support:
        v = embed_region(image, box).vector
        sums[cls] = sums.get(cls, 0.0) + v
        counts[cls] = counts.get(cls, 0) + 1
    missing = [c.value for c in LesionClass if c not in counts]
    if missing:
        raise ValueError(f"support set has no examples of: {', '.join(missing)}")
    protos = {c: sums[c] / counts[c] for c in LesionClass}
    return PrototypeSet(prototypes=protos, support_counts=dict(counts))


def classify_embedding(vector: np.ndarray, prototypes: PrototypeSet):
    """Nearest prototype; ties go to the earlier class in enum order."""
    d = np.sqrt(((prototypes.matrix() - np.asarray(vector)[None, :]) ** 2).sum(1))
    k = int(np.argmin(d))
    return list(LesionClass)[k], {c: float(d[i]) for i, c in enumerate(LesionClass)}


def classify_region(embedding: RegionEmbedding, prototypes: PrototypeSet):
    return classify_embedding(embedding.vector, prototypes)


def support_from_scenes(scenes, shots: int = DEFAULT_SHOTS) -> list:
    """First ``shots`` planted lesions of each class, scanning scenes in order."""
    picked = {c: [] for c in LesionClass}
    for scene in scenes:
        for box, cls in scene.lesions:
            if len(picked[cls]) < shots:
                picked[cls].append((scene.image, box, cls))
        if all(len(v) >= shots for v in picked.values()):
            break
    return [item for c in LesionClass for item in picked[c]]
