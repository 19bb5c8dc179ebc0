"""Synthetic fundus-like scenes with planted, annotated lesions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import BBox
from .lesions import LesionClass

IMAGE_SIZE = 256
MAX_ATTEMPTS = 10_000
FIELD_MARGIN = 4.0
BOX_GAP = 2.0

# base rgb and size range (px) per class
APPEARANCE = {
    LesionClass.MICROANEURYSM: dict(color=(0.42, 0.05, 0.05), size=(3.0, 6.0)),
    LesionClass.DOT_BLOT_HEMORRHAGE: dict(color=(0.26, 0.02, 0.03), size=(8.0, 16.0)),
    LesionClass.HARD_EXUDATE: dict(color=(0.98, 0.86, 0.22), size=(6.0, 14.0)),
    LesionClass.COTTON_WOOL_SPOT: dict(color=(0.94, 0.91, 0.84), size=(10.0, 20.0)),
}
BACKGROUND = np.array([0.72, 0.33, 0.15])
VESSEL = np.array([0.55, 0.16, 0.10])

DEFAULT_COUNTS = {
    LesionClass.MICROANEURYSM: 5,
    LesionClass.DOT_BLOT_HEMORRHAGE: 3,
    LesionClass.HARD_EXUDATE: 4,
    LesionClass.COTTON_WOOL_SPOT: 2,
}


class PlacementError(RuntimeError):
    pass


@dataclass
class SyntheticScene:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    lesions: list = field(default_factory=list)  # [(BBox, LesionClass)]
    seed: int = 0

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b.as_array() for b, _ in self.lesions]).reshape(-1, 4)

    @property
    def classes(self) -> list:
        return [c for _, c in self.lesions]


def _field(size: int):
    c = size / 2.0
    return c, c, size / 2.0 - 8.0


def _background(rng, size: int) -> np.ndarray:
    cx, cy, radius = _field(size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = np.hypot(xx - cx, yy - cy) / radius
    theta = rng.uniform(0, 2 * np.pi)
    ramp = ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) / radius
    shade = 0.92 + 0.08 * ramp - 0.12 * r**2
    img = BACKGROUND[:, None, None] * shade[None]
    # vessels: a few smooth sinusoidal arcs radiating from an off-centre disc
    ox = cx + rng.uniform(-0.35, 0.35) * radius
    oy = cy + rng.uniform(-0.2, 0.2) * radius
    for _ in range(int(rng.integers(4, 7))):
        phi = rng.uniform(0, 2 * np.pi)
        amp, freq = rng.uniform(4, 12), rng.uniform(0.01, 0.03)
        t = np.linspace(0, 1.6 * radius, 600)
        px = ox + t * np.cos(phi) - amp * np.sin(freq * t * 2 * np.pi) * np.sin(phi)
        py = oy + t * np.sin(phi) + amp * np.sin(freq * t * 2 * np.pi) * np.cos(phi)
        width = rng.uniform(0.8, 1.4)
        d = np.full((size, size), np.inf)
        for x0, y0 in zip(px[::6], py[::6]):
            lo_x, hi_x = int(max(x0 - 4, 0)), int(min(x0 + 5, size))
            lo_y, hi_y = int(max(y0 - 4, 0)), int(min(y0 + 5, size))
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            sub = np.hypot(xx[lo_y:hi_y, lo_x:hi_x] - x0, yy[lo_y:hi_y, lo_x:hi_x] - y0)
            d[lo_y:hi_y, lo_x:hi_x] = np.minimum(d[lo_y:hi_y, lo_x:hi_x], sub)
        alpha = np.clip(width + 0.5 - d, 0.0, 1.0) * 0.8
        img = img * (1 - alpha) + VESSEL[:, None, None] * alpha
    mask = np.clip(radius + 0.5 - r * radius, 0.0, 1.0)
    img = img * mask + 0.02 * (1 - mask)
    return img


def _render_lesion(img: np.ndarray, box: BBox, cls: LesionClass) -> None:
    size = img.shape[1]
    color = np.array(APPEARANCE[cls]["color"])
    x1, y1, x2, y2 = box.corners()
    lo_x, hi_x = max(int(np.floor(x1)) - 1, 0), min(int(np.ceil(x2)) + 1, size)
    lo_y, hi_y = max(int(np.floor(y1)) - 1, 0), min(int(np.ceil(y2)) + 1, size)
    yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x] + 0.5
    # normalized elliptical radius: 1.0 on the box boundary
    rx, ry = box.w / 2, box.h / 2
    rho = np.hypot((xx - box.cx) / rx, (yy - box.cy) / ry)
    if cls is LesionClass.COTTON_WOOL_SPOT:
        alpha = np.exp(-2.5 * rho**2) * (rho <= 1.0) / 1.0
        alpha = np.clip(alpha * 1.25, 0.0, 1.0)
    else:
        # anti-aliased hard edge, edge width ~1px
        alpha = np.clip((1.0 - rho) * min(rx, ry) + 0.5, 0.0, 1.0)
    sub = img[:, lo_y:hi_y, lo_x:hi_x]
    img[:, lo_y:hi_y, lo_x:hi_x] = sub * (1 - alpha) + color[:, None, None] * alpha


def _sample_box(rng, cls: LesionClass, size: int) -> BBox:
    lo, hi = APPEARANCE[cls]["size"]
    w = rng.uniform(lo, hi)
    if cls is LesionClass.MICROANEURYSM:
        h = w
    else:
        h = float(np.clip(w * rng.uniform(0.75, 1.25), lo, hi))
    cx, cy, radius = _field(size)
    reach = radius - FIELD_MARGIN - np.hypot(w, h) / 2
    r = reach * np.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * np.pi)
    return BBox(cx + r * np.cos(a), cy + r * np.sin(a), w, h)


def _separated(box: BBox, placed: list) -> bool:
    x1, y1, x2, y2 = box.corners()
    for other, _ in placed:
        a1, b1, a2, b2 = other.corners()
        if x1 < a2 + BOX_GAP and a1 < x2 + BOX_GAP and y1 < b2 + BOX_GAP and b1 < y2 + BOX_GAP:
            return False
    return True


def generate_scene(seed: int, counts=None, size: int = IMAGE_SIZE, noise: float = 0.01) -> SyntheticScene:
    """Deterministic scene for ``seed`` with ``counts[class]`` lesions of each class."""
    counts = DEFAULT_COUNTS if counts is None else counts
    rng = np.random.default_rng(seed)
    img = _background(rng, size)
    todo = [cls for cls in LesionClass for _ in range(int(counts.get(cls, 0)))]
    # place large lesions first
    todo.sort(key=lambda c: -APPEARANCE[c]["size"][1])
    placed = []
    attempts = 0
    for cls in todo:
        while True:
            attempts += 1
            if attempts > MAX_ATTEMPTS:
                raise PlacementError(
                    f"could not place {len(todo)} lesions in {MAX_ATTEMPTS} attempts; lower the counts"
                )
            box = _sample_box(rng, cls, size)
            if _separated(box, placed):
                placed.append((box, cls))
                break
    for box, cls in placed:
        _render_lesion(img, box, cls)
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SyntheticScene(image=img, lesions=placed, seed=seed)


def rotate_scene_180(scene: SyntheticScene) -> SyntheticScene:
    _, H, W = scene.image.shape
    img = np.ascontiguousarray(scene.image[:, ::-1, ::-1])
    lesions = [(BBox(W - b.cx, H - b.cy, b.w, b.h), c) for b, c in scene.lesions]
    return SyntheticScene(image=img, lesions=lesions, seed=scene.seed)
