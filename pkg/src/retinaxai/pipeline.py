"""Proposals -> few-shot typing -> detections, plus the default model bundle."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import ndimage

from . import detector as D
from .detector import BBox
from .fewshot import (
    DEFAULT_SHOTS,
    PrototypeSet,
    RegionError,
    build_prototypes,
    classify_embedding,
    crop_bounds,
    embed_region,
    support_from_scenes,
)
from .lesions import LesionClass
from .net import default_spec, init_weights
from .synth import generate_scene

SCORE_THRESHOLD = 0.5
CLASS_NMS_IOU = 0.2
FIELD_THRESHOLD = 0.1  # red-channel level separating the fundus field from the black surround
FIELD_EROSION = 3  # px shaved off the field so the dark rim is not read as a lesion
BACKBONE_SEED = 0
DEFAULT_WEIGHTS = "default_weights.rxpw"

# disjoint seed ranges for the synthetic train / support / held-out suites
TRAIN_SEEDS = tuple(range(1000, 1020))
SUPPORT_SEEDS = tuple(range(2000, 2005))
EVAL_SEEDS = tuple(range(5000, 5020))


@dataclass(frozen=True)
class Detection:
    box: BBox
    lesion_class: LesionClass
    score: float

    def as_tuple(self):
        return (self.box, self.lesion_class, self.score)


def field_mask(image) -> np.ndarray:
    """Boolean [H, W] mask of the circular fundus field.

    Thresholds the red channel (every lesion type keeps some red, the black
    surround does not), fills holes so dark lesions stay inside, then erodes
    by ``FIELD_EROSION`` px to drop the rim.
    """
    mask = ndimage.binary_fill_holes(np.asarray(image)[0] > FIELD_THRESHOLD)
    return ndimage.binary_erosion(mask, iterations=FIELD_EROSION) if FIELD_EROSION else mask


def _in_field(mask, box: BBox) -> bool:
    y0, y1, x0, x1 = crop_bounds(box, *mask.shape)
    return bool(mask[y0:y1, x0:x1].all())


def class_nms(detections, iou_threshold: float = CLASS_NMS_IOU) -> list[Detection]:
    """Greedy suppression applied within each lesion class; output stays score-sorted."""
    keep = []
    for cls in LesionClass:
        idx = [i for i, d in enumerate(detections) if d.lesion_class == cls]
        if not idx:
            continue
        boxes = np.stack([detections[i].box.as_array() for i in idx])
        scores = np.array([detections[i].score for i in idx])
        keep.extend(idx[k] for k in D.nms_array(boxes, scores, iou_threshold))
    keep.sort(key=lambda i: (-detections[i].score, i))
    return [detections[i] for i in keep]


def detect(spec, weights, prototypes: PrototypeSet, image, score_threshold: float = SCORE_THRESHOLD,
           features=None, class_nms_iou: float = CLASS_NMS_IOU) -> list[Detection]:
    """Typed lesion detections for one image.

    Proposals scoring at least ``score_threshold`` whose box lies inside the
    fundus field are typed by nearest prototype, then suppressed per class.
    """
    image = np.asarray(image)
    _, H, W = image.shape
    if features is None:
        features = D.backbone_features(spec, weights, image)
    boxes, scores = D.propose_from_features(features, weights["rpn.weight"], weights["rpn.bias"], H, W)
    mask = field_mask(image)
    out = []
    for b, s in zip(boxes, scores):
        if s < score_threshold:
            break  # proposals come sorted by score
        box = BBox(*map(float, b))
        if not _in_field(mask, box):
            continue
        try:
            emb = embed_region(image, box)
        except RegionError:
            continue
        cls, _ = classify_embedding(emb.vector, prototypes)
        out.append(Detection(box, cls, float(s)))
    return class_nms(out, class_nms_iou)


def backbone_weights(seed: int = BACKBONE_SEED) -> dict:
    spec = default_spec()
    weights = init_weights(spec, seed)
    weights.update(D.zero_head(spec.layers[spec.tap_layer].out_channels))
    return weights


def default_weights_path():
    return resources.files("retinaxai") / "data" / DEFAULT_WEIGHTS


def load_default_weights() -> dict:
    from .io import read_weights_bytes

    return read_weights_bytes(default_weights_path().read_bytes())


def default_prototypes(shots: int = DEFAULT_SHOTS, seeds=SUPPORT_SEEDS) -> PrototypeSet:
    """Prototypes from the first ``shots`` planted lesions per class of the support scenes."""
    return build_prototypes(support_from_scenes([generate_scene(s) for s in seeds], shots))
