"""Per-class detection sensitivity against planted ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import iou_matrix
from .lesions import LesionClass

EVAL_IOU = 0.3

# row labels used when rendering the table
TABLE_NAMES = {
    LesionClass.MICROANEURYSM: "Microaneurysm",
    LesionClass.DOT_BLOT_HEMORRHAGE: "Hemorrhage",
    LesionClass.HARD_EXUDATE: "Hard exudates",
    LesionClass.COTTON_WOOL_SPOT: "Soft exudates",
}


@dataclass(frozen=True)
class SensitivityRow:
    lesion_class: LesionClass
    manual_count: int
    detected_true_positives: int

    def __post_init__(self):
        if not 0 <= self.detected_true_positives <= self.manual_count:
            raise ValueError(f"need 0 <= TP <= GT, got {self.detected_true_positives}/{self.manual_count}")

    @property
    def sensitivity(self):
        if self.manual_count == 0:
            return None
        return self.detected_true_positives / self.manual_count


def match_scene(detections, ground_truth, iou_threshold: float = EVAL_IOU) -> list:
    """Greedy one-to-one matching for one scene.

    ``detections`` are ``(BBox, LesionClass, score)`` and ``ground_truth`` are
    ``(BBox, LesionClass)``. Detections are visited by descending score; each
    takes the unmatched same-class ground truth with the highest IoU, if that
    IoU reaches the threshold. Returns ``matched[g] -> detection index or -1``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou threshold must be in (0, 1), got {iou_threshold}")
    matched = [-1] * len(ground_truth)
    if not detections or not ground_truth:
        return matched
    det_boxes = np.stack([d[0].as_array() for d in detections])
    gt_boxes = np.stack([g[0].as_array() for g in ground_truth])
    table = iou_matrix(det_boxes, gt_boxes)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][2], i))
    for i in order:
        best, best_iou = -1, iou_threshold
        for g, (_, gcls) in enumerate(ground_truth):
            if matched[g] >= 0 or gcls != detections[i][1]:
                continue
            if table[i, g] >= best_iou and (best < 0 or table[i, g] > table[i, best]):
                best, best_iou = g, table[i, g]
        if best >= 0:
            matched[best] = i
    return matched


def match_and_score(detections_per_scene, ground_truth_per_scene, iou_threshold: float = EVAL_IOU):
    gt_count = {c: 0 for c in LesionClass}
    tp_count = {c: 0 for c in LesionClass}
    for dets, gts in zip(detections_per_scene, ground_truth_per_scene, strict=True):
        matched = match_scene(dets, gts, iou_threshold)
        for (_, cls), m in zip(gts, matched):
            gt_count[cls] += 1
            tp_count[cls] += m >= 0
    return [SensitivityRow(c, gt_count[c], tp_count[c]) for c in LesionClass]


def format_sensitivity(row: SensitivityRow) -> str:
    if row.manual_count == 0:
        return "n/a"
    # round half up on the exact ratio, not on a binary float
    tenths = (2000 * row.detected_true_positives + row.manual_count) // (2 * row.manual_count)
    return f"{tenths // 10}.{tenths % 10}% ({row.detected_true_positives}/{row.manual_count})"


def sensitivity_table(rows, names=TABLE_NAMES) -> str:
    header = ("DR lesions", "Count in manual results", "Sensitivity")
    body = [(names.get(r.lesion_class, r.lesion_class.value), str(r.manual_count), format_sensitivity(r)) for r in rows]
    widths = [max(len(line[k]) for line in [header, *body]) for k in range(3)]
    rule = "-" * (sum(widths) + 4)

    def fmt(line):
        return f"{line[0]:<{widths[0]}}  {line[1]:>{widths[1]}}  {line[2]:<{widths[2]}}".rstrip()

    return "\n".join([rule, fmt(header), rule, *(fmt(line) for line in body), rule]) + "\n"
