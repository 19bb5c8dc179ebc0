"""RPN-style lesion proposals: anchors, box deltas, matching, loss, NMS.

Boxes are center format ``(cx, cy, w, h)`` in pixels. Array variants work on
``[N, 4]`` arrays of the same layout; the scalar ``BBox`` API wraps them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .net import forward, preprocess, relu_features

ANCHOR_SCALES = (4.0, 8.0, 16.0)
ANCHOR_RATIOS = (0.5, 1.0, 2.0)
POS_IOU = 0.7
NEG_IOU = 0.3
NMS_IOU = 0.5
MIN_SIZE = 2.0
PRE_NMS_TOP_N = 2000
POST_NMS_TOP_N = 300

# cap on predicted log-size deltas when decoding proposals (exp overflow guard)
DELTA_CLAMP = float(np.log(1000.0 / 16))

NEG = -1
IGNORE = -2


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise BoxError(f"box extents must be positive, got w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Anchor:
    box: BBox
    scale_index: int
    ratio_index: int
    grid_y: int
    grid_x: int


class RpnOutput(NamedTuple):
    logits: np.ndarray  # [N] objectness logits
    deltas: np.ndarray  # [N, 4]

    @property
    def objectness(self) -> np.ndarray:
        return T.sigmoid(self.logits)


class LossBreakdown(NamedTuple):
    reg: float
    cls: float
    total: float
    n_pos: int
    no_positives: bool = False


def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:] / 2
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([(c[:, :2] + c[:, 2:]) / 2, c[:, 2:] - c[:, :2]], axis=1)


def anchor_array(feat_h, feat_w, image_h, image_w, scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS) -> np.ndarray:
    """[feat_h * feat_w * S * R, 4] anchors ordered by (grid_y, grid_x, scale, ratio)."""
    if not len(scales) or not len(ratios):
        raise ValueError("scales and ratios must be nonempty")
    sy, sx = image_h / feat_h, image_w / feat_w
    s = np.asarray(scales, dtype=np.float64)[:, None]
    r = np.sqrt(np.asarray(ratios, dtype=np.float64))[None, :]
    wh = np.stack([(s * r).ravel(), (s / r).ravel()], axis=1)  # [S*R, 2]
    gy, gx = np.meshgrid(np.arange(feat_h), np.arange(feat_w), indexing="ij")
    centers = np.stack([(gx.ravel() + 0.5) * sx, (gy.ravel() + 0.5) * sy], axis=1)  # [G, 2]
    G, A = len(centers), len(wh)
    out = np.empty((G, A, 4))
    out[:, :, :2] = centers[:, None, :]
    out[:, :, 2:] = wh[None, :, :]
    return out.reshape(G * A, 4)


def generate_anchors(feat_h, feat_w, image_h, image_w, scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS) -> list[Anchor]:
    arr = anchor_array(feat_h, feat_w, image_h, image_w, scales, ratios)
    S, R = len(scales), len(ratios)
    anchors = []
    for idx, row in enumerate(arr):
        cell, a = divmod(idx, S * R)
        gy, gx = divmod(cell, feat_w)
        anchors.append(Anchor(BBox(*map(float, row)), a // R, a % R, gy, gx))
    return anchors


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of center-format box arrays, shape [len(a), len(b)]."""
    ca, cb = to_corners(a), to_corners(b)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if (a[:, 2:] <= 0).any() or (g[:, 2:] <= 0).any():
        raise BoxError("encode_deltas needs positive widths and heights")
    return np.concatenate([(g[:, :2] - a[:, :2]) / a[:, 2:], np.log(g[:, 2:] / a[:, 2:])], axis=1)


def decode_array(anchors: np.ndarray, deltas: np.ndarray, clamp: float | None = None) -> np.ndarray:
    """Exact inverse of ``encode_array``; ``clamp`` caps tw, th before exponentiation."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if (a[:, 2:] <= 0).any():
        raise BoxError("decode_deltas needs positive anchor extents")
    twh = t[:, 2:] if clamp is None else np.minimum(t[:, 2:], clamp)
    return np.concatenate([a[:, :2] + t[:, :2] * a[:, 2:], a[:, 2:] * np.exp(twh)], axis=1)


def encode_deltas(anchor: BBox, gt: BBox) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_array(anchor.as_array(), gt.as_array())[0])


def decode_deltas(anchor: BBox, t) -> BBox:
    return BBox(*(float(v) for v in decode_array(anchor.as_array(), t)[0]))


def match_anchors(anchors: np.ndarray, gts: np.ndarray, pos_iou: float = POS_IOU, neg_iou: float = NEG_IOU):
    """Label each anchor with a gt index (positive), NEG or IGNORE.

    Positive when IoU >= pos_iou with some gt, or when the anchor is the best
    one for a gt: highest IoU, then nearest center, then lowest index.
    Returns ``(labels, iou_table)``.
    """
    if not 0.0 <= neg_iou < pos_iou <= 1.0:
        raise ValueError(f"need 0 <= neg_iou < pos_iou <= 1, got {neg_iou}, {pos_iou}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    if len(gts) == 0:
        return np.full(n, NEG, dtype=np.int64), np.zeros((n, 0))
    table = iou_matrix(anchors, gts)
    best_gt = table.argmax(axis=1)
    best_iou = table[np.arange(n), best_gt]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[best_iou < neg_iou] = NEG
    pos = best_iou >= pos_iou
    labels[pos] = best_gt[pos]
    for j in range(len(gts)):
        col = table[:, j]
        top = col.max()
        if top <= 0.0:
            continue
        cand = np.flatnonzero(col == top)
        dist = np.hypot(*(anchors[cand, :2] - gts[j, :2]).T)
        labels[cand[np.argmin(dist)]] = j
    return labels, table


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    q = np.minimum(ax, 1.0)
    out = np.where(ax < 1.0, 0.5 * q * q, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def rpn_loss(output: RpnOutput, labels, gt_deltas, mode: str = "composite") -> LossBreakdown:
    """Box regression over positives, plus objectness BCE in composite mode.

    reg = (1/N_pos) * sum_pos sum_j smooth_l1(t_ij - t_ij^gt). With no
    positives the regression term is 0 and ``no_positives`` is set.
    """
    loss, _ = rpn_loss_and_grad(output, labels, gt_deltas, mode, want_grad=False)
    return loss


def rpn_loss_and_grad(output: RpnOutput, labels, gt_deltas, mode: str = "composite", want_grad: bool = True):
    """Loss and its gradient w.r.t. (logits, deltas)."""
    if mode not in ("literal", "composite"):
        raise ValueError(f"unknown loss mode {mode!r}")
    labels = np.asarray(labels)
    logits = np.asarray(output.logits, dtype=np.float64)
    deltas = np.asarray(output.deltas, dtype=np.float64).reshape(-1, 4)
    gt_deltas = np.asarray(gt_deltas, dtype=np.float64).reshape(-1, 4)
    pos = labels >= 0
    neg = labels == NEG
    n_pos = int(pos.sum())
    n_lab = n_pos + int(neg.sum())
    if n_lab == 0:
        raise ValueError("rpn_loss needs at least one labeled anchor")
    g_logit = np.zeros_like(logits) if want_grad else None
    g_delta = np.zeros_like(deltas) if want_grad else None
    if n_pos:
        resid = deltas[pos] - gt_deltas[pos]
        reg = float(smooth_l1(resid).sum() / n_pos)
        if want_grad:
            g_delta[pos] = smooth_l1_grad(resid) / n_pos
    else:
        reg = 0.0
    cls = 0.0
    if mode == "composite":
        # -ln(sigmoid(z)) = softplus(-z); -ln(1 - sigmoid(z)) = softplus(z)
        cls = float((_softplus(-logits[pos]).sum() + _softplus(logits[neg]).sum()) / n_lab)
        if want_grad:
            p = T.sigmoid(logits)
            g_logit[pos] = (p[pos] - 1.0) / n_lab
            g_logit[neg] = p[neg] / n_lab
    loss = LossBreakdown(reg=reg, cls=cls, total=reg + cls, n_pos=n_pos, no_positives=n_pos == 0)
    return loss, (g_logit, g_delta)


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = NMS_IOU) -> np.ndarray:
    """Greedy NMS; returns kept indices in visiting order.

    Visiting order is score descending, then cx ascending, then cy ascending.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("nms scores must be finite")
    order = np.lexsort((boxes[:, 1], boxes[:, 0], -scores))
    c = to_corners(boxes)
    areas = (c[:, 2] - c[:, 0]) * (c[:, 3] - c[:, 1])
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        w = np.clip(np.minimum(c[i, 2], c[rest, 2]) - np.maximum(c[i, 0], c[rest, 0]), 0, None)
        h = np.clip(np.minimum(c[i, 3], c[rest, 3]) - np.maximum(c[i, 1], c[rest, 1]), 0, None)
        inter = w * h
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms(detections, iou_threshold: float = NMS_IOU):
    """Greedy NMS over ``[(BBox, score), ...]``; returns the kept pairs."""
    if not detections:
        return []
    boxes = np.stack([b.as_array() for b, _ in detections])
    scores = np.array([s for _, s in detections], dtype=np.float64)
    return [detections[i] for i in nms_array(boxes, scores, iou_threshold)]


def head_channels(num_anchors: int) -> int:
    return 5 * num_anchors


def rpn_head(features: np.ndarray, head_weight: np.ndarray, head_bias: np.ndarray) -> RpnOutput:
    """1x1 conv head; channel ``5a + j`` holds (logit, tx, ty, tw, th)[j] of anchor ``a``."""
    K, h, w = features.shape
    out = head_weight.reshape(head_weight.shape[0], K).astype(np.float64) @ features.reshape(K, -1).astype(np.float64)
    out += head_bias.astype(np.float64)[:, None]
    A = out.shape[0] // 5
    # [5A, h*w] -> [h*w, A, 5] -> anchor order (grid_y, grid_x, anchor)
    out = out.reshape(A, 5, h * w).transpose(2, 0, 1).reshape(-1, 5)
    return RpnOutput(logits=out[:, 0], deltas=out[:, 1:])


def zero_head(num_features: int, num_anchors: int = len(ANCHOR_SCALES) * len(ANCHOR_RATIOS)) -> dict:
    c = head_channels(num_anchors)
    return {
        "rpn.weight": np.zeros((c, num_features, 1, 1), dtype=np.float32),
        "rpn.bias": np.zeros(c, dtype=np.float32),
    }


def clip_boxes(boxes: np.ndarray, image_h: int, image_w: int) -> np.ndarray:
    c = to_corners(boxes)
    c[:, [0, 2]] = np.clip(c[:, [0, 2]], 0, image_w)
    c[:, [1, 3]] = np.clip(c[:, [1, 3]], 0, image_h)
    return from_corners(c)


def propose_from_features(
    features,
    head_weight,
    head_bias,
    image_h,
    image_w,
    pre_nms_top_n: int = PRE_NMS_TOP_N,
    post_nms_top_n: int = POST_NMS_TOP_N,
    nms_iou: float = NMS_IOU,
    min_size: float = MIN_SIZE,
):
    """Decode, clip, size-filter, NMS and truncate; returns (boxes [N,4], scores [N])."""
    _, fh, fw = features.shape
    anchors = anchor_array(fh, fw, image_h, image_w)
    out = rpn_head(features, head_weight, head_bias)
    boxes = clip_boxes(decode_array(anchors, out.deltas, DELTA_CLAMP), image_h, image_w)
    scores = out.objectness
    ok = (boxes[:, 2] >= min_size) & (boxes[:, 3] >= min_size)
    idx = np.flatnonzero(ok)
    # stable top-k with the same tie-break as nms
    order = np.lexsort((boxes[idx, 1], boxes[idx, 0], -scores[idx]))[:pre_nms_top_n]
    idx = idx[order]
    keep = nms_array(boxes[idx], scores[idx], nms_iou)[:post_nms_top_n]
    return boxes[idx[keep]], scores[idx[keep]]


def backbone_features(spec, weights, image) -> np.ndarray:
    """Rectified tap activation of the preprocessed image, [K, h, w] float64."""
    return relu_features(forward(spec, weights, preprocess(image))).astype(np.float64)


def propose(spec, weights, image, **kwargs) -> list[tuple[BBox, float]]:
    image = T.as_tensor(image)
    feats = backbone_features(spec, weights, image)
    boxes, scores = propose_from_features(
        feats, weights["rpn.weight"], weights["rpn.bias"], image.shape[1], image.shape[2], **kwargs
    )
    return [(BBox(*map(float, b)), float(s)) for b, s in zip(boxes, scores)]
