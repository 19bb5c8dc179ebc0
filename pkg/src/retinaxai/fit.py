"""Full-batch gradient descent for the 1x1 proposal head.

The backbone stays frozen. Each training scene contributes all of its positive
anchors plus a fixed, seeded sample of negatives (the rest are ignored), as in
Faster R-CNN minibatch construction. The head is optimised in whitened
feature coordinates and folded back into a plain 1x1 conv at the end, so the
returned weights act on raw features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detector as D


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 200
    learning_rate: float = 0.05
    objectness_lr_scale: float = 400.0
    negatives_per_scene: int = 1024
    hard_negatives_per_scene: int = 0
    sample_seed: int = 0
    pos_iou: float = D.POS_IOU
    neg_iou: float = D.NEG_IOU


@dataclass
class FitResult:
    head: dict
    losses: list = field(default_factory=list)  # LossBreakdown per epoch, before the update

    @property
    def initial_loss(self) -> float:
        return self.losses[0].total

    @property
    def final_loss(self) -> float:
        return self.losses[-1].total


@dataclass
class TrainingSet:
    """Labeled anchors gathered from a list of scenes, ready for GD."""

    features: np.ndarray  # [n, K] raw features at each labeled anchor's cell
    rows: np.ndarray  # [n] anchor slot a in 0..A-1
    labels: np.ndarray  # [n] gt index (>= 0) or detector.NEG
    gt_deltas: np.ndarray  # [n, 4]
    feature_mean: np.ndarray  # objectness block, statistics of all labeled anchors
    whitener: np.ndarray  # [K, K]; z = whitener @ (f - mean)
    reg_mean: np.ndarray  # regression block, statistics of the positives
    reg_whitener: np.ndarray
    num_anchors: int

    def standardized(self) -> np.ndarray:
        return (self.features - self.feature_mean) @ self.whitener.T

    def standardized_reg(self) -> np.ndarray:
        return (self.features - self.reg_mean) @ self.reg_whitener.T


scene_features = D.backbone_features


def sample_labels(labels: np.ndarray, n_neg: int, rng, best_iou=None, n_hard: int = 0) -> np.ndarray:
    """Keep every positive plus seeded negatives; mark the rest ignored.

    With ``best_iou`` given, up to ``n_hard`` negatives are drawn from those
    touching a lesion (0 < IoU), and ``n_neg`` from the remainder.
    """
    out = labels.copy()
    neg = np.flatnonzero(labels == D.NEG)
    pools = [(neg, n_neg)]
    if best_iou is not None:
        near = best_iou[neg] > 0.0
        pools = [(neg[near], n_hard), (neg[~near], n_neg)]
    keep = []
    for pool, n in pools:
        keep.append(pool if len(pool) <= n else rng.choice(pool, size=n, replace=False))
    out[np.setdiff1d(neg, np.concatenate(keep))] = D.IGNORE
    return out


def build_training_set(spec, weights, scenes, config: FitConfig = FitConfig(), features=None) -> TrainingSet:
    rng = np.random.default_rng(config.sample_seed)
    A = len(D.ANCHOR_SCALES) * len(D.ANCHOR_RATIOS)
    feats, rows, labels, deltas = [], [], [], []
    for i, scene in enumerate(scenes):
        F = features[i] if features is not None else scene_features(spec, weights, scene.image)
        K, h, w = F.shape
        flat = F.reshape(K, -1)
        _, H, W = scene.image.shape
        anchors = D.anchor_array(h, w, H, W)
        lab, table = D.match_anchors(anchors, scene.boxes, config.pos_iou, config.neg_iou)
        best = table.max(axis=1) if table.shape[1] else np.zeros(len(lab))
        lab = sample_labels(lab, config.negatives_per_scene, rng, best, config.hard_negatives_per_scene)
        idx = np.flatnonzero(lab != D.IGNORE)
        cells, slots = np.divmod(idx, A)
        feats.append(flat[:, cells].T)
        rows.append(slots)
        labels.append(lab[idx])
        d = np.zeros((len(idx), 4))
        pos = lab[idx] >= 0
        if pos.any():
            d[pos] = D.encode_array(anchors[idx[pos]], scene.boxes[lab[idx[pos]]])
        deltas.append(d)
    labels = np.concatenate(labels)
    if not (labels >= 0).any():
        raise ValueError("training scenes contain no lesions")
    feats = np.concatenate(feats)
    mean, whitener = whitening(feats)
    reg_mean, reg_whitener = whitening(feats[labels >= 0])
    return TrainingSet(
        features=feats,
        rows=np.concatenate(rows),
        labels=labels,
        gt_deltas=np.concatenate(deltas),
        feature_mean=mean,
        whitener=whitener,
        reg_mean=reg_mean,
        reg_whitener=reg_whitener,
        num_anchors=A,
    )


def whitening(features: np.ndarray, eps: float = 1e-6):
    """Mean and symmetric (ZCA) whitening matrix of a feature sample."""
    mean = features.mean(0)
    cov = np.atleast_2d(np.cov(features - mean, rowvar=False, bias=True))
    vals, vecs = np.linalg.eigh(cov)
    scale = 1.0 / np.sqrt(np.maximum(vals, 0.0) + eps * max(vals.max(), 1e-12))
    return mean, (vecs * scale) @ vecs.T


def _inputs(ts: TrainingSet, z=None):
    """Per-output whitened inputs [n, 5, K]: objectness coordinates then 4x regression."""
    z_obj, z_reg = z if z is not None else (ts.standardized(), ts.standardized_reg())
    return np.concatenate([z_obj[:, None, :], np.repeat(z_reg[:, None, :], 4, axis=1)], axis=1)


def head_outputs(ts: TrainingSet, weight: np.ndarray, bias: np.ndarray, z=None) -> D.RpnOutput:
    """Logits and deltas at the labeled anchors for a whitened-coordinate head.

    ``weight`` is [A, 5, K] (slot a, output j), ``bias`` is [A, 5]; ``z`` is
    the (objectness, regression) pair of whitened feature matrices.
    """
    x = _inputs(ts, z)
    out = np.einsum("njk,njk->nj", weight[ts.rows], x) + bias[ts.rows]
    return D.RpnOutput(logits=out[:, 0], deltas=out[:, 1:])


def loss_and_grad(ts: TrainingSet, weight, bias, z=None):
    """Composite loss and its gradient w.r.t. the whitened-coordinate head (weight, bias)."""
    x = _inputs(ts, z)
    out = np.einsum("njk,njk->nj", weight[ts.rows], x) + bias[ts.rows]
    loss, (g_logit, g_delta) = D.rpn_loss_and_grad(
        D.RpnOutput(logits=out[:, 0], deltas=out[:, 1:]), ts.labels, ts.gt_deltas, "composite"
    )
    g = np.concatenate([g_logit[:, None], g_delta], axis=1)  # [n, 5]
    gw = np.zeros_like(weight)
    gb = np.zeros_like(bias)
    np.add.at(gw, ts.rows, g[:, :, None] * x)
    np.add.at(gb, ts.rows, g)
    return loss, gw, gb


def fold_head(weight, bias, ts: TrainingSet) -> dict:
    """Express a whitened-coordinate head as a raw-feature 1x1 conv (``rpn.*`` entries)."""
    A, _, K = weight.shape
    w_raw = np.empty_like(weight)
    w_raw[:, 0] = weight[:, 0] @ ts.whitener
    w_raw[:, 1:] = weight[:, 1:] @ ts.reg_whitener
    b_raw = bias.copy()
    b_raw[:, 0] -= w_raw[:, 0] @ ts.feature_mean
    b_raw[:, 1:] -= w_raw[:, 1:] @ ts.reg_mean
    return {
        "rpn.weight": w_raw.reshape(5 * A, K, 1, 1).astype(np.float32),
        "rpn.bias": b_raw.reshape(5 * A).astype(np.float32),
    }


def fit_rpn_head(spec, weights, scenes, config: FitConfig = FitConfig(), features=None, log=None) -> FitResult:
    """Plain full-batch gradient descent on the composite proposal loss."""
    ts = build_training_set(spec, weights, scenes, config, features)
    K = ts.features.shape[1]
    z = (ts.standardized(), ts.standardized_reg())
    step = np.full((1, 5, 1), config.learning_rate)
    step[0, 0, 0] *= config.objectness_lr_scale
    weight = np.zeros((ts.num_anchors, 5, K))
    bias = np.zeros((ts.num_anchors, 5))
    losses = []
    for epoch in range(config.epochs):
        loss, gw, gb = loss_and_grad(ts, weight, bias, z)
        if not np.isfinite(loss.total):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}")
        losses.append(loss)
        if log is not None:
            log(epoch, loss)
        weight -= step * gw
        bias -= step[:, :, 0] * gb
    final, _, _ = loss_and_grad(ts, weight, bias, z)
    if not np.isfinite(final.total):
        raise DivergenceError(f"loss became non-finite at epoch {config.epochs}")
    losses.append(final)
    limit = np.finfo(np.float32).max
    if not (np.all(np.abs(weight) < limit) and np.all(np.abs(bias) < limit)):
        raise DivergenceError(f"head weights left float32 range by epoch {config.epochs}")
    with np.errstate(over="ignore"):
        head = fold_head(weight, bias, ts)
    if not all(np.all(np.isfinite(v)) for v in head.values()):
        raise DivergenceError(f"folded head weights left float32 range by epoch {config.epochs}")
    return FitResult(head=head, losses=losses)
