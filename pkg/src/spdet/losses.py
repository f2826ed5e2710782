"""Training objectives: contrastive region-text alignment plus CIoU/DFL box
regression, summed unweighted into the total objective.

All losses are built from tensor primitives so the finite-difference suite
can check every parameter path through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InputError
from .tensor import (
    Tensor,
    amax_rows,
    logsumexp_rows,
    maximum,
    minimum,
    narrow,
    take_flat,
)

STATUS_OK = "ok"
STATUS_NO_POSITIVES = "no-positives"
STATUS_ZERO_WEIGHT = "zero-weight"
STATUS_CLAMPED = "clamped-target"

# Keeps the aspect-term coefficient finite at IoU == 1 with v == 0 without
# perturbing any other input: the guarded denominator only engages when the
# true denominator underflows to zero.
_ALPHA_GUARD = 1e-300


class LossOutput(NamedTuple):
    value: Tensor
    status: str


@dataclass
class SimilarityMatrix:
    """Raw cosine scores between every spatial token and every class column."""

    scores: Tensor  # K x N_cls
    temperature: float = 0.1


@dataclass
class AssignedTargets:
    """Per-positive training targets produced by the assignment rule.

    ``objectness`` is the per-positive predicted-objectness snapshot taken
    when the step's targets are assembled; the box loss consumes it as a
    constant weight.
    """

    positive_indices: np.ndarray  # C token indices into the score rows
    labels: np.ndarray  # C class ids
    boxes: np.ndarray  # C x 4 ground-truth (cx, cy, w, h)
    dfl_targets: np.ndarray  # C x 4 side offsets in bin units
    n_tokens: int
    objectness: np.ndarray = None  # C x 1, filled in at loss-assembly time

    @property
    def count(self):
        return len(self.positive_indices)


def contrastive_loss(sim, targets):
    """Mean over positives of the softmax cross entropy against the true
    class column. Scores are divided by the temperature; a temperature of 1
    is the plain formulation."""
    c = targets.count
    if c == 0:
        return LossOutput(Tensor(0.0), STATUS_NO_POSITIVES)
    n_cls = sim.scores.shape[1]
    rows = take_flat(
        sim.scores,
        np.asarray(targets.positive_indices)[:, None] * n_cls + np.arange(n_cls),
    )
    scaled = rows * (1.0 / sim.temperature)
    lse = logsumexp_rows(scaled)
    picked = take_flat(scaled, np.arange(c) * n_cls + np.asarray(targets.labels))
    return LossOutput((lse.reshape(c) - picked).mean(), STATUS_OK)


def _cols(t):
    return (narrow(t, 1, i, 1) for i in range(4))


def ciou_matrix(pred, gt):
    """Complete IoU per row of two C x 4 (cx, cy, w, h) tensors; C x 1 output.

    IoU minus the normalized center distance minus the aspect-ratio penalty.
    The aspect coefficient's denominator is guarded so identical boxes give
    exactly 1."""
    for name, t in (("pred", pred), ("gt", gt)):
        if np.any(t.data[:, 2:] <= 0):
            raise InputError(f"{name} boxes must have positive extents")
    pcx, pcy, pw, ph = _cols(pred)
    gcx, gcy, gw, gh = _cols(gt)
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2 = gcx - gw * 0.5, gcx + gw * 0.5
    gy1, gy2 = gcy - gh * 0.5, gcy + gh * 0.5
    iw = maximum(minimum(px2, gx2) - maximum(px1, gx1), 0.0)
    ih = maximum(minimum(py2, gy2) - maximum(py1, gy1), 0.0)
    inter = iw * ih
    # areas from the same corner differences as the intersection, so
    # identical boxes give exactly inter == union and IoU == 1
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    iou = minimum(inter / union, 1.0)
    cw = maximum(px2, gx2) - minimum(px1, gx1)
    ch = maximum(py2, gy2) - minimum(py1, gy1)
    c2 = cw * cw + ch * ch
    dx, dy = pcx - gcx, pcy - gcy
    rho2 = dx * dx + dy * dy
    v = (gw / gh).arctan() - (pw / ph).arctan()
    v = v * v * (4.0 / math.pi**2)
    alpha = v / maximum((1.0 - iou) + v, _ALPHA_GUARD)
    return iou - rho2 / c2 - alpha * v


def ciou(pred, gt):
    """Single-box complete IoU; accepts 4-sequences or tensors, returns a
    scalar tensor."""
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    g = gt if isinstance(gt, Tensor) else Tensor(gt)
    return ciou_matrix(p.reshape(1, 4), g.reshape(1, 4)).reshape(())


def dfl(pred_dist, target):
    """Distribution focal loss for one box: 4 x (R+1) side logits against
    continuous offsets in [0, R], interpolating the two bracketing bins.
    Out-of-range targets are clamped and flagged."""
    n_bins = pred_dist.shape[1]
    t = np.asarray(target, dtype=np.float64)
    clamped = np.clip(t, 0.0, n_bins - 1.0)
    status = STATUS_OK if np.array_equal(t, clamped) else STATUS_CLAMPED
    return LossOutput(_dfl_rows(pred_dist, clamped.reshape(1, 4)).reshape(()), status)


def _dfl_rows(dist_logits, targets):
    """Batched DFL: C*4 x (R+1) logits, C x 4 targets -> C x 1 per-box means."""
    c = targets.shape[0]
    n_bins = dist_logits.shape[1]
    log_p = dist_logits - logsumexp_rows(dist_logits)
    t = targets.reshape(-1)
    r = np.minimum(np.floor(t).astype(int), n_bins - 2)
    base = np.arange(4 * c) * n_bins
    left = take_flat(log_p, base + r)
    right = take_flat(log_p, base + r + 1)
    w_left = Tensor((r + 1) - t)
    w_right = Tensor(t - r)
    per_side = -(left * w_left + right * w_right)
    return per_side.reshape(c, 4).mean(axis=1, keepdims=True)


def bbox_loss(pred_boxes, dist_logits, objectness, targets):
    """Objectness-weighted mean of (1 - CIoU) + DFL over the positives.

    pred_boxes: C x 4 decoded boxes; dist_logits: (C*4) x (R+1) side logits;
    objectness: C x 1 predicted scores. The weight normalizer is the sum of
    the objectness scores themselves."""
    if targets.count == 0:
        return LossOutput(Tensor(0.0), STATUS_NO_POSITIVES)
    weight_sum = objectness.sum()
    if weight_sum.item() == 0.0:
        return LossOutput(Tensor(0.0), STATUS_ZERO_WEIGHT)
    clamped = np.clip(targets.dfl_targets, 0.0, dist_logits.shape[1] - 1.0)
    per_box = (1.0 - ciou_matrix(pred_boxes, Tensor(targets.boxes))) + _dfl_rows(
        dist_logits, clamped
    )
    return LossOutput((per_box * objectness).sum() / weight_sum, STATUS_OK)


def objectness_scores(sim, positive_indices, n_classes=None):
    """Predicted objectness per positive token: sigmoid of the best scaled
    similarity over the real class columns (extra distractor columns are
    ignored)."""
    n_cols = sim.scores.shape[1]
    keep = n_cols if n_classes is None else min(n_classes, n_cols)
    rows = take_flat(
        sim.scores,
        np.asarray(positive_indices)[:, None] * n_cols + np.arange(keep),
    )
    return amax_rows(rows * (1.0 / sim.temperature)).sigmoid()


def total_loss(contrast, bbox):
    """Unweighted sum of the alignment and detection objectives."""
    return contrast + bbox
