"""Anchor-free detection over the enhanced feature map.

Every spatial token of the final map is a candidate region: a linear
projection gives its unit-normalized embedding (classified by cosine
against the class embeddings) and a second projection gives distributional
logits for the four box sides, decoded as bin expectations times the grid
stride. Targets are assigned center-first with a 4-neighborhood, and
inference ends with class-wise greedy NMS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .losses import AssignedTargets
from .nn import l2_normalize_rows, linear_param, zeros_param
from .tensor import Tensor, concat, matmul, maximum, minimum, narrow, softmax_rows

MIN_EXTENT = 1e-6


@dataclass
class BBox:
    """Image-normalized center-size box."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise InputError(f"box extents must be positive, got w={self.w}, h={self.h}")
        x1, y1, x2, y2 = self.corners()
        if x2 <= 0 or y2 <= 0 or x1 >= 1 or y1 >= 1:
            raise InputError("box does not intersect the unit square")

    def corners(self):
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def as_row(self):
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass
class BoxPrediction:
    token_index: int
    region_embedding: np.ndarray
    dist_logits: np.ndarray  # 4 x (R+1)
    decoded: BBox
    class_scores: np.ndarray  # raw cosine row


@dataclass
class Detection:
    box: BBox
    class_id: int
    score: float
    token_index: int = -1


@dataclass
class HeadWeights:
    # the region projection is bias-free: a shared bias ahead of the L2
    # normalization would pull every token toward one direction
    embed_proj: Tensor
    dist_proj: Tensor
    dist_bias: Tensor


def init_head(rng, in_channels, d_shared, n_bins):
    return HeadWeights(
        embed_proj=linear_param(rng, in_channels, d_shared),
        dist_proj=linear_param(rng, in_channels, 4 * n_bins),
        dist_bias=zeros_param(4 * n_bins),
    )


@dataclass
class HeadOutput:
    embeddings: Tensor  # N x D_shared, unit rows
    class_cos: Tensor  # N x N_cls
    dist_logits: Tensor  # N x 4*(R+1)
    grid_hw: tuple
    n_bins: int

    @property
    def n_tokens(self):
        return self.embeddings.shape[0]


def head_forward(x_final, class_emb, weights, n_bins):
    """Project every spatial token to a region embedding and side logits."""
    h, w, c = x_final.shape
    if weights.embed_proj.shape[0] != c:
        raise DimensionError(
            f"head expects {weights.embed_proj.shape[0]} channels, map has {c}"
        )
    tokens = x_final.reshape(h * w, c)
    embeddings = l2_normalize_rows(matmul(tokens, weights.embed_proj))
    class_cos = matmul(embeddings, class_emb.matrix.T)
    dist_logits = matmul(tokens, weights.dist_proj) + weights.dist_bias
    return HeadOutput(
        embeddings=embeddings,
        class_cos=class_cos,
        dist_logits=dist_logits,
        grid_hw=(h, w),
        n_bins=n_bins,
    )


def _grid_stride(grid_hw):
    h, w = grid_hw
    if h != w:
        raise ConfigError(f"detection grid must be square, got {h}x{w}")
    return 1.0 / w


def decode_box_rows(token_indices, dist_rows, grid_hw, n_bins):
    """Decode C tokens' side distributions into C x 4 (cx, cy, w, h) boxes.

    Each side's offset is the expected bin index times the stride, measured
    from the token center; corners are clipped to the unit square and
    extents floored at a tiny epsilon.
    """
    h, w = grid_hw
    stride = _grid_stride(grid_hw)
    idx = np.asarray(token_indices)
    c = len(idx)
    p = softmax_rows(dist_rows.reshape(4 * c, n_bins))
    expected = matmul(p, Tensor(np.arange(n_bins, dtype=np.float64).reshape(n_bins, 1)))
    sides = expected.reshape(c, 4) * stride  # left, top, right, bottom
    tx = ((idx % w) + 0.5).reshape(c, 1) * stride
    ty = ((idx // w) + 0.5).reshape(c, 1) * stride
    l_ = narrow(sides, 1, 0, 1)
    t_ = narrow(sides, 1, 1, 1)
    r_ = narrow(sides, 1, 2, 1)
    b_ = narrow(sides, 1, 3, 1)
    x1 = minimum(maximum(Tensor(tx) - l_, 0.0), 1.0)
    y1 = minimum(maximum(Tensor(ty) - t_, 0.0), 1.0)
    x2 = minimum(maximum(Tensor(tx) + r_, 0.0), 1.0)
    y2 = minimum(maximum(Tensor(ty) + b_, 0.0), 1.0)
    bw = maximum(x2 - x1, MIN_EXTENT)
    bh = maximum(y2 - y1, MIN_EXTENT)
    cx = (x1 + x2) * 0.5
    cy = (y1 + y2) * 0.5
    return concat([cx, cy, bw, bh], axis=1)


def decode_box(grid_pos, dist_logits, stride):
    """Decode one token at grid position (gx, gy); returns a BBox."""
    logits = dist_logits.data if isinstance(dist_logits, Tensor) else np.asarray(dist_logits)
    n_bins = logits.shape[1]
    gx, gy = grid_pos
    w = int(round(1.0 / stride))
    row = decode_box_rows(
        np.array([gy * w + gx]), Tensor(logits.reshape(1, 4 * n_bins)), (w, w), n_bins
    ).data[0]
    return BBox(*row)


def to_box_predictions(head):
    """Materialize the per-token prediction records (values only)."""
    boxes = decode_box_rows(
        np.arange(head.n_tokens), head.dist_logits, head.grid_hw, head.n_bins
    ).data
    preds = []
    for k in range(head.n_tokens):
        preds.append(
            BoxPrediction(
                token_index=k,
                region_embedding=head.embeddings.data[k].copy(),
                dist_logits=head.dist_logits.data[k].reshape(4, head.n_bins).copy(),
                decoded=BBox(*boxes[k]),
                class_scores=head.class_cos.data[k].copy(),
            )
        )
    return preds


def assign_targets(gt, grid_hw, n_bins):
    """Center-based assignment with a 4-neighborhood.

    A token is positive for the box whose center cell it is, plus the four
    neighbors whose centers fall inside the box. Contested tokens go to the
    smallest box (ties to the lowest label). Any box left without a token is
    given its nearest free token, so every ground truth trains.
    """
    h, w = grid_hw
    stride = _grid_stride(grid_hw)
    n_bins_max = float(n_bins - 1)
    claims = {}  # token -> (area, label, gt_order)

    def token_center(tok):
        return ((tok % w) + 0.5) * stride, ((tok // w) + 0.5) * stride

    entries = []
    for order, (box, label) in enumerate(gt):
        cx, cy, bw, bh = box.cx, box.cy, box.w, box.h
        gx = min(int(cx / stride), w - 1)
        gy = min(int(cy / stride), h - 1)
        center_tok = gy * w + gx
        candidates = [center_tok]
        x1, y1, x2, y2 = box.corners()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = gx + dx, gy + dy
            if not (0 <= nx < w and 0 <= ny < h):
                continue
            px, py = ((nx + 0.5) * stride, (ny + 0.5) * stride)
            if x1 <= px <= x2 and y1 <= py <= y2:
                candidates.append(ny * w + nx)
        key = (bw * bh, label, order)
        entries.append((order, box, label, candidates))
        for tok in candidates:
            if tok not in claims or key < claims[tok][0]:
                claims[tok] = (key, order)

    owners = {tok: order for tok, (key, order) in claims.items()}
    counts = {order: 0 for order, *_ in entries}
    for order in owners.values():
        counts[order] += 1
    # Coverage pass: a box that lost all its tokens steals the nearest token
    # that is not another box's sole positive.
    for order, box, label, _ in entries:
        if counts[order] > 0:
            continue
        ranked = sorted(
            range(h * w),
            key=lambda tok: (
                (token_center(tok)[0] - box.cx) ** 2 + (token_center(tok)[1] - box.cy) ** 2,
                tok,
            ),
        )
        for tok in ranked:
            prev = owners.get(tok)
            if prev is not None and counts[prev] <= 1:
                continue
            if prev is not None:
                counts[prev] -= 1
            owners[tok] = order
            counts[order] += 1
            break

    positive = sorted(owners)
    labels, boxes, dfl_targets = [], [], []
    for tok in positive:
        order = owners[tok]
        box = entries[order][1]
        labels.append(entries[order][2])
        boxes.append(box.as_row())
        tx, ty = token_center(tok)
        x1, y1, x2, y2 = box.corners()
        offsets = np.array([tx - x1, ty - y1, x2 - tx, y2 - ty]) / stride
        dfl_targets.append(np.clip(offsets, 0.0, n_bins_max))
    return AssignedTargets(
        positive_indices=np.array(positive, dtype=np.int64),
        labels=np.array(labels, dtype=np.int64),
        boxes=np.array(boxes).reshape(len(positive), 4),
        dfl_targets=np.array(dfl_targets).reshape(len(positive), 4),
        n_tokens=h * w,
    )


def _iou_values(a, b):
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def nms(dets, iou_threshold, score_threshold):
    """Class-wise greedy suppression.

    Detections below the score threshold are dropped first; survivors are
    processed in descending score (ties by token index) and a candidate is
    suppressed by any kept same-class box with IoU strictly above the
    threshold.
    """
    for name, value in (("iou_threshold", iou_threshold), ("score_threshold", score_threshold)):
        if not 0.0 < value < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {value}")
    alive = sorted(
        (d for d in dets if d.score >= score_threshold),
        key=lambda d: (d.class_id, -d.score, d.token_index),
    )
    kept = []
    kept_by_class = {}
    for d in alive:
        suppressed = any(
            _iou_values(k.box, d.box) > iou_threshold
            for k in kept_by_class.get(d.class_id, ())
        )
        if not suppressed:
            kept.append(d)
            kept_by_class.setdefault(d.class_id, []).append(d)
    return kept


def detections_from_head(head, temperature, score_threshold, n_classes=None):
    """Turn head outputs into scored detections (pre-NMS).

    Each token proposes its best-scoring column; columns at or beyond
    ``n_classes`` are suppression-only (the no-finding anchor and any other
    distractor prompts), so a token that prefers one of them emits nothing.
    The surviving proposal must clear the score threshold."""
    boxes = decode_box_rows(
        np.arange(head.n_tokens), head.dist_logits, head.grid_hw, head.n_bins
    ).data
    logits = head.class_cos.data / temperature
    scores = 1.0 / (1.0 + np.exp(-logits))
    if n_classes is None:
        n_classes = scores.shape[1]
    dets = []
    for tok in range(head.n_tokens):
        cls = int(np.argmax(scores[tok]))
        if cls < n_classes and scores[tok, cls] >= score_threshold:
            dets.append(
                Detection(
                    box=BBox(*boxes[tok]),
                    class_id=cls,
                    score=float(scores[tok, cls]),
                    token_index=tok,
                )
            )
    return dets
