"""Detection evaluation: greedy score-ordered matching, 101-point
interpolated average precision per class and IoU threshold, and the
headline mean over thresholds 0.40 to 0.95 in steps of 0.05.

Precision and recall are reported at the fixed operating point of IoU 0.40
over detections at or above score 0.25.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError

MAP_THRESHOLDS = tuple(round(0.40 + 0.05 * i, 2) for i in range(12))
PR_IOU = 0.40
PR_SCORE = 0.25
_TABLE_THRESHOLDS = (0.40, 0.50, 0.60, 0.70, 0.80, 0.90)


def iou(a, b):
    """Intersection over union of two boxes."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def match_detections(dets, gts, iou_t):
    """Greedy one-to-one matching for a single image and class.

    Detections are visited in descending score; each takes the unmatched
    ground truth with the highest IoU at or above the threshold. Returns
    score-ordered (score, is_tp) flags and the recall denominator.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    flags = []
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i].box, g)
            if v >= iou_t and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            flags.append((dets[i].score, True))
        else:
            flags.append((dets[i].score, False))
    return flags, len(gts)


def average_precision(flagged_scores, n_gt):
    """COCO-style 101-point interpolated AP.

    ``flagged_scores`` is any iterable of (score, is_tp); classes with no
    ground truth return None and are excluded from class means.
    """
    if n_gt == 0:
        return None
    ordered = sorted(enumerate(flagged_scores), key=lambda p: (-p[1][0], p[0]))
    tp = fp = 0
    precisions, recalls = [], []
    for _, (_, is_tp) in ordered:
        tp += int(is_tp)
        fp += int(not is_tp)
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    if not precisions:
        return 0.0
    # envelope: best precision achievable at any recall >= r
    env = np.maximum.accumulate(np.array(precisions)[::-1])[::-1]
    rec = np.array(recalls)
    total = 0.0
    for i in range(101):
        r = i / 100.0
        idx = np.searchsorted(rec, r - 1e-12, side="left")
        total += env[idx] if idx < len(env) else 0.0
    return total / 101.0


def map_40_95(ap_by_threshold):
    """Mean over the 12 thresholds of the per-threshold class mean.

    ``ap_by_threshold`` maps each threshold to a per-class list of AP values
    (None marks a class absent from the ground truth).
    """
    keys = tuple(sorted(round(t, 2) for t in ap_by_threshold))
    if keys != MAP_THRESHOLDS:
        raise ProtocolError(
            f"threshold set must be exactly {MAP_THRESHOLDS}, got {keys}"
        )
    means = []
    for t in MAP_THRESHOLDS:
        present = [v for v in ap_by_threshold[t] if v is not None]
        means.append(float(np.mean(present)) if present else 0.0)
    return float(np.mean(means))


@dataclass
class EvalReport:
    class_names: list
    thresholds: tuple
    per_class_ap: dict  # name -> list of AP (or None) per threshold
    precision: float
    recall: float
    map_40_95: float
    no_ground_truth: bool = False
    extra: dict = field(default_factory=dict)

    def ap_at(self, threshold):
        i = self.thresholds.index(round(threshold, 2))
        present = [v[i] for v in self.per_class_ap.values() if v[i] is not None]
        return float(np.mean(present)) if present else 0.0

    def to_json_dict(self):
        return {
            "thresholds": list(self.thresholds),
            "per_class_ap": {k: v for k, v in self.per_class_ap.items()},
            "ap_by_threshold": {f"{t:.2f}": self.ap_at(t) for t in self.thresholds},
            "precision": self.precision,
            "recall": self.recall,
            "map_40_95": self.map_40_95,
            "no_ground_truth": self.no_ground_truth,
            **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def table(self):
        """Fixed-width summary row: precision, recall, AP ladder, headline mean."""
        headers = ["Precision", "Recall"] + [f"AP{int(t * 100)}" for t in _TABLE_THRESHOLDS] + ["mAP40:95"]
        values = [self.precision, self.recall]
        values += [self.ap_at(t) for t in _TABLE_THRESHOLDS]
        values += [self.map_40_95]
        head = "".join(f"{h:>11s}" for h in headers)
        row = "".join(f"{v:>11.4f}" for v in values)
        return head + "\n" + row


def evaluate_detections(dets_per_image, gts_per_image, n_classes, class_names=None):
    """Score a whole dataset of per-image detections against ground truth.

    ``dets_per_image``: list over images of Detection lists (post-NMS).
    ``gts_per_image``: list over images of (BBox, label) lists.
    """
    class_names = class_names or [str(i) for i in range(n_classes)]
    total_gt = sum(len(g) for g in gts_per_image)
    ap_rows = {name: [] for name in class_names}
    ap_by_threshold = {}
    for t in MAP_THRESHOLDS:
        per_class = []
        for cls in range(n_classes):
            pooled = []
            n_gt = 0
            for dets, gts in zip(dets_per_image, gts_per_image):
                cls_dets = [d for d in dets if d.class_id == cls]
                cls_gts = [b for b, label in gts if label == cls]
                flags, denom = match_detections(cls_dets, cls_gts, t)
                pooled.extend(flags)
                n_gt += denom
            ap = average_precision(pooled, n_gt)
            per_class.append(ap)
            ap_rows[class_names[cls]].append(ap)
        ap_by_threshold[t] = per_class

    tp = n_det = 0
    for cls in range(n_classes):
        for dets, gts in zip(dets_per_image, gts_per_image):
            cls_dets = [d for d in dets if d.class_id == cls and d.score >= PR_SCORE]
            cls_gts = [b for b, label in gts if label == cls]
            flags, _ = match_detections(cls_dets, cls_gts, PR_IOU)
            tp += sum(1 for _, ok in flags if ok)
            n_det += len(flags)
    precision = tp / n_det if n_det else 0.0
    recall = tp / total_gt if total_gt else 0.0

    return EvalReport(
        class_names=list(class_names),
        thresholds=MAP_THRESHOLDS,
        per_class_ap=ap_rows,
        precision=precision,
        recall=recall,
        map_40_95=map_40_95(ap_by_threshold) if total_gt else 0.0,
        no_ground_truth=total_gt == 0,
    )
