"""Training and evaluation drivers over the assembled model."""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import CLASS_NAMES
from .detect import assign_targets, decode_box_rows, detections_from_head, nms
from .errors import NumericError, TrainingAborted
from .losses import (
    SimilarityMatrix,
    bbox_loss,
    contrastive_loss,
    objectness_scores,
    total_loss,
)
from .metrics import evaluate_detections
from .nn import gather_rows
from .optim import AdamW
from .tensor import Tensor


def class_name_list(n_classes):
    return list(CLASS_NAMES[:n_classes])


# Text anchor for locations with no lesion. Background tokens are trained
# toward this column, and a token preferring it at inference emits nothing;
# this is what lets negative/no-finding prompts sharpen discrimination.
NO_FINDING_PROMPT = "no finding"


def anchor_texts_for(prompt_entry, class_names, use_negative_prompts):
    """Per-image contrastive columns: the class names, with a class's text
    replaced by its first matched phrase, then the no-finding anchor, then
    the image's negative prompts as extra distractor columns."""
    texts = list(class_names)
    name_to_idx = {name: i for i, name in enumerate(class_names)}
    if prompt_entry:
        overridden = set()
        for pair in prompt_entry.get("positive_pairs", ()):
            idx = name_to_idx.get(pair["class_label"])
            if idx is not None and idx not in overridden:
                texts[idx] = pair["matched_phrase"]
                overridden.add(idx)
    texts.append(NO_FINDING_PROMPT)
    if prompt_entry and use_negative_prompts:
        texts.extend(prompt_entry.get("negative_prompts", ()))
    return texts


BACKGROUND_RATIO = 3


def _with_background_rows(targets, n_classes, sample_key):
    """Extend the contrastive sample set with background tokens labeled as
    the no-finding column (index n_classes).

    Background rows are capped at BACKGROUND_RATIO per object row so the
    no-finding column cannot drown the object signal; the subsample is a
    deterministic function of ``sample_key``.
    """
    background = np.setdiff1d(
        np.arange(targets.n_tokens), targets.positive_indices, assume_unique=False
    )
    quota = BACKGROUND_RATIO * max(targets.count, 2)
    if len(background) > quota:
        rng = np.random.default_rng([sample_key, len(background)])
        background = np.sort(rng.choice(background, size=quota, replace=False))
    from .losses import AssignedTargets

    return AssignedTargets(
        positive_indices=np.concatenate([targets.positive_indices, background]),
        labels=np.concatenate(
            [targets.labels, np.full(len(background), n_classes, dtype=np.int64)]
        ),
        boxes=targets.boxes,
        dfl_targets=targets.dfl_targets,
        n_tokens=targets.n_tokens,
    )


def _similarity(model, head):
    if model.weights.log_tau is not None:
        inv_tau = (-model.weights.log_tau).exp()
        return SimilarityMatrix(head.class_cos * inv_tau, 1.0)
    return SimilarityMatrix(head.class_cos, model.config.temperature)


def image_loss(model, record, prompt_entry):
    """Total objective for one image; returns (loss tensor, parts dict)."""
    cfg = model.config
    class_names = class_name_list(cfg.n_classes)
    anchors = model.class_anchors(
        anchor_texts_for(prompt_entry, class_names, cfg.use_negative_prompts)
    )
    head = model.forward(record.image, record.report, anchors)
    targets = assign_targets(record.gt, head.grid_hw, cfg.dfl_bins)
    sim = _similarity(model, head)
    sample_key = zlib.crc32(record.image_id.encode())
    contrast = contrastive_loss(
        sim, _with_background_rows(targets, cfg.n_classes, sample_key)
    )
    if targets.count:
        dist_rows = gather_rows(head.dist_logits, targets.positive_indices)
        pred_boxes = decode_box_rows(
            targets.positive_indices, dist_rows, head.grid_hw, cfg.dfl_bins
        )
        # snapshot the predicted objectness into the targets: the weighting
        # is a per-step constant, not a gradient path
        targets.objectness = objectness_scores(
            sim, targets.positive_indices, cfg.n_classes
        ).data.copy()
        box = bbox_loss(
            pred_boxes,
            dist_rows.reshape(targets.count * 4, cfg.dfl_bins),
            Tensor(targets.objectness),
            targets,
        )
    else:
        box = bbox_loss(None, None, None, targets)
    return total_loss(contrast.value, box.value), {
        "contrast": contrast,
        "bbox": box,
        "positives": targets.count,
    }


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_val: float = math.inf
    epochs_run: int = 0
    checkpoint_path: str = ""


def _mean_loss(model, records, prompts):
    values = []
    for rec in records:
        loss, _ = image_loss(model, rec, prompts.get(rec.image_id))
        values.append(loss.item())
    return float(np.mean(values)) if values else 0.0


def train(model, records, prompts, out_dir, val_records=None, log=print):
    """AdamW over the summed objective with per-epoch validation, early
    stopping, and a checkpoint on every improvement."""
    cfg = model.config
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 0x7E41])
    if val_records is None:
        n_val = int(round(cfg.val_fraction * len(records)))
        perm = rng.permutation(len(records))
        val_records = [records[i] for i in perm[:n_val]]
        train_records = [records[i] for i in perm[n_val:]]
    else:
        train_records = list(records)
    params = model.named_parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ckpt_path = os.path.join(out_dir, "model.ckpt")

    result = TrainResult(checkpoint_path=ckpt_path)
    save_checkpoint(ckpt_path, params)  # valid artifact even for epochs = 0
    bad_epochs = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_records))
        batch_values = []
        for start in range(0, len(order), cfg.batch_size):
            batch_ids = order[start : start + cfg.batch_size]
            batch_no = start // cfg.batch_size
            opt.zero_grad()
            try:
                losses = [
                    image_loss(model, train_records[i], prompts.get(train_records[i].image_id))[0]
                    for i in batch_ids
                ]
                batch_loss = losses[0]
                for extra in losses[1:]:
                    batch_loss = batch_loss + extra
                batch_loss = batch_loss / float(len(losses))
                value = batch_loss.item()
                if not math.isfinite(value):
                    raise NumericError("non-finite batch loss")
                batch_loss.backward()
            except NumericError as exc:
                images = ", ".join(train_records[i].image_id for i in batch_ids)
                raise TrainingAborted(
                    f"epoch {epoch} batch {batch_no}: {exc} (images: {images})"
                ) from exc
            opt.step()
            batch_values.append(value)
        train_loss = float(np.mean(batch_values)) if batch_values else 0.0
        val_loss = _mean_loss(model, val_records, prompts) if val_records else train_loss
        result.history.append((epoch, train_loss, val_loss))
        result.epochs_run = epoch
        log(f"epoch {epoch:3d}  train_loss {train_loss:.6f}  val_loss {val_loss:.6f}")
        if val_loss < result.best_val:
            result.best_val = val_loss
            bad_epochs = 0
            save_checkpoint(ckpt_path, params)
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                log(f"early stop after {cfg.patience} stale epochs")
                break
    return result


def evaluate(model, records, ablate_scp=False, ablate_dbp=False):
    """Self-prompted evaluation: each image's own report drives the fusion.

    The ablation flags zero the corresponding fusion gates for the duration
    of the call. Returns (EvalReport, detections per image).
    """
    cfg = model.config
    saved = [
        (float(layer.scp.gate.data), float(layer.dbp.gate.data))
        for layer in model.weights.enhancer.layers
    ]
    if ablate_scp:
        model.set_gates(scp=0.0)
    if ablate_dbp:
        model.set_gates(dbp=0.0)
    try:
        anchors = model.class_anchors(class_name_list(cfg.n_classes) + [NO_FINDING_PROMPT])
        dets_per_image = []
        gts_per_image = []
        for rec in records:
            head = model.forward(rec.image, rec.report, anchors)
            dets = nms(
                detections_from_head(
                    head, model.temperature, cfg.nms_score, n_classes=cfg.n_classes
                ),
                cfg.nms_iou,
                cfg.nms_score,
            )
            dets_per_image.append(dets)
            gts_per_image.append(rec.gt)
    finally:
        for layer, (g_scp, g_dbp) in zip(model.weights.enhancer.layers, saved):
            layer.scp.gate.data[...] = g_scp
            layer.dbp.gate.data[...] = g_dbp
    report = evaluate_detections(
        dets_per_image, gts_per_image, cfg.n_classes, class_name_list(cfg.n_classes)
    )
    return report, dets_per_image
