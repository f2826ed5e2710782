"""Synthetic lesion dataset: geometric shapes on noisy dark backgrounds with
templated reports, plus the on-disk dataset format.

Each class has a fixed shape kind and intensity so the detection task is
cleanly separable. Reports always mention every present class positively
and occasionally append a negated sentence about an absent class. The
generator is a pure function of (n, n_classes, seed) with per-record
derived seeds.

Directory layout: ``annotations.jsonl``, ``images.bin`` (one line per image:
id, dims, hex-encoded float64 pixels), ``reports/<image_id>.txt``, plus a
``meta.json`` with the generation parameters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .detect import BBox
from .errors import ConfigError, ParseError

CLASS_NAMES = (
    "aortic enlargement",
    "atelectasis",
    "calcification",
    "cardiomegaly",
    "consolidation",
    "interstitial lung disease",
    "infiltration",
    "lung opacity",
    "nodule",
    "other lesion",
    "pleural effusion",
    "pleural thickening",
    "pneumothorax",
    "pulmonary fibrosis",
)

IMAGE_SIZE = 64
_BACKGROUND = 0.06
_NOISE = 0.015
_SIZE_ADJECTIVES = ("large", "small", "moderate", "subtle")

_POSITIVE_TEMPLATES = (
    "There is a {adj} {name}.",
    "The study shows {name}.",
    "{cap} is present.",
)
_OPENER = "Frontal chest radiograph."
_NEGATION_TEMPLATE = "No evidence of {name}."


@dataclass
class DatasetRecord:
    image_id: str
    image: np.ndarray  # H x W x 1 grayscale in [0, 1]
    gt: list  # (BBox, label) pairs
    report: str


def class_intensity(label, n_classes):
    if n_classes == 1:
        return 0.9
    return 0.5 + 0.45 * label / (n_classes - 1)


def _draw_shape(img, kind, cx, cy, hw, hh, value):
    h, w = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px, py = (xs + 0.5) / w, (ys + 0.5) / h
    nx, ny = (px - cx) / hw, (py - cy) / hh
    inside_box = (np.abs(nx) <= 1.0) & (np.abs(ny) <= 1.0)
    r = np.sqrt(nx**2 + ny**2)
    if kind == 0:  # filled disk
        mask = r <= 1.0
    elif kind == 1:  # filled rectangle
        mask = inside_box
    elif kind == 2:  # ring
        mask = (r <= 1.0) & (r >= 0.55)
    elif kind == 3:  # plus
        mask = inside_box & ((np.abs(nx) <= 0.35) | (np.abs(ny) <= 0.35))
    elif kind == 4:  # frame
        mask = inside_box & ((np.abs(nx) >= 0.55) | (np.abs(ny) >= 0.55))
    else:  # triangle
        mask = (ny <= 1.0) & (ny >= -1.0) & (np.abs(nx) <= (ny + 1.0) / 2.0)
    img[mask, 0] = value


def generate_record(index, n_classes, seed, size=IMAGE_SIZE):
    rng = np.random.default_rng((seed, index))
    img = np.clip(
        _BACKGROUND + rng.normal(0.0, _NOISE, (size, size, 1)), 0.0, 1.0
    )
    n_shapes = int(rng.integers(1, 4))
    labels = rng.choice(n_classes, size=min(n_shapes, n_classes), replace=False)
    gt = []
    for label in labels.tolist():
        placed = False
        for _ in range(30):
            hw = rng.uniform(0.09, 0.20)
            hh = rng.uniform(0.09, 0.20)
            cx = rng.uniform(hw + 0.02, 1.0 - hw - 0.02)
            cy = rng.uniform(hh + 0.02, 1.0 - hh - 0.02)
            box = BBox(cx=cx, cy=cy, w=2 * hw, h=2 * hh)
            if all(_box_iou(box, other) <= 0.20 for other, _ in gt):
                placed = True
                break
        if not placed:
            continue
        _draw_shape(img, label % 6, cx, cy, hw, hh, class_intensity(label, n_classes))
        gt.append((box, label))

    sentences = []
    if rng.random() < 0.5:
        sentences.append(_OPENER)
    for box, label in gt:
        name = CLASS_NAMES[label]
        template = _POSITIVE_TEMPLATES[int(rng.integers(len(_POSITIVE_TEMPLATES)))]
        sentences.append(
            template.format(
                adj=_SIZE_ADJECTIVES[int(rng.integers(len(_SIZE_ADJECTIVES)))],
                name=name,
                cap=name[0].upper() + name[1:],
            )
        )
    present = {label for _, label in gt}
    absent = [k for k in range(n_classes) if k not in present]
    if absent and rng.random() < 0.3:
        k = absent[int(rng.integers(len(absent)))]
        sentences.append(_NEGATION_TEMPLATE.format(name=CLASS_NAMES[k]))
    return DatasetRecord(
        image_id=f"img_{index:06d}",
        image=img,
        gt=gt,
        report=" ".join(sentences),
    )


def _box_iou(a, b):
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def generate_synthetic_dataset(n, n_classes, seed, size=IMAGE_SIZE):
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    if not 2 <= n_classes <= len(CLASS_NAMES):
        raise ConfigError(
            f"n_classes must be in [2, {len(CLASS_NAMES)}], got {n_classes}"
        )
    return [generate_record(i, n_classes, seed, size) for i in range(n)]


# -- persistence ------------------------------------------------------------------


def save_dataset(records, path, meta=None):
    os.makedirs(os.path.join(path, "reports"), exist_ok=True)
    with open(os.path.join(path, "annotations.jsonl"), "w", encoding="utf-8") as ann, open(
        os.path.join(path, "images.bin"), "w", encoding="ascii"
    ) as binf:
        for line_no, rec in enumerate(records):
            h, w, _ = rec.image.shape
            ann.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "height": h,
                        "width": w,
                        "pixels_line": line_no,
                        "boxes": [
                            {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "label": label}
                            for b, label in rec.gt
                        ],
                    }
                )
                + "\n"
            )
            payload = rec.image.astype("<f8").tobytes().hex()
            binf.write(f"{rec.image_id} {h} {w} {payload}\n")
            with open(
                os.path.join(path, "reports", f"{rec.image_id}.txt"), "w", encoding="utf-8"
            ) as rep:
                rep.write(rec.report)
    if meta is not None:
        with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)


def load_dataset(path):
    """Read a dataset directory back; returns (records, meta)."""
    pixels = {}
    bin_path = os.path.join(path, "images.bin")
    with open(bin_path, encoding="ascii") as f:
        for lineno, line in enumerate(f):
            parts = line.strip().split(" ")
            if len(parts) != 4:
                raise ParseError(f"{bin_path}:{lineno + 1}: expected 4 fields, got {len(parts)}")
            image_id, h, w, payload = parts
            try:
                h, w = int(h), int(w)
                raw = bytes.fromhex(payload)
            except ValueError as exc:
                raise ParseError(f"{bin_path}:{lineno + 1}: {exc}") from exc
            if len(raw) != h * w * 8:
                raise ParseError(
                    f"{bin_path}:{lineno + 1}: payload holds {len(raw)} bytes, expected {h * w * 8}"
                )
            pixels[image_id] = np.frombuffer(raw, dtype="<f8").reshape(h, w, 1).copy()

    records = []
    ann_path = os.path.join(path, "annotations.jsonl")
    with open(ann_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{ann_path}:{lineno + 1}: {exc}") from exc
            image_id = entry["image_id"]
            if image_id not in pixels:
                raise ParseError(f"{ann_path}:{lineno + 1}: no pixels for {image_id}")
            gt = [
                (BBox(cx=b["cx"], cy=b["cy"], w=b["w"], h=b["h"]), int(b["label"]))
                for b in entry["boxes"]
            ]
            report_path = os.path.join(path, "reports", f"{image_id}.txt")
            report = ""
            if os.path.exists(report_path):
                with open(report_path, encoding="utf-8") as rep:
                    report = rep.read()
            records.append(
                DatasetRecord(image_id=image_id, image=pixels[image_id], gt=gt, report=report)
            )
    meta = {}
    meta_path = os.path.join(path, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    return records, meta
