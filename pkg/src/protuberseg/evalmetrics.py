"""Voxel-level dice and lesion-level sensitivity / false positives.

Lesion matching decomposes prediction and ground truth into 26-connected
components. A ground-truth lesion is a true positive when the union of
all predicted components overlapping it reaches dice > 0.5, otherwise a
false negative. A predicted component with zero overlap against every
ground-truth lesion is one false positive. Predicted components that
overlap but fall short of the dice threshold are neither.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .volume import Mask, connected_components, read_pvol

LESION_CONNECTIVITY = 26
TP_DICE_THRESHOLD = 0.5


def dice(pred: Mask, gt: Mask) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both empty, 0.0 when exactly one is."""
    if pred.dims != gt.dims:
        raise ValueError(f"dim mismatch: {pred.dims} vs {gt.dims}")
    p = int(pred.data.sum())
    g = int(gt.data.sum())
    if p == 0 and g == 0:
        return 1.0
    inter = int((pred.data & gt.data).sum())
    return 2.0 * inter / (p + g)


def composite_dice(pred_kidney: Mask, pred_tumor: Mask,
                   gt_kidney: Mask, gt_tumor: Mask) -> dict:
    """Hierarchical convention: kidney dice over kidney∪tumor on both
    sides, tumor dice over tumor only, composite the arithmetic mean."""
    for m in (pred_tumor, gt_kidney, gt_tumor):
        if m.dims != pred_kidney.dims:
            raise ValueError("all masks must share dims")
    pk = Mask(pred_kidney.data | pred_tumor.data, pred_kidney.spacing)
    gk = Mask(gt_kidney.data | gt_tumor.data, gt_kidney.spacing)
    kd = dice(pk, gk)
    td = dice(pred_tumor, gt_tumor)
    return {"kidney_dice": kd, "tumor_dice": td,
            "composite": (kd + td) / 2.0}


@dataclass
class LesionReport:
    lesions: list[dict]  # per GT lesion: {matched_components, dice, tp}
    tp: int
    fn: int
    fp: int

    @property
    def sensitivity(self) -> float:
        total = self.tp + self.fn
        return self.tp / total if total else 1.0


def lesion_match(pred: Mask, gt: Mask,
                 connectivity: int = LESION_CONNECTIVITY) -> LesionReport:
    if pred.dims != gt.dims:
        raise ValueError(f"dim mismatch: {pred.dims} vs {gt.dims}")
    pred_labels, n_pred = connected_components(pred, connectivity)
    gt_labels, n_gt = connected_components(gt, connectivity)

    pred_sizes = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)
    overlapped = np.zeros(n_pred + 1, dtype=bool)
    lesions = []
    tp = 0
    for li in range(1, n_gt + 1):
        lesion = gt_labels == li
        touching = np.unique(pred_labels[lesion])
        touching = touching[touching > 0]
        overlapped[touching] = True
        union_size = int(pred_sizes[touching].sum())
        lesion_size = int(lesion.sum())
        inter = int(np.isin(pred_labels, touching)[lesion].sum()) \
            if touching.size else 0
        d = 2.0 * inter / (union_size + lesion_size) if touching.size else 0.0
        is_tp = d > TP_DICE_THRESHOLD
        tp += is_tp
        lesions.append({
            "matched_components": [int(c) for c in touching],
            "dice": d,
            "tp": bool(is_tp),
        })
    fp = int(np.sum(~overlapped[1: n_pred + 1]))
    return LesionReport(lesions=lesions, tp=tp, fn=n_gt - tp, fp=fp)


def evaluate_pair(pred_tumor: Mask, gt_tumor: Mask) -> dict:
    rep = lesion_match(pred_tumor, gt_tumor)
    return {
        "tumor_dice": dice(pred_tumor, gt_tumor),
        "tp": rep.tp,
        "fn": rep.fn,
        "fp": rep.fp,
    }


def evaluate_set(pred_dir, gt_dir, out_path=None) -> dict:
    """Aggregate per-image tumor dice / sensitivity / FPs over matching
    PVOL files found in both directories."""
    pred_files = sorted(f for f in os.listdir(pred_dir)
                        if f.endswith(".pvol"))
    gt_files = sorted(f for f in os.listdir(gt_dir) if f.endswith(".pvol"))
    missing = sorted(set(pred_files) ^ set(gt_files))
    if missing:
        raise ValueError(f"unpaired entries: {missing}")
    if not pred_files:
        raise ValueError("no .pvol files to evaluate")
    per_image = []
    for name in pred_files:
        pred = read_pvol(os.path.join(pred_dir, name))
        gt = read_pvol(os.path.join(gt_dir, name))
        entry = evaluate_pair(pred, gt) | {"name": name}
        per_image.append(entry)
    tp = sum(e["tp"] for e in per_image)
    fn = sum(e["fn"] for e in per_image)
    report = {
        "per_image": per_image,
        "mean_tumor_dice": float(np.mean([e["tumor_dice"]
                                          for e in per_image])),
        "sensitivity": tp / (tp + fn) if tp + fn else 1.0,
        "fps_per_image": float(np.mean([e["fp"] for e in per_image])),
    }
    if out_path is not None:
        with open(out_path, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
    return report
