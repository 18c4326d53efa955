"""Confusion-matrix accumulation and binary change-detection metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

METRIC_FIELDS = ("precision", "recall", "f1", "oa", "kappa", "iou", "miou")


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            value = int(getattr(self, name))
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")
            setattr(self, name, value)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    __add__ = merge

    def as_dict(self) -> dict:
        return asdict(self)


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """Probabilities (or an already binary map) to a boolean map; ``pred >= threshold`` is change."""
    arr = _to_numpy(pred)
    if arr.dtype == bool:
        return arr
    return arr >= threshold


def accumulate(cm: ConfusionMatrix, pred, target, threshold: float = 0.5) -> ConfusionMatrix:
    """Add the pixel tallies of one prediction/target pair to ``cm``.

    ``pred`` may hold probabilities; they are thresholded at ``threshold``.
    ``target`` must be binary. Returns a new matrix, ``cm`` is left untouched.
    """
    p = binarize(pred, threshold)
    t = _to_numpy(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    t = t.astype(bool) if t.dtype != bool else t
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return cm.merge(ConfusionMatrix(tp, fp, fn, tn))


def _ratio(num: int, den: int, no_positives: bool) -> float:
    # 0/0 counts as perfect only when neither map has any positive pixel
    if den == 0:
        return 1.0 if no_positives else 0.0
    return num / den


def compute_all(cm: ConfusionMatrix) -> dict:
    """Precision, recall, F1, OA, kappa, change-class IoU and two-class mean IoU."""
    tp, fp, fn, tn = cm.tp, cm.fp, cm.fn, cm.tn
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    empty = tp + fp + fn == 0

    precision = _ratio(tp, tp + fp, empty)
    recall = _ratio(tp, tp + fn, empty)
    if tp + fp == 0 or tp + fn == 0:
        f1 = 1.0 if empty else 0.0
    else:
        f1 = 2 * tp / (2 * tp + fp + fn)
    oa = (tp + tn) / total
    pe = ((tn + fn) * (tn + fp) + (fp + tp) * (fn + tp)) / total ** 2
    kappa = 1.0 if pe == 1 else (oa - pe) / (1 - pe)
    iou = _ratio(tp, tp + fp + fn, empty)
    iou_bg = _ratio(tn, tn + fp + fn, tn + fp + fn == 0)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "oa": oa,
        "kappa": kappa,
        "iou": iou,
        "miou": (iou + iou_bg) / 2,
    }


def write_report(path, cm: ConfusionMatrix, extra: dict | None = None) -> dict:
    report = {**compute_all(cm), "counts": cm.as_dict()}
    if extra:
        report.update(extra)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def write_per_image_csv(path, rows) -> None:
    """``rows`` is an iterable of ``(image_id, ConfusionMatrix)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "tp", "fp", "fn", "tn"])
        for image_id, cm in rows:
            writer.writerow([image_id, cm.tp, cm.fp, cm.fn, cm.tn])


# white TP, red FP, blue FN, black TN
_COLORS = {
    "tp": (255, 255, 255),
    "fp": (255, 0, 0),
    "fn": (0, 0, 255),
    "tn": (0, 0, 0),
}


def color_map(pred, target, threshold: float = 0.5) -> np.ndarray:
    """Color-coded error map as a uint8 ``[H, W, 3]`` array."""
    p = binarize(pred, threshold)
    t = _to_numpy(target).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[p & t] = _COLORS["tp"]
    out[p & ~t] = _COLORS["fp"]
    out[~p & t] = _COLORS["fn"]
    return out


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)
