"""Dice and IoU overlap metrics for binary masks."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _check_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred > 0, gt > 0


def dice(pred, gt, empty_value: float = 1.0) -> float:
    """2|A∩B| / (|A|+|B|); both-empty returns empty_value (default 1.0)."""
    p, g = _check_pair(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return empty_value
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def iou(pred, gt, empty_value: float = 1.0) -> float:
    """|A∩B| / |A∪B|; both-empty returns empty_value (default 1.0)."""
    p, g = _check_pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return empty_value
    return float(np.logical_and(p, g).sum() / union)


@dataclass(frozen=True)
class MetricReport:
    per_sample: list  # of (id, dice, iou)
    mean_dice: float
    mean_iou: float
    count: int
    empty_value: float = 1.0

    def to_json(self, path):
        payload = {
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "count": self.count,
            "empty_empty_convention": self.empty_value,
            "per_sample": [{"id": i, "dice": d, "iou": j} for i, d, j in self.per_sample],
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "dice", "iou"])
            for i, d, j in self.per_sample:
                w.writerow([i, f"{d:.6f}", f"{j:.6f}"])
            w.writerow(["mean", f"{self.mean_dice:.6f}", f"{self.mean_iou:.6f}"])


def evaluate(pairs, empty_value: float = 1.0) -> MetricReport:
    """pairs: iterable of (id, pred_mask, gt_mask)."""
    rows = [(sid, dice(p, g, empty_value), iou(p, g, empty_value)) for sid, p, g in pairs]
    if not rows:
        return MetricReport([], float("nan"), float("nan"), 0, empty_value)
    return MetricReport(rows,
                        float(np.mean([r[1] for r in rows])),
                        float(np.mean([r[2] for r in rows])),
                        len(rows), empty_value)
