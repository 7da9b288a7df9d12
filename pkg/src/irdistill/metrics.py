"""Segmentation and detection metrics for small-target masks."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import ContractError

FA_SCALE = 1e6          # Fa is reported per million pixels
MATCH_DISTANCE = 3.0    # centroid distance for a detection, in pixels
_EIGHT = np.ones((3, 3), dtype=int)


@dataclass
class MetricsReport:
    mIoU: float
    nIoU: float
    Pd: float
    Fa: float
    recovery_rate: float | None
    tp_px: int
    fp_px: int
    fn_px: int
    detected_targets: int
    total_targets: int
    false_alarm_px: int
    total_px: int
    threshold: float
    n_images: int = 0
    iou_sum: float = 0.0

    CSV_FIELDS = ("run_id", "split", "mIoU", "nIoU", "Pd", "Fa", "recovery_rate", "tp_px", "fp_px",
                  "fn_px", "detected_targets", "total_targets", "false_alarm_px", "total_px", "threshold")

    def csv_row(self, run_id: str, split: str) -> dict:
        row = {"run_id": run_id, "split": split}
        for name in self.CSV_FIELDS[2:]:
            v = getattr(self, name)
            row[name] = "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)
        return row

    def to_csv(self, run_id: str, split: str, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow(self.csv_row(run_id, split))
        return buf.getvalue()


@dataclass
class ImageCounts:
    """Integer counts for one image; merging is plain addition."""
    tp: int
    fp: int
    fn: int
    detected: int
    targets: int
    pixels: int

    @property
    def iou(self) -> float:
        union = self.tp + self.fp + self.fn
        return 1.0 if union == 0 else self.tp / union


def _components(mask: np.ndarray):
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return np.zeros((0, 2))
    return np.array(ndimage.center_of_mass(mask, labels, range(1, n + 1)), dtype=np.float64).reshape(n, 2)


def count_image(pred: np.ndarray, gt: np.ndarray) -> ImageCounts:
    """Pixel counts plus greedy one-to-one centroid matching of components."""
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    gt_c = _components(gt)
    pr_c = _components(pred)
    used = np.zeros(len(pr_c), dtype=bool)
    detected = 0
    for g in gt_c:
        if len(pr_c) == 0:
            break
        d = np.hypot(pr_c[:, 0] - g[0], pr_c[:, 1] - g[1])
        d[used] = np.inf
        j = int(np.argmin(d))
        if d[j] <= MATCH_DISTANCE:
            used[j] = True
            detected += 1
    return ImageCounts(tp, fp, fn, detected, len(gt_c), int(pred.size))


def report_from_counts(counts, threshold: float = 0.5) -> MetricsReport:
    counts = list(counts)
    tp = sum(c.tp for c in counts)
    fp = sum(c.fp for c in counts)
    fn = sum(c.fn for c in counts)
    det = sum(c.detected for c in counts)
    tgt = sum(c.targets for c in counts)
    px = sum(c.pixels for c in counts)
    union = tp + fp + fn
    iou_sum = float(sum(c.iou for c in counts))
    return MetricsReport(
        mIoU=tp / union if union else 1.0,
        nIoU=iou_sum / len(counts) if counts else 0.0,
        Pd=det / tgt if tgt else 1.0,
        Fa=fp / px * FA_SCALE if px else 0.0,
        recovery_rate=None,
        tp_px=tp, fp_px=fp, fn_px=fn,
        detected_targets=det, total_targets=tgt,
        false_alarm_px=fp, total_px=px, threshold=threshold,
        n_images=len(counts), iou_sum=iou_sum,
    )


def _as_images(a) -> np.ndarray:
    a = np.asarray(getattr(a, "data", a))
    if a.ndim == 2:
        return a[None]
    if a.ndim == 4:
        if a.shape[1] != 1:
            raise ContractError(f"expected single-channel masks, got {a.shape}")
        return a[:, 0]
    if a.ndim == 3:
        return a
    raise ContractError(f"cannot interpret shape {a.shape} as a stack of masks")


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(getattr(prob, "data", prob)) > threshold


def segmentation_metrics(pred_prob, gt, threshold: float = 0.5) -> MetricsReport:
    """Binarize at ``threshold`` (strictly greater) and score against binary GT.

    mIoU aggregates pixels over all images; nIoU averages per-image IoU.
    """
    pred = _as_images(pred_prob)
    gt = _as_images(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not np.all((gt == 0) | (gt == 1)):
        raise ContractError("ground truth must be binary")
    counts = [count_image(p > threshold, g) for p, g in zip(pred, gt)]
    return report_from_counts(counts, threshold)


def recovery_rate(ours: float, full_baseline: float) -> int:
    """Integer percentage of ``ours`` relative to the full-data baseline, half rounded up."""
    if not full_baseline > 0:
        raise ContractError(f"baseline must be positive, got {full_baseline}")
    return int(math.floor(100.0 * ours / full_baseline + 0.5))


def report_field_names() -> tuple:
    return tuple(f.name for f in fields(MetricsReport))
