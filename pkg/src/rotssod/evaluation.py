"""Rotated-box detection evaluation: VOC-style greedy matching and mAP.

AP uses continuous (max-to-the-right) PR interpolation at a single rotated
IoU threshold. Classes with no ground-truth instances are excluded from the
mean. Score ties keep input order during matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox, rotated_iou


@dataclass
class ClassCounts:
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    map: float
    per_class_ap: list[float | None]  # None for classes without ground truth
    iou_threshold: float
    counts: list[ClassCounts]

    def to_json_dict(self) -> dict:
        return {
            "map": self.map,
            "per_class_ap": self.per_class_ap,
            "iou_threshold": self.iou_threshold,
            "counts": [
                {"tp": c.tp, "fp": c.fp, "fn": c.fn} for c in self.counts
            ],
        }


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the PR curve with monotone interpolation from the right."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate(
    preds: list[list[OrientedBox]],
    gts: list[list[OrientedBox]],
    num_classes: int,
    iou_thresh: float = 0.5,
) -> EvalReport:
    """Greedy per-class matching and AP over parallel per-image box lists.

    Each prediction, in descending score order, matches the highest-IoU
    still-unmatched ground truth of its class in its image; it is a true
    positive when that IoU reaches the threshold, else a false positive.
    """
    if len(preds) != len(gts):
        raise ValueError("preds and gts must have the same number of images")
    per_class_ap: list[float | None] = []
    counts: list[ClassCounts] = []
    for c in range(num_classes):
        gt_by_image = [[b for b in img_gts if b.class_id == c] for img_gts in gts]
        n_gt = sum(len(g) for g in gt_by_image)
        detections = []
        for img_idx, img_preds in enumerate(preds):
            for b in img_preds:
                if b.class_id == c:
                    detections.append((img_idx, b))
        detections.sort(key=lambda d: -d[1].score)  # stable: ties keep input order
        matched = [np.zeros(len(g), dtype=bool) for g in gt_by_image]
        tp = np.zeros(len(detections))
        fp = np.zeros(len(detections))
        for di, (img_idx, pred) in enumerate(detections):
            cand = gt_by_image[img_idx]
            best_iou = 0.0
            best_j = -1
            for j, gt in enumerate(cand):
                if matched[img_idx][j]:
                    continue
                if (
                    math.hypot(gt.cx - pred.cx, gt.cy - pred.cy)
                    > gt.circumradius() + pred.circumradius()
                ):
                    continue
                iou = rotated_iou(gt, pred)
                if iou > best_iou:
                    best_iou = iou
                    best_j = j
            if best_j >= 0 and best_iou >= iou_thresh:
                tp[di] = 1
                matched[img_idx][best_j] = True
            else:
                fp[di] = 1
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(fp)
        n_tp = int(tp_cum[-1]) if len(detections) else 0
        counts.append(ClassCounts(tp=n_tp, fp=len(detections) - n_tp, fn=n_gt - n_tp))
        if n_gt == 0:
            per_class_ap.append(None)
            continue
        recall = tp_cum / n_gt
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        per_class_ap.append(average_precision(recall, precision) if len(detections) else 0.0)
    valid = [ap for ap in per_class_ap if ap is not None]
    mean_ap = float(np.mean(valid)) if valid else 0.0
    return EvalReport(
        map=mean_ap,
        per_class_ap=per_class_ap,
        iou_threshold=iou_thresh,
        counts=counts,
    )
