"""Independent oracles used across the test suite.

Every oracle here recomputes a quantity by a different route than the
library (shapely geometry, naive triple sums, full sorts, threshold
enumeration) so tests never compare an implementation against itself.
"""

from __future__ import annotations

import math

import numpy as np
from shapely.geometry import Polygon

from rotssod.detector import DenseScoreMaps, maps_from_arrays
from rotssod.geometry import OrientedBox


def shapely_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Rotated IoU via shapely polygon intersection."""
    pa = Polygon(a.corners())
    pb = Polygon(b.corners())
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def aligned_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Closed-form axis-aligned IoU.

    Valid when theta is a multiple of pi/2 (canonicalization turns tall
    upright boxes into theta = -pi/2), so extents are recovered from the
    projections |w cos| + |h sin|."""

    def extents(box: OrientedBox) -> tuple[float, float]:
        c, s = abs(math.cos(box.theta)), abs(math.sin(box.theta))
        return box.w * c + box.h * s, box.w * s + box.h * c

    aw, ah = extents(a)
    bw, bh = extents(b)
    iw = max(0.0, min(a.cx + aw / 2, b.cx + bw / 2) - max(a.cx - aw / 2, b.cx - bw / 2))
    ih = max(0.0, min(a.cy + ah / 2, b.cy + bh / 2) - max(a.cy - ah / 2, b.cy - bh / 2))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def random_box(rng: np.random.Generator, span: float = 40.0) -> OrientedBox:
    return OrientedBox(
        cx=rng.uniform(-span, span),
        cy=rng.uniform(-span, span),
        w=rng.uniform(0.5, 20.0),
        h=rng.uniform(0.5, 20.0),
        theta=rng.uniform(-math.pi, math.pi),
        class_id=int(rng.integers(0, 3)),
        score=float(rng.uniform()),
    )


def pds_triple_sum(maps: DenseScoreMaps) -> float:
    """Direct triple-sum evaluation of the mean per-pixel max probability."""
    total = 0.0
    n = 0
    for lvl in maps.levels:
        cls = lvl.cls.detach().cpu().numpy()
        h, w, c = cls.shape
        for i in range(h):
            for j in range(w):
                best = 0.0
                for k in range(c):
                    best = max(best, cls[i, j, k])
                total += best
                n += 1
    return total / n


def full_sort_selection(maps: DenseScoreMaps, k: int) -> list[np.ndarray]:
    """Exact top-k over the flattened maps with (level, row, col) tie-break."""
    entries = []
    flat_index = 0
    for li, lvl in enumerate(maps.levels):
        scores = lvl.cls.detach().cpu().numpy().max(axis=2)
        h, w = scores.shape
        for i in range(h):
            for j in range(w):
                entries.append((-scores[i, j], flat_index, li, i, j))
                flat_index += 1
    entries.sort()
    masks = [np.zeros(l.cls.shape[:2], dtype=bool) for l in maps.levels]
    for _, _, li, i, j in entries[:k]:
        masks[li][i, j] = True
    return masks


def random_maps(
    rng: np.random.Generator,
    max_levels: int = 3,
    max_pixels: int = 500,
    max_classes: int = 8,
    dtype=np.float64,
) -> DenseScoreMaps:
    """Random valid score maps with total pixel count <= max_pixels."""
    m = int(rng.integers(1, max_levels + 1))
    c = int(rng.integers(1, max_classes + 1))
    cls_arrays = []
    budget = max_pixels
    for li in range(m):
        max_side = max(1, int(math.sqrt(budget / max(1, m - li))))
        h = int(rng.integers(1, max_side + 1))
        w = int(rng.integers(1, max_side + 1))
        budget -= h * w
        cls_arrays.append(rng.uniform(0.0, 1.0, size=(h, w, c)).astype(dtype))
    return maps_from_arrays(cls_arrays, strides=[2**i for i in range(m)])


def ap_by_threshold_enumeration(
    preds: list[list[OrientedBox]],
    gts: list[list[OrientedBox]],
    class_id: int,
    iou_thresh: float,
) -> float:
    """AP oracle: rerun greedy matching from scratch at every score cutoff.

    Builds the PR point set by thresholding, then integrates the same
    monotone-interpolated curve. Only practical for tiny instances.
    """
    from rotssod.geometry import rotated_iou

    all_preds = []
    for img_idx, plist in enumerate(preds):
        for order, p in enumerate(plist):
            if p.class_id == class_id:
                all_preds.append((img_idx, order, p))
    n_gt = sum(1 for g in gts for b in g if b.class_id == class_id)
    if n_gt == 0:
        return 0.0

    def match_at(threshold: float) -> tuple[int, int]:
        kept = [t for t in all_preds if t[2].score >= threshold]
        kept.sort(key=lambda t: (-t[2].score, t[0], t[1]))
        used: dict[tuple[int, int], bool] = {}
        tp = fp = 0
        for img_idx, _, p in kept:
            cands = [b for b in gts[img_idx] if b.class_id == class_id]
            best_iou, best_j = 0.0, -1
            for j, g in enumerate(cands):
                if used.get((img_idx, j)):
                    continue
                iou = rotated_iou(g, p)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_thresh:
                tp += 1
                used[(img_idx, best_j)] = True
            else:
                fp += 1
        return tp, fp

    scores = sorted({t[2].score for t in all_preds}, reverse=True)
    recalls = [0.0]
    precisions = [0.0]
    for s in scores:
        tp, fp = match_at(s)
        recalls.append(tp / n_gt)
        precisions.append(tp / max(tp + fp, 1))
    mrec = np.array(recalls + [1.0])
    mpre = np.array(precisions + [0.0])
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
