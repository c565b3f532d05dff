"""Density-guided dense pseudo-label selection and the unsupervised loss.

The pseudo density score (PDS) of a set of dense teacher maps is the mean,
over every pixel of every FPN level, of the per-pixel maximum class
probability. It acts as a global proxy for how many objects a scene is
likely to contain. Density-guided selection keeps the top (beta * PDS)%
highest-scoring pixels across all levels as dense pseudo-labels and
suppresses the rest to zero; the fixed-ratio baseline keeps a constant
percentage instead. No decoding, thresholding or NMS happens anywhere on
this path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .detector import DenseScoreMaps, LevelMaps, PROB_EPS


@dataclass
class PdsResult:
    """Pseudo density score plus the per-pixel maxima it was built from."""

    s_pds: float
    per_pixel_max: list[torch.Tensor]  # one (H_l, W_l) tensor per level
    n_total: int


@dataclass
class SelectionMask:
    """Binary pixel-selection masks across FPN levels.

    beta is the density-guided selection knob that produced the mask; it is
    None for masks produced by the fixed-ratio baseline.
    """

    levels: list[np.ndarray]  # (H_l, W_l) bool per level
    k_selected: int
    beta: float | None = None

    def flat(self) -> np.ndarray:
        return np.concatenate([m.reshape(-1) for m in self.levels])


@dataclass
class DensePseudoLabel:
    """Teacher soft targets gated by a selection mask.

    cls targets are zero at every unselected pixel (suppression); reg
    targets are only consumed at selected pixels.
    """

    mask: SelectionMask
    soft_cls: list[torch.Tensor]  # (H_l, W_l, C) per level, zeroed outside mask
    teacher_reg: list[torch.Tensor]  # (H_l, W_l, 5) per level


def compute_pds(maps: DenseScoreMaps) -> PdsResult:
    """Mean over all pixels of the per-pixel max class probability."""
    maps.validate_probabilities()
    n = maps.n_total
    if n == 0:
        raise ValueError("empty score maps: no pixels to score")
    per_level = [lvl.cls.detach().max(dim=2).values for lvl in maps.levels]
    total = sum(float(m.sum()) for m in per_level)
    return PdsResult(s_pds=total / n, per_pixel_max=per_level, n_total=n)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _top_k_mask(per_pixel_max: list[torch.Tensor], k: int) -> list[np.ndarray]:
    """Top-k selection over all levels jointly.

    Ties are broken deterministically in ascending (level, row, column)
    order: the flattened concatenation is sorted stably by descending score,
    so equal scores keep their flat-index order.
    """
    flats = [m.cpu().numpy().reshape(-1) for m in per_pixel_max]
    scores = np.concatenate(flats) if flats else np.zeros(0)
    chosen = np.zeros(scores.shape[0], dtype=bool)
    if k > 0:
        order = np.argsort(-scores, kind="stable")
        chosen[order[:k]] = True
    masks = []
    pos = 0
    for m in per_pixel_max:
        h, w = m.shape
        masks.append(chosen[pos : pos + h * w].reshape(h, w))
        pos += h * w
    return masks


def select_ddpls(maps: DenseScoreMaps, beta: float) -> SelectionMask:
    """Density-guided selection: keep the top (beta * S_PDS)% of pixels.

    The kept fraction is clamp(beta * S_PDS / 100, 0, 1) and the pixel count
    is its round-half-up times N, so denser-looking scenes keep more
    pseudo-labels.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    pds = compute_pds(maps)
    fraction = min(max(beta * pds.s_pds / 100.0, 0.0), 1.0)
    k = min(max(round_half_up(fraction * pds.n_total), 0), pds.n_total)
    return SelectionMask(
        levels=_top_k_mask(pds.per_pixel_max, k), k_selected=k, beta=beta
    )


def select_fixed_ratio(maps: DenseScoreMaps, ratio: float) -> SelectionMask:
    """Baseline: keep a fixed percentage of pixels regardless of density."""
    if not (0.0 <= ratio <= 100.0):
        raise ValueError("ratio must be in [0, 100]")
    pds = compute_pds(maps)
    k = min(max(round_half_up(ratio / 100.0 * pds.n_total), 0), pds.n_total)
    return SelectionMask(levels=_top_k_mask(pds.per_pixel_max, k), k_selected=k, beta=None)


def selected_confidence_sum(pds: PdsResult, mask: SelectionMask) -> float:
    """Sum of per-pixel max scores over the selected pixels."""
    total = 0.0
    for scores, m in zip(pds.per_pixel_max, mask.levels):
        if m.any():
            total += float(scores.cpu().numpy()[m].sum())
    return total


def build_dense_pseudo_label(
    teacher_maps: DenseScoreMaps, mask: SelectionMask
) -> DensePseudoLabel:
    """Copy teacher soft scores/regressions at selected pixels; zero the
    classification target everywhere else."""
    if len(teacher_maps.levels) != len(mask.levels):
        raise ValueError("level count mismatch between maps and mask")
    soft_cls = []
    teacher_reg = []
    for lvl, m in zip(teacher_maps.levels, mask.levels):
        if lvl.cls.shape[:2] != m.shape:
            raise ValueError(
                f"mask shape {m.shape} does not match maps {tuple(lvl.cls.shape[:2])}"
            )
        gate = torch.from_numpy(m.astype(np.float64)).to(lvl.cls.dtype).unsqueeze(-1)
        soft_cls.append(lvl.cls.detach() * gate)
        teacher_reg.append(lvl.reg.detach())
    return DensePseudoLabel(mask=mask, soft_cls=soft_cls, teacher_reg=teacher_reg)


def quality_focal_loss_sum(
    pred: torch.Tensor, soft_target: torch.Tensor, exponent: float = 2.0
) -> torch.Tensor:
    """Quality focal loss against soft targets, summed over entries.

    |t - p|^exponent modulates the binary cross-entropy between the
    predicted probability p and the soft target t; the term vanishes exactly
    when p equals t.
    """
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = soft_target.clamp(0.0, 1.0)
    bce = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))
    return ((t - p).abs() ** exponent * bce).sum()


def unsupervised_loss(
    student_maps: DenseScoreMaps, pseudo: DensePseudoLabel
) -> "LossPair":
    """Dense distillation loss between the student and the pseudo-label.

    Classification: quality focal loss between student probabilities and the
    gated teacher soft scores over ALL pixels, so zero targets outside the
    mask actively suppress the student. Regression: smooth-L1 between the
    student and teacher regression vectors at selected pixels only. Both are
    normalized by max(1, k_selected).
    """
    from .detector import LossPair, _check_finite

    _check_finite(student_maps)
    if len(student_maps.levels) != len(pseudo.soft_cls):
        raise ValueError("level count mismatch between student maps and pseudo-label")
    n_norm = max(1, pseudo.mask.k_selected)
    cls_loss = None
    reg_loss = None
    for lvl, soft, treg, m in zip(
        student_maps.levels, pseudo.soft_cls, pseudo.teacher_reg, pseudo.mask.levels
    ):
        if tuple(lvl.cls.shape) != tuple(soft.shape):
            raise ValueError("student/teacher map shape mismatch")
        term = quality_focal_loss_sum(lvl.cls, soft.to(lvl.cls.dtype))
        cls_loss = term if cls_loss is None else cls_loss + term
        if m.any():
            sel = torch.from_numpy(m)
            rterm = F.smooth_l1_loss(
                lvl.reg[sel], treg.to(lvl.reg.dtype)[sel], reduction="sum", beta=1.0
            )
            reg_loss = rterm if reg_loss is None else reg_loss + rterm
    zero = torch.zeros((), dtype=student_maps.levels[0].cls.dtype)
    cls_loss = (cls_loss if cls_loss is not None else zero) / n_norm
    reg_loss = (reg_loss if reg_loss is not None else zero) / n_norm
    return LossPair(cls=cls_loss, reg=reg_loss)
