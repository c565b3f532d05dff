"""Tiny one-stage rotated detector with an FPN and dense per-pixel outputs.

Architecture (desk scale): a 3-stage convolutional backbone (widths
16/32/64), a 3-level FPN at strides {4, 8, 16}, and a shared head of two
conv blocks feeding a C-channel sigmoid classification map and a 5-channel
regression map per level.

Map layout: classification maps are (H_l, W_l, C) post-sigmoid
probabilities; regression maps are (H_l, W_l, 5) with channels
(dx, dy, dw, dh, theta). Offsets dx/dy are in units of the level stride,
dw/dh are log(size/stride), and theta is tanh-bounded into (-pi/2, pi/2).
A pixel at row i, column j of level l sits at image location
((j + 0.5) * stride_l, (i + 0.5) * stride_l).
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import HALF_PI, OrientedBox, points_in_box, rotated_nms

INF = float("inf")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    backbone_channels: tuple[int, int, int] = (16, 32, 64)
    fpn_channels: int = 16
    head_blocks: int = 2
    strides: tuple[int, ...] = (4, 8, 16)
    scale_ranges: tuple[tuple[float, float], ...] = ((0.0, 64.0), (64.0, 128.0), (128.0, INF))
    prior_prob: float = 0.01
    gn_groups: int = 4


@dataclass
class LevelMaps:
    """Dense outputs of one FPN level."""

    cls: torch.Tensor  # (H, W, C) probabilities in [0, 1]
    reg: torch.Tensor  # (H, W, 5)
    stride: int


@dataclass
class DenseScoreMaps:
    """Per-level dense score and regression maps."""

    levels: tuple[LevelMaps, ...]

    @property
    def n_total(self) -> int:
        return sum(l.cls.shape[0] * l.cls.shape[1] for l in self.levels)

    def detach(self) -> "DenseScoreMaps":
        return DenseScoreMaps(
            levels=tuple(
                LevelMaps(l.cls.detach(), l.reg.detach(), l.stride) for l in self.levels
            )
        )

    def validate_probabilities(self) -> None:
        for l in self.levels:
            c = l.cls.detach()
            if c.numel() and (c.min() < 0 or c.max() > 1):
                raise ValueError("classification maps must lie in [0, 1]")


def maps_from_arrays(
    cls_arrays: list[np.ndarray], reg_arrays: list[np.ndarray] | None = None,
    strides: list[int] | None = None,
) -> DenseScoreMaps:
    """Build DenseScoreMaps from numpy arrays (test and tooling helper)."""
    levels = []
    for i, cls in enumerate(cls_arrays):
        cls_t = torch.as_tensor(cls)
        if reg_arrays is not None:
            reg_t = torch.as_tensor(reg_arrays[i])
        else:
            reg_t = torch.zeros(cls_t.shape[0], cls_t.shape[1], 5, dtype=cls_t.dtype)
        stride = strides[i] if strides is not None else 2**i
        levels.append(LevelMaps(cls=cls_t, reg=reg_t, stride=stride))
    return DenseScoreMaps(levels=tuple(levels))


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, groups: int = 4):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride, 1)
        self.norm = nn.GroupNorm(groups, cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)), inplace=True)


class DenseRotatedDetector(nn.Module):
    """Backbone + FPN + shared dense head producing DenseScoreMaps."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        c1, c2, c3 = cfg.backbone_channels
        g = cfg.gn_groups
        self.stem = ConvBlock(3, c1, stride=2, groups=g)
        self.stage1 = ConvBlock(c1, c1, stride=2, groups=g)
        self.stage2 = ConvBlock(c1, c2, stride=2, groups=g)
        self.stage3 = ConvBlock(c2, c3, stride=2, groups=g)
        fc = cfg.fpn_channels
        self.lateral = nn.ModuleList([nn.Conv2d(c, fc, 1) for c in (c1, c2, c3)])
        self.fpn_out = nn.ModuleList([nn.Conv2d(fc, fc, 3, 1, 1) for _ in cfg.strides])
        self.head = nn.Sequential(
            *[ConvBlock(fc, fc, groups=g) for _ in range(cfg.head_blocks)]
        )
        self.cls_out = nn.Conv2d(fc, cfg.num_classes, 3, 1, 1)
        self.reg_out = nn.Conv2d(fc, 5, 3, 1, 1)
        self._init_heads()

    def _init_heads(self) -> None:
        # Zero weights + focal prior bias give exactly sigmoid(bias) at init.
        nn.init.zeros_(self.cls_out.weight)
        prior = self.cfg.prior_prob
        nn.init.constant_(self.cls_out.bias, -math.log((1.0 - prior) / prior))
        nn.init.normal_(self.reg_out.weight, std=0.01)
        nn.init.zeros_(self.reg_out.bias)

    def forward(self, image: np.ndarray | torch.Tensor) -> DenseScoreMaps:
        """Run the detector on one (H, W, 3) image with values in [0, 1].

        H and W must be divisible by the largest stride.
        """
        if isinstance(image, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(image))
        else:
            x = image
        if x.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got shape {tuple(x.shape)}")
        h, w = int(x.shape[0]), int(x.shape[1])
        max_stride = max(self.cfg.strides)
        if h % max_stride or w % max_stride:
            raise ValueError(
                f"image sides must be divisible by {max_stride}, got {h}x{w}"
            )
        dtype = next(self.parameters()).dtype
        x = x.to(dtype).permute(2, 0, 1).unsqueeze(0)
        c3 = self.stage1(self.stem(x))
        c4 = self.stage2(c3)
        c5 = self.stage3(c4)
        p5 = self.lateral[2](c5)
        p4 = self.lateral[1](c4) + F.interpolate(p5, scale_factor=2, mode="nearest")
        p3 = self.lateral[0](c3) + F.interpolate(p4, scale_factor=2, mode="nearest")
        levels = []
        for i, p in enumerate((p3, p4, p5)):
            feat = self.head(self.fpn_out[i](p))
            cls = torch.sigmoid(self.cls_out(feat))[0].permute(1, 2, 0)
            reg = self.reg_out(feat)[0].permute(1, 2, 0)
            reg = torch.cat(
                [reg[..., :4], torch.tanh(reg[..., 4:5]) * HALF_PI], dim=-1
            )
            levels.append(
                LevelMaps(cls=cls.contiguous(), reg=reg.contiguous(), stride=self.cfg.strides[i])
            )
        return DenseScoreMaps(levels=tuple(levels))


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------


@dataclass
class LevelTargets:
    target_class: np.ndarray  # (H, W) int32, -1 = background
    target_box: np.ndarray  # (H, W, 5) float32, encoded like the reg maps
    positive_mask: np.ndarray  # (H, W) bool


@dataclass
class AssignmentResult:
    levels: list[LevelTargets]

    @property
    def num_positives(self) -> int:
        return int(sum(l.positive_mask.sum() for l in self.levels))


def assign_targets(
    boxes: list[OrientedBox], image_hw: tuple[int, int], cfg: ModelConfig
) -> AssignmentResult:
    """FCOS-style assignment adapted to rotated boxes.

    A pixel is positive for a box iff its image-plane center lies inside the
    box and the box's long edge falls in the level's scale range; among
    multiple matches the smallest-area box wins, ties broken by the lowest
    box index. Targets are encoded in the network's regression
    parameterization.
    """
    h, w = image_hw
    levels = []
    for li, stride in enumerate(cfg.strides):
        gh, gw = h // stride, w // stride
        target_class = np.full((gh, gw), -1, dtype=np.int32)
        target_box = np.zeros((gh, gw, 5), dtype=np.float32)
        best_area = np.full((gh, gw), np.inf, dtype=np.float64)
        lo, hi = cfg.scale_ranges[li]
        candidates = [
            (idx, b) for idx, b in enumerate(boxes) if lo <= max(b.w, b.h) < hi
        ]
        if candidates:
            jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
            px = (jj + 0.5) * stride
            py = (ii + 0.5) * stride
            for _idx, box in candidates:
                inside = points_in_box(px, py, box)
                take = inside & (box.area() < best_area)
                if not take.any():
                    continue
                best_area[take] = box.area()
                target_class[take] = box.class_id
                target_box[take, 0] = ((box.cx - px[take]) / stride).astype(np.float32)
                target_box[take, 1] = ((box.cy - py[take]) / stride).astype(np.float32)
                target_box[take, 2] = math.log(box.w / stride)
                target_box[take, 3] = math.log(box.h / stride)
                target_box[take, 4] = box.theta
        levels.append(
            LevelTargets(
                target_class=target_class,
                target_box=target_box,
                positive_mask=target_class >= 0,
            )
        )
    return AssignmentResult(levels=levels)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

PROB_EPS = 1e-6


@dataclass
class LossPair:
    """Classification and regression loss terms (torch scalars)."""

    cls: torch.Tensor
    reg: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.cls + self.reg


def _check_finite(maps: DenseScoreMaps) -> None:
    for l in maps.levels:
        if not (torch.isfinite(l.cls).all() and torch.isfinite(l.reg).all()):
            raise ValueError("non-finite values in dense maps (training divergence)")


def focal_loss_sum(p: torch.Tensor, onehot: torch.Tensor, gamma: float, alpha: float) -> torch.Tensor:
    """Sigmoid focal loss summed over all entries; p are probabilities."""
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pos = -alpha * (1.0 - p) ** gamma * torch.log(p)
    neg = -(1.0 - alpha) * p**gamma * torch.log(1.0 - p)
    return (torch.where(onehot > 0, pos, neg)).sum()


def supervised_loss(
    preds: DenseScoreMaps,
    targets: AssignmentResult,
    num_classes: int,
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> LossPair:
    """Focal classification loss over all pixels plus smooth-L1 regression
    over positive pixels, both normalized by max(1, #positives)."""
    _check_finite(preds)
    n_pos = max(1, targets.num_positives)
    cls_loss = None
    reg_loss = None
    for lvl, tgt in zip(preds.levels, targets.levels):
        tc = torch.from_numpy(tgt.target_class.astype(np.int64))
        onehot = torch.zeros(
            tc.shape[0], tc.shape[1], num_classes, dtype=lvl.cls.dtype
        )
        pos_mask = torch.from_numpy(tgt.positive_mask)
        if pos_mask.any():
            onehot[pos_mask] = F.one_hot(tc[pos_mask], num_classes).to(lvl.cls.dtype)
        term = focal_loss_sum(lvl.cls, onehot, gamma, alpha)
        cls_loss = term if cls_loss is None else cls_loss + term
        if pos_mask.any():
            tb = torch.from_numpy(tgt.target_box).to(lvl.reg.dtype)
            rterm = F.smooth_l1_loss(
                lvl.reg[pos_mask], tb[pos_mask], reduction="sum", beta=1.0
            )
            reg_loss = rterm if reg_loss is None else reg_loss + rterm
    zero = torch.zeros((), dtype=preds.levels[0].cls.dtype)
    cls_loss = (cls_loss if cls_loss is not None else zero) / n_pos
    reg_loss = (reg_loss if reg_loss is not None else zero) / n_pos
    return LossPair(cls=cls_loss, reg=reg_loss)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def decode_predictions(
    maps: DenseScoreMaps,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_before_nms: int = 300,
) -> list[OrientedBox]:
    """Decode dense maps into scored boxes with per-class rotated NMS.

    Used for evaluation only; the pseudo-label path never decodes.
    """
    candidates: list[OrientedBox] = []
    for lvl in maps.levels:
        cls = lvl.cls.detach().cpu().numpy()
        reg = lvl.reg.detach().cpu().numpy()
        scores = cls.max(axis=2)
        classes = cls.argmax(axis=2)
        rows, cols = np.nonzero(scores >= score_thresh)
        stride = lvl.stride
        for i, j in zip(rows, cols):
            px = (j + 0.5) * stride
            py = (i + 0.5) * stride
            dx, dy, dw, dh, theta = reg[i, j]
            candidates.append(
                OrientedBox(
                    cx=px + dx * stride,
                    cy=py + dy * stride,
                    w=math.exp(min(dw, 12.0)) * stride,
                    h=math.exp(min(dh, 12.0)) * stride,
                    theta=theta,
                    class_id=int(classes[i, j]),
                    score=float(scores[i, j]),
                )
            )
    candidates.sort(key=lambda b: -b.score)
    return rotated_nms(candidates[:max_before_nms], nms_iou)


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------


def params_to_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def arrays_into_module(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)


def save_checkpoint(path: str, payload: dict) -> None:
    """Pickle a checkpoint payload; bytes are a pure function of content."""
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh)
