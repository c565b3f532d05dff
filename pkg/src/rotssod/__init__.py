"""Desk-scale semi-supervised oriented object detection.

A teacher-student framework around a tiny rotated one-stage detector where
dense pseudo-labels are selected adaptively by an estimated object density
score, plus the synthetic data tooling, baselines and evaluators needed to
verify its behavior.
"""

from .geometry import OrientedBox, rotated_iou, point_in_box
from .datasets import DensityProfile, SceneSample, TileSpec, generate_scene, tile_offsets
from .detector import DenseRotatedDetector, DenseScoreMaps, ModelConfig
from .pseudolabel import (
    compute_pds,
    select_ddpls,
    select_fixed_ratio,
    build_dense_pseudo_label,
    unsupervised_loss,
)
from .training import ExperimentConfig, run_training
from .evaluation import evaluate

__version__ = "0.1.0"

__all__ = [
    "OrientedBox",
    "rotated_iou",
    "point_in_box",
    "DensityProfile",
    "SceneSample",
    "TileSpec",
    "generate_scene",
    "tile_offsets",
    "DenseRotatedDetector",
    "DenseScoreMaps",
    "ModelConfig",
    "compute_pds",
    "select_ddpls",
    "select_fixed_ratio",
    "build_dense_pseudo_label",
    "unsupervised_loss",
    "ExperimentConfig",
    "run_training",
    "evaluate",
]
