"""Teacher-student training loop: batching, burn-in, EMA, losses, logging.

Each iteration draws a batch with a fixed labeled:unlabeled ratio. Labeled
images go through the supervised pipeline under weak augmentation. For each
unlabeled image the teacher scores the weak view, density-guided selection
picks dense pseudo-labels, and the student is trained on the strong view
against them. The teacher trails the student through per-step EMA after an
initial supervised-only burn-in phase that ends with a verbatim copy.

The metrics log is JSONL with one record per step and unlabeled image
(supervised-only steps emit a single record with null selection fields),
plus one record per evaluation. All randomness is derived from the run seed,
so two runs of the same config produce byte-identical logs.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import augment as aug
from .datasets import DatasetIndex, SceneSample, stable_seed
from .detector import (
    AssignmentResult,
    DenseRotatedDetector,
    DenseScoreMaps,
    ModelConfig,
    arrays_into_module,
    assign_targets,
    decode_predictions,
    load_checkpoint,
    params_to_arrays,
    save_checkpoint,
    supervised_loss,
)
from .evaluation import EvalReport, evaluate
from .pseudolabel import (
    build_dense_pseudo_label,
    compute_pds,
    round_half_up,
    select_ddpls,
    select_fixed_ratio,
    selected_confidence_sum,
    unsupervised_loss,
)


class ConfigError(ValueError):
    """Invalid experiment or sampler configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss is encountered; a diagnostic snapshot
    has been written next to the metrics log."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Full experiment description; serializes to/from JSON."""

    data_manifest: str = ""
    out_dir: str = ""
    seed: int = 0
    iterations: int = 10000
    burn_in: int = 1000
    batch_size: int = 3
    sample_ratio: tuple[int, int] = (2, 1)
    lr: float = 0.0025
    reference_batch_size: int = 3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 2.0
    alpha_rampup: int = 500
    ema_momentum: float = 0.001
    beta: float = 100.0
    selection: str = "ddpls"  # "ddpls" or "fixed"
    fixed_ratio: float = 1.0  # percent, used when selection == "fixed"
    eval_interval: int = 2000
    checkpoint_interval: int = 5000
    eval_score_thresh: float = 0.05
    eval_nms_iou: float = 0.5
    eval_iou_thresh: float = 0.5
    torch_threads: int = 1
    augment: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.iterations < 0 or self.burn_in < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.selection not in ("ddpls", "fixed"):
            raise ConfigError(f"unknown selection mode '{self.selection}'")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        l, u = self.sample_ratio
        if l < 0 or u < 0 or (l + u) == 0:
            raise ConfigError("sample_ratio parts must be nonnegative, not both zero")
        if self.batch_size * l % (l + u) or self.batch_size * u % (l + u):
            raise ConfigError(
                f"batch_size {self.batch_size} cannot realize ratio {l}:{u} exactly"
            )

    def labeled_per_batch(self) -> int:
        l, u = self.sample_ratio
        return self.batch_size * l // (l + u)

    def unlabeled_per_batch(self) -> int:
        return self.batch_size - self.labeled_per_batch()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        ranges = []
        for lo, hi in self.model.scale_ranges:
            ranges.append([lo, None if math.isinf(hi) else hi])
        d["model"]["scale_ranges"] = ranges
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "augment" in d:
            aug_known = {f.name for f in dataclasses.fields(aug.AugmentConfig)}
            bad = set(d["augment"]) - aug_known
            if bad:
                raise ConfigError(f"unknown augment keys: {sorted(bad)}")
            for key in ("scale_range", "blur_sigma"):
                if key in d["augment"]:
                    d["augment"][key] = tuple(d["augment"][key])
            d["augment"] = aug.AugmentConfig(**d["augment"])
        if "model" in d:
            model_known = {f.name for f in dataclasses.fields(ModelConfig)}
            bad = set(d["model"]) - model_known
            if bad:
                raise ConfigError(f"unknown model keys: {sorted(bad)}")
            if "scale_ranges" in d["model"]:
                d["model"]["scale_ranges"] = tuple(
                    (lo, float("inf") if hi is None else hi)
                    for lo, hi in d["model"]["scale_ranges"]
                )
            for key in ("backbone_channels", "strides"):
                if key in d["model"]:
                    d["model"][key] = tuple(d["model"][key])
            d["model"] = ModelConfig(**d["model"])
        if "sample_ratio" in d:
            d["sample_ratio"] = tuple(d["sample_ratio"])
        return ExperimentConfig(**d)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Batch composition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int
    sample_ratio: tuple[int, int]
    labeled_pool: tuple[str, ...]
    unlabeled_pool: tuple[str, ...]
    seed: int


@dataclass
class TrainingBatch:
    iteration: int
    labeled_ids: list[str]
    unlabeled_ids: list[str]


def _cycled_id(pool: tuple[str, ...], global_index: int, seed: int, name: str) -> str:
    epoch = global_index // len(pool)
    pos = global_index % len(pool)
    perm = np.random.default_rng(stable_seed(seed, "sampler", name, epoch)).permutation(
        len(pool)
    )
    return pool[perm[pos]]


def compose_batch(cfg: SamplerConfig, iteration: int) -> TrainingBatch:
    """Deterministic batch of ids realizing the labeled:unlabeled ratio.

    Each pool is cycled independently in epoch-style reshuffled order; the
    result is a pure function of (cfg, iteration).
    """
    l, u = cfg.sample_ratio
    total = l + u
    if cfg.batch_size * l % total or cfg.batch_size * u % total:
        raise ConfigError(
            f"batch_size {cfg.batch_size} cannot realize ratio {l}:{u} exactly"
        )
    n_lab = cfg.batch_size * l // total
    n_unl = cfg.batch_size - n_lab
    if n_lab > 0 and not cfg.labeled_pool:
        raise ConfigError("labeled pool is empty but the ratio requires labeled data")
    if n_unl > 0 and not cfg.unlabeled_pool:
        raise ConfigError("unlabeled pool is empty but the ratio requires unlabeled data")
    labeled = [
        _cycled_id(cfg.labeled_pool, iteration * n_lab + s, cfg.seed, "labeled")
        for s in range(n_lab)
    ]
    unlabeled = [
        _cycled_id(cfg.unlabeled_pool, iteration * n_unl + s, cfg.seed, "unlabeled")
        for s in range(n_unl)
    ]
    return TrainingBatch(iteration=iteration, labeled_ids=labeled, unlabeled_ids=unlabeled)


# ---------------------------------------------------------------------------
# Teacher-student state
# ---------------------------------------------------------------------------


@dataclass
class TeacherStudentState:
    teacher: DenseRotatedDetector
    student: DenseRotatedDetector
    ema_momentum: float
    iteration: int = 0


def ema_update(state: TeacherStudentState) -> TeacherStudentState:
    """teacher = (1 - momentum) * teacher + momentum * student, elementwise.

    Mutates and returns the state; the student is untouched.
    """
    lam = state.ema_momentum
    t_sd = state.teacher.state_dict()
    s_sd = state.student.state_dict()
    if list(t_sd.keys()) != list(s_sd.keys()):
        raise ValueError("teacher/student parameter names do not match")
    with torch.no_grad():
        for name, t in t_sd.items():
            s = s_sd[name]
            if t.shape != s.shape:
                raise ValueError(f"shape mismatch for '{name}': {t.shape} vs {s.shape}")
            t.mul_(1.0 - lam).add_(s * lam)
    return state


def copy_student_to_teacher(state: TeacherStudentState) -> None:
    with torch.no_grad():
        s_sd = state.student.state_dict()
        for name, t in state.teacher.state_dict().items():
            t.copy_(s_sd[name])


@dataclass
class LossReport:
    l_s: float
    l_u: float
    alpha: float
    total: float
    components: dict[str, float]


@dataclass
class StepResult:
    report: LossReport
    records: list[dict]


class Trainer:
    """Owns the models, optimizer and dataset for one training run."""

    def __init__(self, cfg: ExperimentConfig, dataset: DatasetIndex):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        model_cfg = dataclasses.replace(
            cfg.model, num_classes=len(dataset.class_names)
        )
        torch.manual_seed(cfg.seed)
        student = DenseRotatedDetector(model_cfg)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        teacher.eval()
        self.state = TeacherStudentState(
            teacher=teacher, student=student, ema_momentum=cfg.ema_momentum
        )
        self.model_cfg = model_cfg
        lr = cfg.lr * cfg.batch_size / cfg.reference_batch_size
        self.optimizer = torch.optim.SGD(
            student.parameters(),
            lr=lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        self.sampler = SamplerConfig(
            batch_size=cfg.batch_size,
            sample_ratio=cfg.sample_ratio,
            labeled_pool=tuple(dataset.labeled_ids),
            unlabeled_pool=tuple(dataset.unlabeled_ids),
            seed=cfg.seed,
        )

    # -- individual pieces -------------------------------------------------

    def _supervised_terms(self, sample: SceneSample, seed: int):
        view = aug.weak_augment(sample, seed, self.cfg.augment)
        boxes = aug.transform_boxes(view.geo, sample.boxes)
        maps = self.state.student(view.image)
        targets = assign_targets(boxes, view.image.shape[:2], self.model_cfg)
        return supervised_loss(maps, targets, self.model_cfg.num_classes)

    def _unsupervised_terms(self, sample: SceneSample, seed: int):
        weak = aug.weak_augment(sample, seed, self.cfg.augment)
        strong = aug.strong_augment(sample, seed, self.cfg.augment)
        with torch.inference_mode():
            teacher_maps = self.state.teacher(weak.image)
        teacher_maps = DenseScoreMaps(
            levels=tuple(
                type(lvl)(lvl.cls.clone(), lvl.reg.clone(), lvl.stride)
                for lvl in teacher_maps.levels
            )
        )
        if self.cfg.augment.independent_geometry:
            teacher_maps = aug.align_teacher_to_student(teacher_maps, weak.geo, strong.geo)
        pds = compute_pds(teacher_maps)
        if self.cfg.selection == "ddpls":
            mask = select_ddpls(teacher_maps, self.cfg.beta)
        else:
            mask = select_fixed_ratio(teacher_maps, self.cfg.fixed_ratio)
        pseudo = build_dense_pseudo_label(teacher_maps, mask)
        student_maps = self.state.student(strong.image)
        losses = unsupervised_loss(student_maps, pseudo)
        selection_info = {
            "s_pds": pds.s_pds,
            "k_selected": mask.k_selected,
            "n_total": pds.n_total,
            "beta": mask.beta,
            "confidence_sum": selected_confidence_sum(pds, mask),
        }
        return losses, selection_info

    def effective_alpha(self, iteration: int) -> float:
        if iteration < self.cfg.burn_in:
            return 0.0
        if self.cfg.alpha_rampup <= 0:
            return self.cfg.alpha
        progress = (iteration - self.cfg.burn_in) / self.cfg.alpha_rampup
        return self.cfg.alpha * min(1.0, progress)

    def train_step(self, batch: TrainingBatch) -> StepResult:
        """One optimization step; returns the loss report and log records."""
        cfg = self.cfg
        it = batch.iteration
        self.state.student.train()
        zero = torch.zeros(())
        l_s_cls = zero
        l_s_reg = zero
        for slot, sid in enumerate(batch.labeled_ids):
            sample = self.dataset.load(sid)
            pair = self._supervised_terms(sample, stable_seed(cfg.seed, "aug", it, "lab", slot))
            l_s_cls = l_s_cls + pair.cls
            l_s_reg = l_s_reg + pair.reg
        n_l = max(1, len(batch.labeled_ids))
        l_s = (l_s_cls + l_s_reg) / n_l

        in_burn_in = it < cfg.burn_in
        selections: list[dict] = []
        l_u_cls = zero
        l_u_reg = zero
        if not in_burn_in and batch.unlabeled_ids:
            for slot, sid in enumerate(batch.unlabeled_ids):
                sample = self.dataset.load(sid)
                pair, info = self._unsupervised_terms(
                    sample, stable_seed(cfg.seed, "aug", it, "unl", slot)
                )
                l_u_cls = l_u_cls + pair.cls
                l_u_reg = l_u_reg + pair.reg
                selections.append(info)
            n_u = len(batch.unlabeled_ids)
            l_u = (l_u_cls + l_u_reg) / n_u
        else:
            n_u = 1
            l_u = zero

        alpha = self.effective_alpha(it)
        total_t = l_s + alpha * l_u
        if not torch.isfinite(total_t):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        if total_t.requires_grad:
            self.optimizer.zero_grad(set_to_none=True)
            total_t.backward()
            self.optimizer.step()
        if not in_burn_in:
            ema_update(self.state)
        self.state.iteration = it + 1

        l_s_f = float(l_s.detach())
        l_u_f = float(l_u.detach())
        report = LossReport(
            l_s=l_s_f,
            l_u=l_u_f,
            alpha=alpha,
            total=l_s_f + alpha * l_u_f,
            components={
                "l_s_cls": float(l_s_cls.detach()) / n_l,
                "l_s_reg": float(l_s_reg.detach()) / n_l,
                "l_u_cls": float(l_u_cls.detach()) / n_u,
                "l_u_reg": float(l_u_reg.detach()) / n_u,
            },
        )
        records = []
        base = {
            "type": "train",
            "iteration": it,
            "l_s": report.l_s,
            "l_u": report.l_u,
            "alpha": report.alpha,
            "total": report.total,
            **report.components,
        }
        if selections:
            for info in selections:
                records.append({**base, **info})
        else:
            records.append(
                {
                    **base,
                    "s_pds": None,
                    "k_selected": None,
                    "n_total": None,
                    "beta": None,
                    "confidence_sum": None,
                }
            )
        return StepResult(report=report, records=records)

    # -- evaluation and checkpoints ----------------------------------------

    def evaluate_model(self, which: str = "teacher") -> EvalReport:
        model = self.state.teacher if which == "teacher" else self.state.student
        model.eval()
        preds = []
        gts = []
        with torch.no_grad():
            for vid in self.dataset.val_ids:
                sample = self.dataset.load(vid)
                geo = aug.identity_geo(
                    sample.image.shape[:2], self.cfg.augment.pad_multiple
                )
                maps = model(geo.apply_to_image(sample.image))
                preds.append(
                    decode_predictions(
                        maps, self.cfg.eval_score_thresh, self.cfg.eval_nms_iou
                    )
                )
                gts.append(sample.boxes)
        if which == "student":
            self.state.student.train()
        return evaluate(
            preds, gts, self.model_cfg.num_classes, self.cfg.eval_iou_thresh
        )

    def checkpoint_payload(self) -> dict:
        momentum = {}
        name_of = {id(p): n for n, p in self.state.student.named_parameters()}
        for p, st in self.optimizer.state.items():
            if "momentum_buffer" in st and st["momentum_buffer"] is not None:
                momentum[name_of[id(p)]] = st["momentum_buffer"].cpu().numpy().copy()
        return {
            "iteration": self.state.iteration,
            "config_hash": self.cfg.config_hash(),
            "config": self.cfg.to_dict(),
            "teacher": params_to_arrays(self.state.teacher),
            "student": params_to_arrays(self.state.student),
            "optimizer_momentum": momentum,
        }

    def restore(self, payload: dict) -> None:
        if payload.get("config_hash") != self.cfg.config_hash():
            raise ConfigError(
                "checkpoint was produced by a different configuration "
                f"({payload.get('config_hash')} != {self.cfg.config_hash()})"
            )
        arrays_into_module(self.state.teacher, payload["teacher"])
        arrays_into_module(self.state.student, payload["student"])
        self.state.iteration = int(payload["iteration"])
        params = dict(self.state.student.named_parameters())
        for name, buf in payload.get("optimizer_momentum", {}).items():
            p = params[name]
            self.optimizer.state[p]["momentum_buffer"] = torch.from_numpy(buf.copy())


def run_training(
    cfg: ExperimentConfig, resume_from: str | None = None
) -> dict:
    """Run the full two-phase schedule; returns a summary dict.

    Writes metrics.jsonl, config.json, periodic and final checkpoints, and
    eval_final.json under cfg.out_dir.
    """
    cfg.validate()
    torch.set_num_threads(max(1, cfg.torch_threads))
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset = DatasetIndex(cfg.data_manifest)
    trainer = Trainer(cfg, dataset)
    save_config(cfg, os.path.join(cfg.out_dir, "config.json"))
    start_iter = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        trainer.restore(payload)
        start_iter = trainer.state.iteration

    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    mode = "a" if start_iter > 0 else "w"
    final_eval: EvalReport | None = None
    last_eval_iter = -1
    with open(metrics_path, mode) as log:

        def emit(record: dict) -> None:
            log.write(json.dumps(record) + "\n")

        def run_eval(iteration: int) -> EvalReport:
            which = "teacher" if iteration >= cfg.burn_in else "student"
            rep = trainer.evaluate_model(which)
            emit(
                {
                    "type": "eval",
                    "iteration": iteration,
                    "model": which,
                    "map": rep.map,
                    "per_class_ap": rep.per_class_ap,
                }
            )
            return rep

        try:
            for it in range(start_iter, cfg.iterations):
                batch = compose_batch(trainer.sampler, it)
                result = trainer.train_step(batch)
                for rec in result.records:
                    emit(rec)
                if trainer.state.iteration == cfg.burn_in:
                    copy_student_to_teacher(trainer.state)
                if cfg.eval_interval and trainer.state.iteration % cfg.eval_interval == 0:
                    final_eval = run_eval(trainer.state.iteration)
                    last_eval_iter = trainer.state.iteration
                if (
                    cfg.checkpoint_interval
                    and trainer.state.iteration % cfg.checkpoint_interval == 0
                    and trainer.state.iteration < cfg.iterations
                ):
                    save_checkpoint(
                        os.path.join(
                            cfg.out_dir, f"checkpoint_{trainer.state.iteration:07d}.pkl"
                        ),
                        trainer.checkpoint_payload(),
                    )
        except TrainingDiverged:
            save_checkpoint(
                os.path.join(cfg.out_dir, "diverged_snapshot.pkl"),
                trainer.checkpoint_payload(),
            )
            raise
        if last_eval_iter != trainer.state.iteration:
            final_eval = run_eval(trainer.state.iteration)

    save_checkpoint(
        os.path.join(cfg.out_dir, "checkpoint_final.pkl"), trainer.checkpoint_payload()
    )
    with open(os.path.join(cfg.out_dir, "eval_final.json"), "w") as fh:
        json.dump(final_eval.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "final_map": final_eval.map,
        "iterations": trainer.state.iteration,
        "metrics_path": metrics_path,
        "out_dir": cfg.out_dir,
    }
