"""Weak and strong augmentation pipelines for the teacher-student loop.

Weak views apply only geometry (scale jitter, flips); strong views add
photometric noise (color jitter, grayscale, Gaussian blur) on top of the
same kind of geometry. By default the weak and strong views of one image
share the geometric draw (they differ only photometrically), which keeps
teacher and student score maps pixel-aligned; an independent-geometry mode
is available and reconciled by align_teacher_to_student.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .datasets import SceneSample, stable_seed
from .geometry import OrientedBox, normalize_angle


@dataclass(frozen=True)
class AugmentConfig:
    """Parameter ranges for both pipelines."""

    scale_jitter: bool = True
    scale_range: tuple[float, float] = (0.5, 1.5)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    color_jitter: float = 0.4
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    photometric: bool = True
    independent_geometry: bool = False
    pad_multiple: int = 16


@dataclass(frozen=True)
class GeoTransform:
    """Invertible record of the geometric part of an augmentation.

    Order of application: scale, then flips, then zero padding at the
    bottom/right up to a multiple of pad_multiple. Flips mirror within the
    scaled content size, so padding never moves content.
    """

    scale: float
    hflip: bool
    vflip: bool
    src_hw: tuple[int, int]
    scaled_hw: tuple[int, int]
    padded_hw: tuple[int, int]

    def apply_to_image(self, image: np.ndarray) -> np.ndarray:
        sh, sw = self.scaled_hw
        if (sh, sw) != self.src_hw:
            t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
            t = F.interpolate(t, size=(sh, sw), mode="bilinear", align_corners=False)
            image = t[0].permute(1, 2, 0).numpy()
        if self.hflip:
            image = image[:, ::-1, :]
        if self.vflip:
            image = image[::-1, :, :]
        ph, pw = self.padded_hw
        out = np.zeros((ph, pw, image.shape[2]), dtype=np.float32)
        out[:sh, :sw, :] = image
        return out

    def apply_to_box(self, box: OrientedBox) -> OrientedBox:
        cx = box.cx * self.scale
        cy = box.cy * self.scale
        theta = box.theta
        sh, sw = self.scaled_hw
        if self.hflip:
            cx = sw - cx
            theta = -theta
        if self.vflip:
            cy = sh - cy
            theta = -theta
        return replace(
            box,
            cx=cx,
            cy=cy,
            w=box.w * self.scale,
            h=box.h * self.scale,
            theta=normalize_angle(theta),
        )

    def invert_box(self, box: OrientedBox) -> OrientedBox:
        cx, cy, theta = box.cx, box.cy, box.theta
        sh, sw = self.scaled_hw
        if self.vflip:
            cy = sh - cy
            theta = -theta
        if self.hflip:
            cx = sw - cx
            theta = -theta
        return replace(
            box,
            cx=cx / self.scale,
            cy=cy / self.scale,
            w=box.w / self.scale,
            h=box.h / self.scale,
            theta=normalize_angle(theta),
        )

    def apply_to_point(self, x: float, y: float) -> tuple[float, float]:
        x *= self.scale
        y *= self.scale
        if self.hflip:
            x = self.scaled_hw[1] - x
        if self.vflip:
            y = self.scaled_hw[0] - y
        return x, y

    def invert_point(self, x: float, y: float) -> tuple[float, float]:
        if self.vflip:
            y = self.scaled_hw[0] - y
        if self.hflip:
            x = self.scaled_hw[1] - x
        return x / self.scale, y / self.scale


@dataclass
class AugmentedView:
    """One augmented rendering of a sample plus its transform records."""

    image: np.ndarray
    geo: GeoTransform
    photometric_record: list[tuple[str, float]] = field(default_factory=list)
    rng_seed: int = 0


def identity_geo(src_hw: tuple[int, int], pad_multiple: int = 16) -> GeoTransform:
    h, w = src_hw
    ph = int(math.ceil(h / pad_multiple)) * pad_multiple
    pw = int(math.ceil(w / pad_multiple)) * pad_multiple
    return GeoTransform(1.0, False, False, src_hw, src_hw, (ph, pw))


def _draw_geo(src_hw: tuple[int, int], seed: int, cfg: AugmentConfig) -> GeoTransform:
    rng = np.random.default_rng(stable_seed(seed, "geo"))
    scale = float(rng.uniform(*cfg.scale_range)) if cfg.scale_jitter else 1.0
    hflip = bool(rng.uniform() < cfg.hflip_p)
    vflip = bool(rng.uniform() < cfg.vflip_p)
    h, w = src_hw
    sh = max(1, int(round(h * scale)))
    sw = max(1, int(round(w * scale)))
    scale_eff = sh / h  # re-derive so box and image scaling agree exactly
    m = cfg.pad_multiple
    ph = int(math.ceil(sh / m)) * m
    pw = int(math.ceil(sw / m)) * m
    return GeoTransform(scale_eff, hflip, vflip, src_hw, (sh, sw), (ph, pw))


def transform_boxes(geo: GeoTransform, boxes: list[OrientedBox]) -> list[OrientedBox]:
    return [geo.apply_to_box(b) for b in boxes]


def invert_boxes(geo: GeoTransform, boxes: list[OrientedBox]) -> list[OrientedBox]:
    return [geo.invert_box(b) for b in boxes]


def weak_augment(sample: SceneSample, seed: int, cfg: AugmentConfig) -> AugmentedView:
    """Geometric-only view: scale jitter and random flips, seeded."""
    geo = _draw_geo(sample.image.shape[:2], seed, cfg)
    return AugmentedView(image=geo.apply_to_image(sample.image), geo=geo, rng_seed=seed)


def _luminance(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Channelwise Gaussian blur with a boundary-renormalized kernel.

    Zero padding would darken borders, so the filtered image is divided by
    the filtered all-ones mask; constants are preserved exactly.
    """
    mask = ndimage.gaussian_filter(
        np.ones(image.shape[:2], dtype=np.float64), sigma, mode="constant"
    )
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[..., ch] = (
            ndimage.gaussian_filter(
                image[..., ch].astype(np.float64), sigma, mode="constant"
            )
            / mask
        ).astype(image.dtype)
    return out


def strong_augment(sample: SceneSample, seed: int, cfg: AugmentConfig) -> AugmentedView:
    """Weak geometry plus photometric ops, all seeded.

    With the same seed the geometric draw matches weak_augment exactly, so
    the two views stay pixel-aligned (the photometric stream is separate).
    Pixel values are clipped to [0, 1] after every op.
    """
    geo = _draw_geo(sample.image.shape[:2], seed, cfg)
    if cfg.independent_geometry:
        geo = _draw_geo(sample.image.shape[:2], stable_seed(seed, "indep"), cfg)
    image = geo.apply_to_image(sample.image)
    record: list[tuple[str, float]] = []
    if cfg.photometric:
        rng = np.random.default_rng(stable_seed(seed, "photo"))
        j = cfg.color_jitter
        if j > 0:
            brightness = float(rng.uniform(1 - j, 1 + j))
            contrast = float(rng.uniform(1 - j, 1 + j))
            saturation = float(rng.uniform(1 - j, 1 + j))
            image = np.clip(image * brightness, 0.0, 1.0)
            gray_mean = float(_luminance(image).mean())
            image = np.clip(gray_mean + (image - gray_mean) * contrast, 0.0, 1.0)
            lum = _luminance(image)[..., None]
            image = np.clip(lum + (image - lum) * saturation, 0.0, 1.0)
            record += [
                ("brightness", brightness),
                ("contrast", contrast),
                ("saturation", saturation),
            ]
        if rng.uniform() < cfg.grayscale_p:
            image = np.repeat(_luminance(image)[..., None], 3, axis=2).astype(np.float32)
            record.append(("grayscale", 1.0))
        if rng.uniform() < cfg.blur_p:
            sigma = float(rng.uniform(*cfg.blur_sigma))
            image = np.clip(gaussian_blur(image, sigma), 0.0, 1.0)
            record.append(("blur", sigma))
    return AugmentedView(
        image=image.astype(np.float32), geo=geo, photometric_record=record, rng_seed=seed
    )


def align_teacher_to_student(teacher_maps, teacher_geo: GeoTransform, student_geo: GeoTransform):
    """Resample teacher score maps into the student view's pixel grid.

    For every student map pixel the source-image location is found through
    the student geometry's inverse and pushed through the teacher geometry;
    classification maps are sampled bilinearly, regression maps with nearest
    neighbor plus value corrections for the relative flips (sign of the
    center offsets and of the angle) and scale (log-shift of the size
    channels). Returns a new DenseScoreMaps shaped like the student's.
    """
    from .detector import DenseScoreMaps, LevelMaps

    if teacher_geo.scale <= 0 or student_geo.scale <= 0:
        raise ValueError("non-invertible geometric record")
    if teacher_geo == student_geo:
        return teacher_maps

    rel_hflip = teacher_geo.hflip != student_geo.hflip
    rel_vflip = teacher_geo.vflip != student_geo.vflip
    scale_ratio = teacher_geo.scale / student_geo.scale
    levels = []
    for lvl in teacher_maps.levels:
        stride = lvl.stride
        t_cls = lvl.cls.detach()
        t_reg = lvl.reg.detach()
        th, tw = t_cls.shape[0], t_cls.shape[1]
        # Student grid for this level, derived from its padded view size.
        sh = student_geo.padded_hw[0] // stride
        sw = student_geo.padded_hw[1] // stride
        jj, ii = np.meshgrid(np.arange(sw), np.arange(sh))
        xs = (jj + 0.5) * stride
        ys = (ii + 0.5) * stride
        src_x, src_y = _invert_points(student_geo, xs, ys)
        tx, ty = _apply_points(teacher_geo, src_x, src_y)
        fx = tx / stride - 0.5
        fy = ty / stride - 0.5
        cls_np = t_cls.cpu().numpy()
        reg_np = t_reg.cpu().numpy()
        cls_out = np.stack(
            [_bilinear(cls_np[..., c], fy, fx) for c in range(cls_np.shape[2])], axis=-1
        )
        nx = np.clip(np.round(fx).astype(np.int64), 0, tw - 1)
        ny = np.clip(np.round(fy).astype(np.int64), 0, th - 1)
        reg_out = reg_np[ny, nx, :].copy()
        inside = (fx >= -0.5) & (fx <= tw - 0.5) & (fy >= -0.5) & (fy <= th - 0.5)
        cls_out[~inside] = 0.0
        reg_out[~inside] = 0.0
        if rel_hflip:
            reg_out[..., 0] = -reg_out[..., 0]
            reg_out[..., 4] = -reg_out[..., 4]
        if rel_vflip:
            reg_out[..., 1] = -reg_out[..., 1]
            reg_out[..., 4] = -reg_out[..., 4]
        # Sizes are encoded as log(size/stride): rescale by the view ratio.
        reg_out[..., 2] -= math.log(scale_ratio)
        reg_out[..., 3] -= math.log(scale_ratio)
        levels.append(
            LevelMaps(
                cls=torch.from_numpy(cls_out.astype(cls_np.dtype)),
                reg=torch.from_numpy(reg_out.astype(reg_np.dtype)),
                stride=stride,
            )
        )
    return DenseScoreMaps(levels=tuple(levels))


def _apply_points(geo: GeoTransform, xs: np.ndarray, ys: np.ndarray):
    xs = xs * geo.scale
    ys = ys * geo.scale
    if geo.hflip:
        xs = geo.scaled_hw[1] - xs
    if geo.vflip:
        ys = geo.scaled_hw[0] - ys
    return xs, ys


def _invert_points(geo: GeoTransform, xs: np.ndarray, ys: np.ndarray):
    if geo.vflip:
        ys = geo.scaled_hw[0] - ys
    if geo.hflip:
        xs = geo.scaled_hw[1] - xs
    return xs / geo.scale, ys / geo.scale


def _bilinear(grid: np.ndarray, fy: np.ndarray, fx: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    top = grid[y0c, x0c] * (1 - wx) + grid[y0c, x1c] * wx
    bot = grid[y1c, x0c] * (1 - wx) + grid[y1c, x1c] * wx
    return top * (1 - wy) + bot * wy
