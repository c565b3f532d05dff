"""Synthetic dense-scene data, DOTA-format ingestion, tiling, density stats.

Scenes are rendered deterministically from a (profile, id) pair: filled
rotated rectangles with per-class color motifs over a noisy background,
concentrated in Gaussian clusters to mimic the dense object distribution of
aerial imagery. A uniform profile (background_fraction=1) produces the
evenly-spread counterpart used for density comparisons.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import GeometryError, OrientedBox, points_in_box

DOTA_HEADER_PREFIXES = ("imagesource", "gsd")

# Labeled-fraction presets, in percent.
FRACTION_PRESETS = (1, 5, 10, 20, 30)


class GenerationError(ValueError):
    """Raised when a density profile cannot produce a valid scene."""


class DotaParseError(ValueError):
    """Raised on malformed annotation lines; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def stable_seed(*parts) -> int:
    """Derive a 63-bit seed from arbitrary parts, stable across processes."""
    key = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class TileSpec:
    """Sliding-window tiling parameters."""

    tile_size: int
    overlap: int

    def __post_init__(self) -> None:
        if not (0 <= self.overlap < self.tile_size):
            raise ValueError(
                f"need 0 <= overlap < tile_size, got {self.overlap}, {self.tile_size}"
            )


@dataclass(frozen=True)
class DensityProfile:
    """Controls for the synthetic scene generator.

    Objects are drawn in `num_clusters` Gaussian clusters; a
    `background_fraction` share of each cluster's objects escapes the
    cluster and lands uniformly anywhere in the image, so 1.0 yields an
    evenly-spread (COCO-like) layout and 0.0 a fully clustered one.
    """

    num_clusters: int = 2
    objects_per_cluster: tuple[int, int] = (6, 12)
    cluster_radius: float = 24.0
    background_fraction: float = 0.1
    class_count: int = 3
    scale_range: tuple[float, float] = (9.0, 20.0)
    aspect_range: tuple[float, float] = (0.45, 0.85)
    image_size: int = 128
    clutter: tuple[int, int] = (4, 9)
    noise: float = 0.04
    seed: int = 0

    def validate(self) -> None:
        if self.num_clusters < 0:
            raise GenerationError("num_clusters must be >= 0")
        if self.class_count < 1:
            raise GenerationError("class_count must be >= 1")
        lo, hi = self.objects_per_cluster
        if not (0 <= lo <= hi):
            raise GenerationError("objects_per_cluster must be a nonnegative range")
        slo, shi = self.scale_range
        if not (0 < slo <= shi):
            raise GenerationError("scale_range must be positive")
        if not (0.0 <= self.background_fraction <= 1.0):
            raise GenerationError("background_fraction must be in [0, 1]")
        if self.num_clusters > 0 and self.cluster_radius < shi:
            raise GenerationError(
                f"cluster_radius {self.cluster_radius} cannot fit objects up to "
                f"scale {shi}"
            )


@dataclass
class SceneSample:
    """One image with its oriented-box annotations.

    When is_labeled is False the training consumer must not look at `boxes`;
    they are retained on disk only for post-hoc density analysis.
    """

    image: np.ndarray
    boxes: list[OrientedBox]
    id: str
    is_labeled: bool = True


# Class color prototypes (RGB in [0,1]); cycled when class_count exceeds them.
_CLASS_COLORS = np.array(
    [
        [0.82, 0.22, 0.18],
        [0.20, 0.36, 0.82],
        [0.83, 0.76, 0.20],
        [0.25, 0.70, 0.35],
        [0.70, 0.30, 0.75],
        [0.85, 0.50, 0.15],
        [0.25, 0.75, 0.75],
        [0.55, 0.55, 0.30],
    ],
    dtype=np.float64,
)


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    """Low-frequency tinted background plus per-pixel noise."""
    coarse = rng.uniform(0.30, 0.55, size=(8, 8, 3))
    reps = int(math.ceil(size / 8))
    img = np.kron(coarse, np.ones((reps, reps, 1)))[:size, :size, :]
    img += rng.normal(0.0, noise, size=img.shape)
    return img


def _paint_box(img: np.ndarray, box: OrientedBox, color: np.ndarray, motif: int) -> None:
    """Rasterize a filled rotated rectangle with a small per-class motif."""
    size = img.shape[0]
    r = int(math.ceil(box.circumradius()))
    x0 = max(0, int(box.cx) - r - 1)
    x1 = min(size, int(box.cx) + r + 2)
    y0 = max(0, int(box.cy) - r - 1)
    y1 = min(size, int(box.cy) + r + 2)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    inside = points_in_box(xs + 0.5, ys + 0.5, box)
    if not inside.any():
        return
    patch = img[y0:y1, x0:x1, :]
    patch[inside] = color
    if motif == 1:
        # Bright stripe along the long axis.
        stripe = OrientedBox(box.cx, box.cy, box.w, max(box.h * 0.3, 1.0), box.theta)
        in_stripe = points_in_box(xs + 0.5, ys + 0.5, stripe)
        patch[in_stripe & inside] = np.clip(color * 1.4 + 0.1, 0.0, 1.0)
    elif motif == 2:
        # Darker core leaves a bright frame.
        if box.w > 4.0 and box.h > 4.0:
            core = OrientedBox(box.cx, box.cy, box.w - 3.0, box.h - 3.0, box.theta)
            in_core = points_in_box(xs + 0.5, ys + 0.5, core)
            patch[in_core & inside] = color * 0.55


def generate_scene(profile: DensityProfile, sample_id: str) -> SceneSample:
    """Render one synthetic scene, deterministic in (profile, sample_id)."""
    profile.validate()
    rng = np.random.default_rng(stable_seed(profile.seed, "scene", sample_id))
    size = profile.image_size
    img = _background(rng, size, profile.noise)

    # Neutral clutter rectangles that belong to no class.
    n_clutter = int(rng.integers(profile.clutter[0], profile.clutter[1] + 1))
    for _ in range(n_clutter):
        cw = rng.uniform(*profile.scale_range)
        ch = cw * rng.uniform(*profile.aspect_range)
        cx = rng.uniform(0, size)
        cy = rng.uniform(0, size)
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        gray = rng.uniform(0.38, 0.55)
        clutter_box = OrientedBox(cx, cy, cw, ch, theta)
        _paint_box(img, clutter_box, np.array([gray, gray, gray]), motif=0)

    boxes: list[OrientedBox] = []
    margin = 2.0
    for _ in range(profile.num_clusters):
        center = rng.uniform(margin, size - margin, size=2)
        lo, hi = profile.objects_per_cluster
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            if rng.uniform() < profile.background_fraction:
                cx = rng.uniform(margin, size - margin)
                cy = rng.uniform(margin, size - margin)
            else:
                for _attempt in range(100):
                    cx, cy = center + rng.normal(0.0, profile.cluster_radius / 2.0, size=2)
                    if margin <= cx <= size - margin and margin <= cy <= size - margin:
                        break
                else:
                    cx = min(max(cx, margin), size - margin)
                    cy = min(max(cy, margin), size - margin)
            w = rng.uniform(*profile.scale_range)
            h = w * rng.uniform(*profile.aspect_range)
            theta = rng.uniform(-math.pi / 2, math.pi / 2)
            class_id = int(rng.integers(0, profile.class_count))
            boxes.append(OrientedBox(cx, cy, w, h, theta, class_id=class_id))

    illumination = rng.uniform(0.82, 1.12)
    for box in boxes:
        base = _CLASS_COLORS[box.class_id % len(_CLASS_COLORS)]
        color = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        _paint_box(img, box, color, motif=box.class_id % 3)

    img = np.clip(img * illumination, 0.0, 1.0).astype(np.float32)
    return SceneSample(image=img, boxes=boxes, id=sample_id, is_labeled=True)


# ---------------------------------------------------------------------------
# DOTA annotation format
# ---------------------------------------------------------------------------


@dataclass
class ParseResult:
    """Parsed boxes plus per-line rejections (line number, reason)."""

    boxes: list[OrientedBox]
    rejections: list[tuple[int, str]] = field(default_factory=list)


def _min_area_rect(points: np.ndarray) -> tuple[float, float, float, float, float]:
    """Minimum-area enclosing rectangle of a convex polygon.

    The optimum has one side collinear with a polygon edge, so it suffices
    to try each edge direction. Returns (cx, cy, w, h, theta).
    """
    best = None
    n = len(points)
    for i in range(n):
        ex, ey = points[(i + 1) % n] - points[i]
        norm = math.hypot(ex, ey)
        if norm < 1e-12:
            continue
        c, s = ex / norm, ey / norm
        rot_x = points[:, 0] * c + points[:, 1] * s
        rot_y = -points[:, 0] * s + points[:, 1] * c
        w = rot_x.max() - rot_x.min()
        h = rot_y.max() - rot_y.min()
        area = w * h
        if best is None or area < best[0]:
            mx = (rot_x.max() + rot_x.min()) / 2.0
            my = (rot_y.max() + rot_y.min()) / 2.0
            cx = mx * c - my * s
            cy = mx * s + my * c
            best = (area, cx, cy, w, h, math.atan2(s, c))
    if best is None:
        raise GeometryError("degenerate polygon")
    _, cx, cy, w, h, theta = best
    return cx, cy, w, h, theta


def _is_convex(points: np.ndarray) -> bool:
    """True for a strictly convex, non-self-intersecting quadrilateral."""
    n = len(points)
    sign = 0
    for i in range(n):
        ax, ay = points[(i + 1) % n] - points[i]
        bx, by = points[(i + 2) % n] - points[(i + 1) % n]
        cross = ax * by - ay * bx
        if abs(cross) < 1e-12:
            return False
        cur = 1 if cross > 0 else -1
        if sign == 0:
            sign = cur
        elif cur != sign:
            return False
    return True


def parse_dota_annotations(text: str, class_table: dict[str, int]) -> ParseResult:
    """Parse DOTA-format annotation text into canonical oriented boxes.

    Each object line reads `x1 y1 x2 y2 x3 y3 x4 y4 category [difficulty]`.
    Header lines (imagesource/gsd) and `#` comments are skipped. A malformed
    line raises DotaParseError; non-convex quadrilaterals and categories
    missing from class_table are skipped and recorded as rejections.
    """
    result = ParseResult(boxes=[])
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if any(line.lower().startswith(p) for p in DOTA_HEADER_PREFIXES):
            continue
        fields = line.split()
        if len(fields) < 9:
            raise DotaParseError(line_no, f"expected >= 9 fields, got {len(fields)}")
        try:
            coords = [float(v) for v in fields[:8]]
        except ValueError as exc:
            raise DotaParseError(line_no, f"non-numeric coordinate: {exc}") from None
        category = fields[8]
        if category not in class_table:
            result.rejections.append((line_no, f"unknown category '{category}'"))
            continue
        quad = np.array(coords, dtype=np.float64).reshape(4, 2)
        if not _is_convex(quad):
            result.rejections.append((line_no, "non-convex or degenerate quadrilateral"))
            continue
        cx, cy, w, h, theta = _min_area_rect(quad)
        try:
            box = OrientedBox(cx, cy, w, h, theta, class_id=class_table[category])
        except GeometryError:
            result.rejections.append((line_no, "zero-area quadrilateral"))
            continue
        result.boxes.append(box)
    return result


def format_dota_annotations(boxes: list[OrientedBox], class_names: list[str]) -> str:
    """Serialize boxes to DOTA annotation text (inverse of parsing)."""
    lines = []
    for box in boxes:
        pts = box.corners().reshape(-1)
        coord_str = " ".join(f"{v:.6f}" for v in pts)
        lines.append(f"{coord_str} {class_names[box.class_id]} 0")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Tiling and density statistics
# ---------------------------------------------------------------------------


def tile_offsets(image_w: int, image_h: int, spec: TileSpec) -> list[tuple[int, int]]:
    """Sliding-window origins covering the whole image.

    Per axis the stride is tile_size - overlap; the final offset is clamped
    to max(0, dim - tile_size) so coverage is complete. Offsets are strictly
    increasing with no duplicates.
    """

    def axis(dim: int) -> list[int]:
        if dim <= spec.tile_size:
            return [0]
        stride = spec.tile_size - spec.overlap
        last = dim - spec.tile_size
        offs = list(range(0, last + 1, stride))
        if offs[-1] != last:
            offs.append(last)
        return offs

    return [(x, y) for y in axis(image_h) for x in axis(image_w)]


def pad_to_size(image: np.ndarray, size: int) -> np.ndarray:
    """Pad an image with zeros at the bottom/right up to size x size."""
    h, w = image.shape[:2]
    if h >= size and w >= size:
        return image
    out = np.zeros((max(h, size), max(w, size), image.shape[2]), dtype=image.dtype)
    out[:h, :w, :] = image
    return out


@dataclass
class DensityHistogram:
    """Objects-per-tile distribution with summary statistics."""

    counts: dict[int, int]
    mean: float
    max: int
    empty_fraction: float
    total_tiles: int


def density_histogram(samples: list[SceneSample], spec: TileSpec) -> DensityHistogram:
    """Count annotated objects per tile across samples.

    A tile is the closed square [x, x+tile] x [y, y+tile]; an object whose
    center lies on a shared boundary is counted in every tile containing it.
    Tiles are enumerated per image with tile_offsets, so the statistic is a
    per-crop object count rather than any per-image measure.
    """
    counts: dict[int, int] = {}
    total_tiles = 0
    total_objects = 0
    max_count = 0
    empty = 0
    for sample in samples:
        h, w = sample.image.shape[:2]
        centers = np.array([[b.cx, b.cy] for b in sample.boxes], dtype=np.float64).reshape(-1, 2)
        for x, y in tile_offsets(w, h, spec):
            if len(centers):
                inside = (
                    (centers[:, 0] >= x)
                    & (centers[:, 0] <= x + spec.tile_size)
                    & (centers[:, 1] >= y)
                    & (centers[:, 1] <= y + spec.tile_size)
                )
                n = int(inside.sum())
            else:
                n = 0
            counts[n] = counts.get(n, 0) + 1
            total_tiles += 1
            total_objects += n
            max_count = max(max_count, n)
            if n == 0:
                empty += 1
    mean = total_objects / total_tiles if total_tiles else 0.0
    empty_fraction = empty / total_tiles if total_tiles else 0.0
    return DensityHistogram(
        counts=dict(sorted(counts.items())),
        mean=mean,
        max=max_count,
        empty_fraction=empty_fraction,
        total_tiles=total_tiles,
    )


# ---------------------------------------------------------------------------
# Dataset materialization and manifests
# ---------------------------------------------------------------------------


def default_class_names(class_count: int) -> list[str]:
    return [f"class{i}" for i in range(class_count)]


def split_labeled(ids: list[str], fraction_percent: int, seed: int) -> set[str]:
    """Seeded random choice of round(fraction% * n) ids to keep labeled."""
    n_labeled = int(round(len(ids) * fraction_percent / 100.0))
    rng = np.random.default_rng(stable_seed(seed, "split", fraction_percent))
    order = rng.permutation(len(ids))
    return {ids[i] for i in order[:n_labeled]}


def write_dataset(
    out_dir: str,
    profile: DensityProfile,
    n_samples: int,
    fraction_percent: int,
    val_samples: int = 0,
) -> str:
    """Materialize a synthetic dataset: PNGs, DOTA annotations, manifest.

    Returns the manifest path. Validation samples (all labeled) are drawn
    from the same profile with a disjoint id stream and listed under "val".
    """
    if n_samples <= 0:
        raise ValueError("empty dataset: n_samples must be >= 1")
    if fraction_percent not in FRACTION_PRESETS:
        raise ValueError(
            f"fraction must be one of {FRACTION_PRESETS}, got {fraction_percent}"
        )
    os.makedirs(out_dir, exist_ok=True)
    images_dir = os.path.join(out_dir, "images")
    annot_dir = os.path.join(out_dir, "annotations")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(annot_dir, exist_ok=True)

    class_names = default_class_names(profile.class_count)
    train_ids = [f"scene_{i:04d}" for i in range(n_samples)]
    val_ids = [f"val_{i:04d}" for i in range(val_samples)]
    labeled = split_labeled(train_ids, fraction_percent, profile.seed)

    def materialize(sample_id: str) -> tuple[str, str]:
        scene = generate_scene(profile, sample_id)
        img_path = os.path.join(images_dir, f"{sample_id}.png")
        ann_path = os.path.join(annot_dir, f"{sample_id}.txt")
        arr = np.round(scene.image * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(img_path)
        with open(ann_path, "w") as fh:
            fh.write(format_dota_annotations(scene.boxes, class_names))
        return img_path, ann_path

    entries = []
    for sid in train_ids:
        img_path, ann_path = materialize(sid)
        entries.append(
            {
                "id": sid,
                "image": os.path.relpath(img_path, out_dir),
                "annotations": os.path.relpath(ann_path, out_dir),
                "is_labeled": sid in labeled,
            }
        )
    val_entries = []
    for sid in val_ids:
        img_path, ann_path = materialize(sid)
        val_entries.append(
            {
                "id": sid,
                "image": os.path.relpath(img_path, out_dir),
                "annotations": os.path.relpath(ann_path, out_dir),
                "is_labeled": True,
            }
        )

    manifest = {
        "class_names": class_names,
        "image_size": profile.image_size,
        "fraction_percent": fraction_percent,
        "seed": profile.seed,
        "samples": entries,
        "val": val_entries,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


class DatasetIndex:
    """Loaded view of a dataset manifest with lazy image caching."""

    def __init__(self, manifest_path: str):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.class_names: list[str] = manifest["class_names"]
        self.class_table = {name: i for i, name in enumerate(self.class_names)}
        self.samples: list[dict] = manifest["samples"]
        self.val: list[dict] = manifest.get("val", [])
        self._cache: dict[str, SceneSample] = {}
        self._by_id = {e["id"]: e for e in self.samples + self.val}

    @property
    def labeled_ids(self) -> list[str]:
        return [e["id"] for e in self.samples if e["is_labeled"]]

    @property
    def unlabeled_ids(self) -> list[str]:
        return [e["id"] for e in self.samples if not e["is_labeled"]]

    @property
    def val_ids(self) -> list[str]:
        return [e["id"] for e in self.val]

    def load(self, sample_id: str, reveal_boxes: bool = False) -> SceneSample:
        """Load a sample; unlabeled samples hide their boxes unless revealed
        explicitly for post-hoc analysis."""
        cached = self._cache.get(sample_id)
        if cached is None:
            entry = self._by_id[sample_id]
            img = np.asarray(
                Image.open(os.path.join(self.root, entry["image"])), dtype=np.float32
            ) / 255.0
            with open(os.path.join(self.root, entry["annotations"])) as fh:
                parsed = parse_dota_annotations(fh.read(), self.class_table)
            cached = SceneSample(
                image=img,
                boxes=parsed.boxes,
                id=sample_id,
                is_labeled=bool(entry["is_labeled"]),
            )
            self._cache[sample_id] = cached
        if not cached.is_labeled and not reveal_boxes:
            return SceneSample(
                image=cached.image, boxes=[], id=cached.id, is_labeled=False
            )
        return cached
