"""Oriented-box primitives: representation, rotated IoU, containment, frame shifts.

Boxes are rotated rectangles (cx, cy, w, h, theta) with the long-edge
convention: w is always the longer side and theta is the angle of that side,
normalized to [-pi/2, pi/2). Pixel coordinates follow image convention
(x right, y down); angles are measured in the same frame.

All functions here are pure and operate on immutable values.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

HALF_PI = math.pi / 2.0

# Below this side length a box is treated as degenerate geometry.
DEGENERATE_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for invalid or degenerate box geometry."""


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi/2, pi/2). Idempotent.

    Angles already in range are returned unchanged so normalization never
    perturbs a canonical value."""
    if -HALF_PI <= theta < HALF_PI:
        return theta
    return (theta + HALF_PI) % math.pi - HALF_PI


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle with class label and optional detection score.

    The constructor canonicalizes the representation: if h > w the sides are
    swapped and theta is rotated by pi/2, then theta is wrapped into
    [-pi/2, pi/2). Ground-truth boxes leave score at its default 1.0.
    """

    cx: float
    cy: float
    w: float
    h: float
    theta: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self) -> None:
        w = float(self.w)
        h = float(self.h)
        theta = float(self.theta)
        if not (w > 0.0) or not (h > 0.0):
            raise GeometryError(f"box sides must be positive, got w={w}, h={h}")
        if h > w:
            w, h = h, w
            theta += HALF_PI
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "theta", normalize_angle(theta))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    def corners(self) -> np.ndarray:
        """Return the 4 corner points as a (4, 2) array.

        Order: starting at (+w/2, +h/2) in the box frame and going through
        (-w/2, +h/2), (-w/2, -h/2), (+w/2, -h/2).
        """
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        hw = self.w / 2.0
        hh = self.h / 2.0
        local = np.array(
            [[hw, hh], [-hw, hh], [-hw, -hh], [hw, -hh]], dtype=np.float64
        )
        rot = np.array([[c, -s], [s, c]], dtype=np.float64)
        return local @ rot.T + np.array([self.cx, self.cy], dtype=np.float64)

    def area(self) -> float:
        return self.w * self.h

    def circumradius(self) -> float:
        """Radius of the smallest circle around the box, for fast rejects."""
        return math.hypot(self.w, self.h) / 2.0


def polygon_area(points: np.ndarray) -> float:
    """Unsigned area of a simple polygon via the shoelace formula."""
    x = points[:, 0]
    y = points[:, 1]
    return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0


def _signed_area(points: np.ndarray) -> float:
    x = points[:, 0]
    y = points[:, 1]
    return (float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0


def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject polygon by a convex clip
    polygon. Both inputs must be counter-clockwise. Returns the intersection
    polygon (possibly empty)."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []
        prev = input_pts[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in input_pts:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            # cur_side <= 0 means cur is inside (right of the edge, CCW clip).
            if cur_side <= 0.0:
                if prev_side > 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append(
                        (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                    )
                output.append(cur)
            elif prev_side <= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append(
                    (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                )
            prev = cur
            prev_side = cur_side
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _ccw(points: np.ndarray) -> np.ndarray:
    """Orient polygon counter-clockwise in (x right, y down) coordinates."""
    return points if _signed_area(points) <= 0.0 else points[::-1]


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    """Area of the overlap polygon of two boxes (0.0 when disjoint)."""
    pa = _ccw(a.corners())
    pb = _ccw(b.corners())
    inter = _clip_convex(pa, pb)
    if len(inter) < 3:
        return 0.0
    return polygon_area(inter)


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two rotated rectangles.

    Computed by convex polygon clipping with exact shoelace areas; symmetric
    in its arguments. A zero-area intersection gives exactly 0.0.

    Raises:
        GeometryError: if either box has a side not exceeding 1e-9.
    """
    if min(a.w, a.h) <= DEGENERATE_TOL or min(b.w, b.h) <= DEGENERATE_TOL:
        raise GeometryError("degenerate box in IoU computation")
    # Canonical argument order makes the result exactly symmetric.
    if (b.cx, b.cy, b.w, b.h, b.theta) < (a.cx, a.cy, a.w, a.h, a.theta):
        a, b = b, a
    # Cheap reject: boxes farther apart than their circumradii cannot overlap.
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > a.circumradius() + b.circumradius():
        return 0.0
    inter = intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.area() + b.area() - inter
    return min(max(inter / union, 0.0), 1.0)


def point_in_box(p: tuple[float, float], box: OrientedBox, tol: float = 1e-9) -> bool:
    """True iff point p lies inside or on the boundary of the box.

    The point is rotated into the box frame and compared against the
    half-extents with a small absolute tolerance for boundary cases.
    """
    dx = p[0] - box.cx
    dy = p[1] - box.cy
    c = math.cos(box.theta)
    s = math.sin(box.theta)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return abs(local_x) <= box.w / 2.0 + tol and abs(local_y) <= box.h / 2.0 + tol


def points_in_box(xs: np.ndarray, ys: np.ndarray, box: OrientedBox, tol: float = 1e-9) -> np.ndarray:
    """Vectorized point_in_box over parallel coordinate arrays."""
    dx = xs - box.cx
    dy = ys - box.cy
    c = math.cos(box.theta)
    s = math.sin(box.theta)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return (np.abs(local_x) <= box.w / 2.0 + tol) & (np.abs(local_y) <= box.h / 2.0 + tol)


def box_to_tile_frame(box: OrientedBox, tile_origin: tuple[float, float]) -> OrientedBox:
    """Translate a box from image coordinates into a tile's local frame."""
    return dataclasses.replace(box, cx=box.cx - tile_origin[0], cy=box.cy - tile_origin[1])


def tile_to_image_frame(box: OrientedBox, tile_origin: tuple[float, float]) -> OrientedBox:
    """Inverse of box_to_tile_frame."""
    return dataclasses.replace(box, cx=box.cx + tile_origin[0], cy=box.cy + tile_origin[1])


def rotated_nms(boxes: list[OrientedBox], iou_thresh: float) -> list[OrientedBox]:
    """Greedy per-class non-maximum suppression on rotated boxes.

    Boxes are processed in descending score order (ties keep input order);
    a box is dropped when its IoU with an already-kept box of the same class
    exceeds iou_thresh. Returns survivors sorted by descending score.
    """
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept: list[OrientedBox] = []
    for i in order:
        cand = boxes[i]
        suppressed = False
        for k in kept:
            if k.class_id != cand.class_id:
                continue
            if math.hypot(k.cx - cand.cx, k.cy - cand.cy) > k.circumradius() + cand.circumradius():
                continue
            if rotated_iou(k, cand) > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
    return kept
