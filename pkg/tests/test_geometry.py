import math

import numpy as np
import pytest

from rotssod.geometry import (
    GeometryError,
    OrientedBox,
    box_to_tile_frame,
    normalize_angle,
    point_in_box,
    polygon_area,
    rotated_iou,
    rotated_nms,
    tile_to_image_frame,
)

from helpers import aligned_iou, random_box, shapely_iou


class TestOrientedBox:
    def test_rejects_nonpositive_sides(self):
        with pytest.raises(GeometryError):
            OrientedBox(0, 0, 0.0, 1.0, 0.0)
        with pytest.raises(GeometryError):
            OrientedBox(0, 0, 1.0, -2.0, 0.0)

    def test_long_edge_normalization(self):
        b = OrientedBox(0, 0, 1.0, 2.0, 0.0)
        assert b.w == 2.0 and b.h == 1.0
        assert abs(b.theta - (-math.pi / 2)) < 1e-12

    def test_normalization_idempotent(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            b = random_box(rng)
            b2 = OrientedBox(b.cx, b.cy, b.w, b.h, b.theta, b.class_id, b.score)
            assert (b2.w, b2.h, b2.theta) == (b.w, b.h, b.theta)
            assert -math.pi / 2 <= b.theta < math.pi / 2
            assert b.w >= b.h

    def test_corner_polygon_area_matches_wh(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            b = random_box(rng)
            np.testing.assert_allclose(polygon_area(b.corners()), b.w * b.h, rtol=1e-6)

    def test_normalize_angle_range(self):
        for theta in np.linspace(-10, 10, 400):
            t = normalize_angle(theta)
            assert -math.pi / 2 <= t < math.pi / 2
            assert abs(normalize_angle(t) - t) < 1e-12


class TestRotatedIoU:
    def test_identical_boxes(self):
        b = OrientedBox(5, 5, 4, 2, 0.3)
        assert rotated_iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert rotated_iou(OrientedBox(0, 0, 1, 1, 0), OrientedBox(10, 10, 1, 1, 0)) == 0.0

    def test_half_offset_unit_squares(self):
        # intersection 0.5, union 1.5
        iou = rotated_iou(OrientedBox(0, 0, 1, 1, 0), OrientedBox(0.5, 0, 1, 1, 0))
        np.testing.assert_allclose(iou, 1.0 / 3.0, atol=1e-12)

    def test_representation_symmetry(self):
        iou = rotated_iou(OrientedBox(0, 0, 2, 1, 0), OrientedBox(0, 0, 1, 2, math.pi / 2))
        np.testing.assert_allclose(iou, 1.0, atol=1e-6)

    def test_degenerate_box_raises(self):
        a = OrientedBox(0, 0, 1e-10, 1e-10, 0)
        with pytest.raises(GeometryError):
            rotated_iou(a, OrientedBox(0, 0, 1, 1, 0))

    def test_symmetry_randomized(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            a, b = random_box(rng), random_box(rng)
            assert rotated_iou(a, b) == rotated_iou(b, a)

    def test_bounds_and_shapely_agreement(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            a, b = random_box(rng, span=15.0), random_box(rng, span=15.0)
            iou = rotated_iou(a, b)
            assert 0.0 <= iou <= 1.0
            np.testing.assert_allclose(iou, shapely_iou(a, b), atol=1e-9)

    def test_axis_aligned_closed_form(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            a = OrientedBox(rng.uniform(-10, 10), rng.uniform(-10, 10),
                            rng.uniform(1, 8), rng.uniform(1, 8), 0.0)
            b = OrientedBox(rng.uniform(-10, 10), rng.uniform(-10, 10),
                            rng.uniform(1, 8), rng.uniform(1, 8), 0.0)
            np.testing.assert_allclose(rotated_iou(a, b), aligned_iou(a, b), atol=1e-9)

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            a, b = random_box(rng, span=8.0), random_box(rng, span=8.0)
            dx, dy = rng.uniform(-50, 50, size=2)
            dth = rng.uniform(-math.pi, math.pi)
            c, s = math.cos(dth), math.sin(dth)

            def move(box):
                cx = c * box.cx - s * box.cy + dx
                cy = s * box.cx + c * box.cy + dy
                return OrientedBox(cx, cy, box.w, box.h, box.theta + dth)

            assert abs(rotated_iou(move(a), move(b)) - rotated_iou(a, b)) < 1e-6

    def test_swapped_representation_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a = random_box(rng)
            twin = OrientedBox(a.cx, a.cy, a.h, a.w, a.theta + math.pi / 2)
            np.testing.assert_allclose(rotated_iou(a, twin), 1.0, atol=1e-6)


class TestPointInBox:
    def test_center_is_inside(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            b = random_box(rng)
            assert point_in_box((b.cx, b.cy), b)

    def test_far_point_is_outside(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            b = random_box(rng)
            assert not point_in_box((b.cx + b.w + b.h, b.cy), b)

    def test_rotated_square_example(self):
        # rotate (1.2, 0) into the frame of a 2x2 square at 45 degrees:
        # |x'| = 1.2 * cos(pi/4) = 0.849 <= 1
        assert point_in_box((1.2, 0.0), OrientedBox(0, 0, 2, 2, math.pi / 4))
        assert not point_in_box((1.5, 1.5), OrientedBox(0, 0, 2, 2, math.pi / 4))


class TestTileFrames:
    def test_zero_origin_is_identity(self):
        b = OrientedBox(3.5, 4.5, 2, 1, 0.2)
        out = box_to_tile_frame(b, (0.0, 0.0))
        assert (out.cx, out.cy) == (b.cx, b.cy)

    def test_translation_example(self):
        out = box_to_tile_frame(OrientedBox(900, 900, 10, 4, 0.1), (824, 0))
        assert (out.cx, out.cy, out.w, out.h, out.theta) == (76.0, 900.0, 10.0, 4.0, 0.1)

    def test_round_trip_integer_origins(self):
        # integer centers and origins round-trip bitwise
        b = OrientedBox(900.0, 900.0, 10, 4, 0.1)
        back = tile_to_image_frame(box_to_tile_frame(b, (824, 0)), (824, 0))
        assert back.cx == b.cx and back.cy == b.cy

    def test_round_trip_float_centers(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            b = random_box(rng, span=1000.0)
            origin = (float(rng.integers(0, 2000)), float(rng.integers(0, 2000)))
            back = tile_to_image_frame(box_to_tile_frame(b, origin), origin)
            np.testing.assert_allclose((back.cx, back.cy), (b.cx, b.cy), atol=1e-9)
            assert (back.w, back.h, back.theta) == (b.w, b.h, b.theta)


class TestRotatedNMS:
    def test_duplicate_suppression(self):
        a = OrientedBox(5, 5, 4, 2, 0.3, class_id=0, score=0.9)
        b = OrientedBox(5, 5, 4, 2, 0.3, class_id=0, score=0.8)
        kept = rotated_nms([a, b], iou_thresh=0.5)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_other_class_survives(self):
        a = OrientedBox(5, 5, 4, 2, 0.3, class_id=0, score=0.9)
        b = OrientedBox(5, 5, 4, 2, 0.3, class_id=1, score=0.8)
        assert len(rotated_nms([a, b], iou_thresh=0.5)) == 2

    def test_disjoint_boxes_survive(self):
        a = OrientedBox(0, 0, 2, 1, 0.0, score=0.9)
        b = OrientedBox(50, 50, 2, 1, 0.0, score=0.8)
        kept = rotated_nms([a, b], iou_thresh=0.5)
        assert [k.score for k in kept] == [0.9, 0.8]
