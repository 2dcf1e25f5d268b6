import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import v2xdg
from v2xdg.errors import DegenerateBox, SchemaViolation
from v2xdg.eval3d import (
    Detection,
    ap_from_pr,
    average_precision,
    bev_iou,
    clip_convex,
    iou3d,
    load_detections,
    load_ground_truth,
    points_in_box,
    polygon_area,
)
from v2xdg.pointcloud import Box3D

FIXTURES = Path(v2xdg.__file__).parent / "fixtures"
HAND_AP = 29.0 / 36.0   # 1/3 * (1 + 2/3 + 3/4)


def rand_box(rng, spread=2.0):
    return Box3D(tuple(rng.uniform(-spread, spread, 3)), tuple(rng.uniform(0.5, 4.0, 3)), rng.uniform(-math.pi, math.pi))


def mc_iou(a, b, rng, n=1_000_000):
    """Monte-Carlo IoU: sample the bounding cube of both boxes."""
    corners = []
    for box in (a, b):
        r = 0.5 * math.hypot(box.dims[0], box.dims[1])
        c = np.asarray(box.center)
        corners += [c - [r, r, box.dims[2] / 2], c + [r, r, box.dims[2] / 2]]
    lo, hi = np.min(corners, axis=0), np.max(corners, axis=0)
    pts = rng.uniform(lo, hi, size=(n, 3))
    ia, ib = points_in_box(pts, a), points_in_box(pts, b)
    union = (ia | ib).sum()
    return (ia & ib).sum() / union if union else 0.0


class TestGeometry:
    def test_identical(self, rng):
        for _ in range(50):
            b = rand_box(rng)
            assert bev_iou(b, b) == 1.0
            assert iou3d(b, b) == 1.0

    def test_disjoint(self):
        a = Box3D((0, 0, 0), (2, 2, 2))
        b = Box3D((100, 0, 0), (2, 2, 2))
        assert bev_iou(a, b) == 0.0

    def test_axis_aligned_offset(self):
        a = Box3D((0, 0, 0), (2, 2, 2))
        b = Box3D((1, 0, 0), (2, 2, 2))
        assert bev_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_vertical_disjoint(self):
        a = Box3D((0, 0, 0), (2, 2, 2))
        b = Box3D((0, 0, 10), (2, 2, 2))
        assert bev_iou(a, b) == 1.0
        assert iou3d(a, b) == 0.0

    def test_rotated_square_in_square(self):
        # a unit square rotated 45 degrees inside a 2x2 square
        a = Box3D((0, 0, 0), (2, 2, 1))
        b = Box3D((0, 0, 0), (math.sqrt(2), math.sqrt(2), 1), math.pi / 4)
        assert bev_iou(a, b) == pytest.approx(2.0 / 4.0, abs=1e-12)

    def test_clip_and_area(self):
        sq = [(0, 0), (2, 0), (2, 2), (0, 2)]
        shifted = [(1, 1), (3, 1), (3, 3), (1, 3)]
        assert polygon_area(clip_convex(sq, shifted)) == pytest.approx(1.0)
        assert polygon_area([(0, 0), (1, 1)]) == 0.0

    def test_degenerate(self):
        with pytest.raises(DegenerateBox):
            Box3D((0, 0, 0), (0, 1, 1))

    def test_monte_carlo(self, rng):
        for _ in range(5):
            a = rand_box(rng, 1.0)
            b = rand_box(rng, 1.0)
            assert abs(iou3d(a, b) - mc_iou(a, b, rng, 400_000)) < 0.01

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetry(self, seed):
        r = np.random.default_rng(seed)
        a, b = rand_box(r), rand_box(r)
        assert abs(iou3d(a, b) - iou3d(b, a)) < 1e-12
        assert abs(bev_iou(a, b) - bev_iou(b, a)) < 1e-12
        assert 0.0 <= iou3d(a, b) <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rigid_invariance(self, seed):
        r = np.random.default_rng(seed)
        a, b = rand_box(r), rand_box(r)
        yaw, t = r.uniform(-math.pi, math.pi), r.uniform(-50, 50, 3)
        c, s = math.cos(yaw), math.sin(yaw)

        def move(box):
            x, y, z = box.center
            return Box3D((c * x - s * y + t[0], s * x + c * y + t[1], z + t[2]), box.dims, box.yaw + yaw)
        assert abs(iou3d(move(a), move(b)) - iou3d(a, b)) < 1e-9


def gt_frames():
    box = lambda x: Box3D((x, 0.0, 0.0), (4.0, 2.0, 1.6))
    return {"f0": [box(0.0), box(10.0), box(20.0)]}


class TestAveragePrecision:
    def test_perfect(self):
        gts = gt_frames()
        dets = [Detection(b, 1.0, "f0") for b in gts["f0"]]
        assert average_precision(dets, gts, 0.5) == 1.0
        assert average_precision(dets, gts, 0.7) == 1.0

    def test_empty_detections(self):
        assert average_precision([], gt_frames(), 0.5) == 0.0

    def test_empty_ground_truth(self):
        dets = [Detection(Box3D((0, 0, 0), (1, 1, 1)), 0.5, "f0")]
        assert average_precision(dets, {}, 0.5) == 0.0

    def test_hand_computed(self):
        gts = gt_frames()
        fp = Box3D((50.0, 0.0, 0.0), (4.0, 2.0, 1.6))
        dets = [Detection(gts["f0"][0], 0.9, "f0"), Detection(fp, 0.8, "f0"),
                Detection(gts["f0"][1], 0.7, "f0"), Detection(gts["f0"][2], 0.6, "f0")]
        assert abs(average_precision(dets, gts, 0.5) - HAND_AP) < 1e-9
        assert average_precision(dets, gts, 0.5, interpolation="envelope") == pytest.approx(5.0 / 6.0)

    def test_packaged_fixture(self):
        dets = load_detections(FIXTURES / "eval_4det_det.json")
        gts = load_ground_truth(FIXTURES / "eval_3gt_gt.json")
        assert abs(average_precision(dets, gts, 0.5) - HAND_AP) < 1e-9

    def test_range_filter_drops_gt(self):
        gts = {"f0": [Box3D((0, 0, 0), (4, 2, 1.6)), Box3D((0, 60, 0), (4, 2, 1.6))]}
        dets = [Detection(gts["f0"][0], 0.9, "f0")]
        assert average_precision(dets, gts, 0.5) == 1.0

    def test_greedy_prefers_highest_iou(self):
        g0 = Box3D((0, 0, 0), (4, 2, 1.6))
        g1 = Box3D((0.5, 0, 0), (4, 2, 1.6))
        gts = {"f": [g0, g1]}
        d = Box3D((0.45, 0, 0), (4, 2, 1.6))
        dets = [Detection(d, 0.9, "f"), Detection(g0, 0.8, "f")]
        assert average_precision(dets, gts, 0.5) == 1.0

    def test_frames_do_not_cross_match(self):
        gts = gt_frames()
        dets = [Detection(b, 0.9, "other") for b in gts["f0"]]
        assert average_precision(dets, gts, 0.5) == 0.0

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            average_precision([], gt_frames(), 1.0)

    def test_eleven_point(self):
        p = np.array([1.0, 0.5, 2 / 3, 0.75])
        r = np.array([1 / 3, 1 / 3, 2 / 3, 1.0])
        expected = (4 * 1.0 + 3 * 0.75 + 4 * 0.75) / 11   # r<=1/3: 1.0; (1/3, 2/3]: 0.75; (2/3, 1]: 0.75
        assert ap_from_pr(p, r, "11point") == pytest.approx(expected)

    def test_zero_score_fp_never_helps(self, rng):
        for _ in range(30):
            gts, dets = random_detection_set(rng)
            base = average_precision(dets, gts, 0.5)
            extra = dets + [Detection(Box3D((1e3, 0, 0), (1, 1, 1)), 0.0, "f0")]
            assert average_precision(extra, gts, 0.5) <= base

    def test_monotone_in_threshold(self, rng):
        for _ in range(30):
            gts, dets = random_detection_set(rng)
            aps = [average_precision(dets, gts, t) for t in (0.3, 0.5, 0.7, 0.9)]
            assert all(b <= a for a, b in zip(aps, aps[1:]))


def random_detection_set(rng, n_frames=3):
    gts, dets = {}, []
    for f in range(n_frames):
        fid = f"f{f}"
        boxes = [Box3D((rng.uniform(-60, 60), rng.uniform(-30, 30), 0.0), (4.0, 1.8, 1.5), rng.uniform(-3, 3))
                 for _ in range(rng.integers(1, 6))]
        gts[fid] = boxes
        for b in boxes:
            if rng.random() < 0.8:
                noise = rng.normal(0, 0.4, 3)
                c = np.asarray(b.center) + noise
                dets.append(Detection(Box3D(tuple(c), b.dims, b.yaw + rng.normal(0, 0.1)), rng.random(), fid))
        for _ in range(rng.integers(0, 3)):
            dets.append(Detection(Box3D((rng.uniform(-60, 60), rng.uniform(-30, 30), 0.0), (4.0, 1.8, 1.5)),
                                  rng.random(), fid))
    return gts, dets


class TestRecords:
    def test_score_range(self):
        with pytest.raises(ValueError):
            Detection(Box3D((0, 0, 0), (1, 1, 1)), 1.5, "f")

    def test_bad_records(self, tmp_path):
        p = tmp_path / "d.json"
        p.write_text(json.dumps([{"frame_id": "f", "box": {"center": [0, 0, 0]}}]))
        with pytest.raises(SchemaViolation):
            load_detections(p)
        p.write_text("{not json")
        with pytest.raises(SchemaViolation):
            load_detections(p)
        p.write_text(json.dumps({"frame_id": "f"}))
        with pytest.raises(SchemaViolation):
            load_ground_truth(p)

    def test_flat_records(self, tmp_path):
        p = tmp_path / "d.json"
        p.write_text(json.dumps([{"frame_id": "f", "center": [0, 0, 0], "dims": [1, 1, 1], "score": 0.3}]))
        assert load_detections(p)[0].score == 0.3
