"""Oriented 3D box IoU and average precision.

BEV overlap is the area of the intersection of two yaw-rotated rectangles,
found by Sutherland-Hodgman clipping (exact for convex polygons).  3D IoU
multiplies that area by the vertical overlap.

Matching is greedy.  Detections are visited in descending score order
(ties keep input order), and each takes the unmatched ground-truth box in
its frame with the highest IoU, if that IoU reaches the threshold.  Equal
IoUs go to the lower ground-truth index.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateBox, SchemaViolation
from .pointcloud import Box3D

AREA_EPS = 1e-12
EVAL_RANGE = ((-140.0, 140.0), (-40.0, 40.0))
INTERPOLATIONS = ("all_point", "envelope", "11point")


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    frame_id: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def bev_corners(box: Box3D) -> np.ndarray:
    """Four BEV corners, counter-clockwise."""
    cx, cy, _ = box.center
    l, w, _ = box.dims
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly: Sequence[Sequence[float]]) -> float:
    """Unsigned shoelace area."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = []
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc.append(x1 * y2 - x2 * y1)
    return abs(math.fsum(acc)) * 0.5


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _line_hit(p, q, a, b):
    """Intersection of segment p-q with the infinite line through a-b."""
    d1 = _cross(a, b, p)
    d2 = _cross(a, b, q)
    t = d1 / (d1 - d2)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def clip_convex(subject: Sequence, clip: Sequence) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: part of ``subject`` inside the convex CCW polygon ``clip``."""
    out = [tuple(map(float, p)) for p in subject]
    clip = [tuple(map(float, p)) for p in clip]
    for i in range(len(clip)):
        a, b = clip[i], clip[(i + 1) % len(clip)]
        src, out = out, []
        if not src:
            break
        prev = src[-1]
        prev_in = _cross(a, b, prev) >= 0.0
        for cur in src:
            cur_in = _cross(a, b, cur) >= 0.0
            if cur_in:
                if not prev_in:
                    out.append(_line_hit(prev, cur, a, b))
                out.append(cur)
            elif prev_in:
                out.append(_line_hit(prev, cur, a, b))
            prev, prev_in = cur, cur_in
    return out


def _check(box: Box3D) -> None:
    if min(box.dims) <= 0:
        raise DegenerateBox(f"box dims must be positive, got {box.dims}")


def bev_intersection(a: Box3D, b: Box3D) -> tuple[float, float, float]:
    """BEV intersection area plus both boxes' BEV areas."""
    _check(a)
    _check(b)
    pa, pb = bev_corners(a), bev_corners(b)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    if area_a < AREA_EPS or area_b < AREA_EPS:
        raise DegenerateBox("box has (numerically) zero footprint")
    # cheap reject on bounding circles
    ra = 0.5 * math.hypot(a.dims[0], a.dims[1])
    rb = 0.5 * math.hypot(b.dims[0], b.dims[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) > ra + rb:
        return 0.0, area_a, area_b
    inter = polygon_area(clip_convex(pa, pb))
    if inter < AREA_EPS:
        inter = 0.0
    return min(inter, area_a, area_b), area_a, area_b


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter, area_a, area_b = bev_intersection(a, b)
    return inter / (area_a + area_b - inter)


def _z_span(box: Box3D) -> tuple[float, float]:
    return box.center[2] - 0.5 * box.dims[2], box.center[2] + 0.5 * box.dims[2]


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two yaw-only oriented boxes."""
    inter_bev, area_a, area_b = bev_intersection(a, b)
    a0, a1 = _z_span(a)
    b0, b1 = _z_span(b)
    dz = min(a1, b1) - max(a0, b0)
    if dz <= 0.0 or inter_bev == 0.0:
        return 0.0
    vol_a = area_a * (a1 - a0)
    vol_b = area_b * (b1 - b0)
    inter = inter_bev * dz
    return inter / (vol_a + vol_b - inter)


def points_in_box(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside ``box`` (used by Monte-Carlo cross-checks)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = xyz - np.asarray(box.center)
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    l, w, h = box.dims
    return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(d[:, 2]) <= h / 2)


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------


def in_range(box: Box3D, range_filter=EVAL_RANGE) -> bool:
    (x0, x1), (y0, y1) = range_filter
    return x0 <= box.center[0] <= x1 and y0 <= box.center[1] <= y1


def match_detections(dets: Sequence[Detection], gts: Mapping[str, Sequence[Box3D]],
                     iou_thresh: float, bev: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching; returns TP flags in score order and the score-sorted indices."""
    iou_fn = bev_iou if bev else iou3d
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = {fid: [False] * len(boxes) for fid, boxes in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        boxes = gts.get(d.frame_id, ())
        best, best_j = -1.0, -1
        for j, g in enumerate(boxes):
            if used[d.frame_id][j]:
                continue
            iou = iou_fn(d.box, g)
            if iou >= iou_thresh and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[d.frame_id][best_j] = True
            tp[rank] = True
    return tp, np.asarray(order, dtype=np.int64)


def precision_recall(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp_cum = np.cumsum(tp)
    k = np.arange(1, len(tp) + 1)
    return tp_cum / k, tp_cum / n_gt


def ap_from_pr(precision: np.ndarray, recall: np.ndarray, interpolation: str = "all_point") -> float:
    """Area under a precision-recall curve.

    ``all_point`` sums ``(r_k - r_{k-1}) * p_k`` over every ranked detection.
    ``envelope`` first replaces each precision with the maximum precision at
    any higher recall (VOC 2010+ style).  ``11point`` averages that
    envelope at recalls 0, 0.1, ..., 1.
    """
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
    if len(precision) == 0:
        return 0.0
    prev_r = np.concatenate([[0.0], recall[:-1]])
    if interpolation == "all_point":
        return math.fsum(((recall - prev_r) * precision).tolist())
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "envelope":
        return math.fsum(((recall - prev_r) * env).tolist())
    vals = []
    for r in np.linspace(0.0, 1.0, 11):
        hit = recall >= r - 1e-12
        vals.append(float(precision[hit].max()) if hit.any() else 0.0)
    return math.fsum(vals) / 11.0


def average_precision(dets: Sequence[Detection], gts: Mapping[str, Sequence[Box3D]],
                      iou_thresh: float, range_filter=EVAL_RANGE, bev: bool = False,
                      interpolation: str = "all_point") -> float:
    """AP of ``dets`` against ``gts`` (frame id -> boxes) at one IoU threshold.

    Ground-truth boxes whose centre lies outside ``range_filter`` are
    dropped first.  Returns 0.0 when no ground truth remains.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    kept = {fid: [b for b in boxes if in_range(b, range_filter)] for fid, boxes in gts.items()}
    n_gt = sum(len(b) for b in kept.values())
    if n_gt == 0 or not dets:
        return 0.0
    tp, _ = match_detections(dets, kept, iou_thresh, bev)
    precision, recall = precision_recall(tp, n_gt)
    return ap_from_pr(precision, recall, interpolation)


# ---------------------------------------------------------------------------
# JSON records
# ---------------------------------------------------------------------------


def _box_from_record(rec: dict) -> Box3D:
    src = rec.get("box", rec)
    return Box3D(tuple(src["center"]), tuple(src["dims"]), src.get("yaw", 0.0))


def _read_records(path: str | os.PathLike) -> list[dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, list):
        raise SchemaViolation(f"{path}: expected a JSON array of records")
    return doc


def detections_from_records(records: Iterable[dict], require_score: bool = True) -> list[Detection]:
    out = []
    for i, rec in enumerate(records):
        try:
            score = rec["score"] if require_score else rec.get("score", 1.0)
            out.append(Detection(_box_from_record(rec), float(score), str(rec["frame_id"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation(f"record {i}: {exc!r}") from None
    return out


def load_detections(path: str | os.PathLike) -> list[Detection]:
    """Read a JSON array of ``{"frame_id", "box": {"center", "dims", "yaw"}, "score"}``.

    A flat record (box fields at top level) is accepted too.
    """
    try:
        return detections_from_records(_read_records(path))
    except SchemaViolation as exc:
        raise SchemaViolation(f"{path}: {exc}") from None


def load_ground_truth(path: str | os.PathLike) -> dict[str, list[Box3D]]:
    """Read ground truth in the detection record format (``score`` optional)."""
    try:
        recs = detections_from_records(_read_records(path), require_score=False)
    except SchemaViolation as exc:
        raise SchemaViolation(f"{path}: {exc}") from None
    gts: dict[str, list[Box3D]] = defaultdict(list)
    for r in recs:
        gts[r.frame_id].append(r.box)
    return dict(gts)


def detection_record(d: Detection) -> dict:
    return {"frame_id": d.frame_id, "box": d.box.to_dict(), "score": d.score}
