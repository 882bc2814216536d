"""Per-segment fine registration: 2D grid refinement, ground-plane Z alignment,
and composition into one rigid 3D transform per street segment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    UP,
    DistanceMap,
    RigidTransform2D,
    RigidTransform3D,
    build_distance_map,
    rot2,
    rotation_between,
)
from .search import bin_samples, brute_force_search, inside_fraction, search_offsets

log = logging.getLogger(__name__)


@dataclass
class Refinement:
    transform: RigidTransform2D
    angle: float  # radians, the refinement rotation on top of ``init``
    offset: tuple[int, int]  # (dx, dy) cells
    residual: float
    initial_residual: float
    unrefined: bool = False
    at_limit: bool = False


def target_distance_map(footprint, cell_size: float = 0.5, margin: float = 10.0) -> DistanceMap:
    pts = np.asarray(footprint)
    ext = pts.max(axis=0) - pts.min(axis=0)
    return build_distance_map(pts, cell_size, 0.5 * float(ext.max()) + margin)


def refine_2d(
    footprint,
    target_footprint,
    init: RigidTransform2D,
    dmap: DistanceMap,
    angle_range: float = 10.0,
    angle_step: float = 1.0,
    fast: bool = False,
) -> Refinement:
    """Exhaustive search over rotations about the footprint centroid and
    one-cell offsets spanning the target's bounding box.

    The objective is the mean distance-map value over the transformed
    footprint samples. Ties prefer the smaller ``|angle|``, then lexicographic
    ``(dx, dy)``. ``fast`` switches to the
    coarse-to-fine search, which returns the same optimum.
    """
    cs = dmap.cell_size
    pts0 = init.apply(np.asarray(footprint, dtype=np.float64))
    c = pts0.mean(axis=0)
    n = int(round(angle_range / angle_step))
    angles = np.radians(np.arange(-n, n + 1) * angle_step)
    cands = [bin_samples(dmap, (pts0 - c) @ rot2(a).T + c) for a in angles]
    tgt = np.asarray(target_footprint)
    ext = tgt.max(axis=0) - tgt.min(axis=0)
    hc = int(math.ceil(0.5 * ext[0] / cs))
    hr = int(math.ceil(0.5 * ext[1] / cs))
    prio = [abs(float(a)) for a in angles]
    if fast:
        res = search_offsets(dmap, cands, hr, hc, prio, stride=4)
    else:
        res = brute_force_search(dmap, cands, hr, hc, prio)
    zero = cands[n]
    initial = float((zero.weights @ dmap.lookup_cells(zero.rows, zero.cols)) / zero.total)
    if inside_fraction(dmap, cands[res.candidate], res.oy, res.ox) == 0.0:
        return Refinement(init, 0.0, (0, 0), initial, initial, unrefined=True)
    a = float(angles[res.candidate])
    R = rot2(a)
    rot = RigidTransform2D(a, c - R @ c)
    shift = RigidTransform2D(0.0, np.array([res.ox * cs, res.oy * cs]))
    at_limit = res.candidate in (0, len(angles) - 1) or abs(res.ox) == hc or abs(res.oy) == hr
    return Refinement(shift @ rot @ init, a, (res.ox, res.oy), res.score, initial, False, at_limit)


def median_filter_heights(pts, window: int = 5) -> np.ndarray:
    """Replace each height by the median over its ``window`` nearest points in 2D."""
    pts = np.asarray(pts, dtype=np.float64)
    w = min(window, len(pts))
    _, nbr = cKDTree(pts[:, :2]).query(pts[:, :2], k=w)
    nbr = nbr.reshape(len(pts), w)
    out = pts.copy()
    out[:, 2] = np.median(pts[nbr, 2], axis=1)
    return out


@dataclass
class ZAlignment:
    RZ: np.ndarray
    tZ: float
    fallback: bool = False


def plane_normal(pts) -> np.ndarray:
    p = np.asarray(pts) - np.mean(pts, axis=0)
    _, vecs = np.linalg.eigh(p.T @ p)
    n = vecs[:, 0]
    return n if n[2] >= 0 else -n


def align_z(
    ground_pts,
    overview_up=UP,
    overview_ground_height: float = 0.0,
    min_points: int = 10,
    window: int = 5,
    statistic: str = "median",
    fallback_tz: float = 0.0,
) -> ZAlignment:
    """Rotation taking the segment's ground normal onto the over-view up vector,
    then the height offset between over-view ground and rotated street ground."""
    ground_pts = np.asarray(ground_pts, dtype=np.float64).reshape(-1, 3)
    if len(ground_pts) < min_points:
        return ZAlignment(np.eye(3), fallback_tz, fallback=True)
    filt = median_filter_heights(ground_pts, window)
    RZ = rotation_between(plane_normal(filt), overview_up)
    z = (filt @ RZ.T)[:, 2]
    level = float(np.median(z)) if statistic == "median" else float(np.mean(z))
    return ZAlignment(RZ, overview_ground_height - level)


@dataclass
class SegmentTransform3D:
    segment_id: int
    angle: float
    t2d: np.ndarray
    RZ: np.ndarray
    tZ: float

    @property
    def composed(self) -> RigidTransform3D:
        B = np.eye(3)
        B[:2, :2] = rot2(self.angle)
        return RigidTransform3D(B @ self.RZ, np.array([self.t2d[0], self.t2d[1], self.tZ]))

    def to_json(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "angle_deg": math.degrees(self.angle),
            "t2d": [float(v) for v in self.t2d],
            "RZ": [float(v) for v in self.RZ.ravel()],
            "tZ": float(self.tZ),
            "composed": [float(v) for v in self.composed.matrix34().ravel()],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SegmentTransform3D":
        return cls(
            int(d["segment_id"]), math.radians(d["angle_deg"]), np.asarray(d["t2d"], dtype=float),
            np.asarray(d["RZ"], dtype=float).reshape(3, 3), float(d["tZ"]),
        )


def compose_3d(angle: float, t2d, RZ, tZ: float, segment_id: int = -1) -> SegmentTransform3D:
    RZ = np.asarray(RZ, dtype=np.float64).reshape(3, 3)
    if np.max(np.abs(RZ.T @ RZ - np.eye(3))) > 1e-9:
        raise ValueError("RZ must be orthonormal")
    return SegmentTransform3D(segment_id, float(angle), np.asarray(t2d, dtype=np.float64).reshape(2), RZ, float(tZ))


def overview_heights(
    segment, segments: Sequence, points, factor: float = 2.0
) -> tuple[float | None, float | None]:
    """(ground height, roof height) for an over-view segment from a DSM cloud.

    Ground is the median height of samples within the segment's bounding box
    scaled by ``factor`` that fall inside no building; roof is the median of
    samples inside the segment.
    """
    pts = np.asarray(points)
    fp = segment.footprint2d
    lo, hi = fp.min(axis=0), fp.max(axis=0)
    mid, half = 0.5 * (lo + hi), 0.5 * factor * (hi - lo)
    win = np.all(np.abs(pts[:, :2] - mid) <= half, axis=1)
    cand = pts[win]
    if len(cand) == 0:
        return None, None
    inside_any = np.zeros(len(cand), dtype=bool)
    own = segment.contains(cand[:, :2])
    for s in segments:
        s_lo, s_hi = s.footprint2d.min(axis=0), s.footprint2d.max(axis=0)
        if np.any(s_hi < mid - half) or np.any(s_lo > mid + half):
            continue
        inside_any |= s.contains(cand[:, :2])
    ground = cand[~inside_any, 2]
    roof = cand[own, 2]
    return (
        float(np.median(ground)) if len(ground) else None,
        float(np.median(roof)) if len(roof) else None,
    )
