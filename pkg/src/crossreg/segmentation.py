"""Building segments: façade extraction from street clouds, over-view ingestion."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np
import shapely
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import (
    NeighborIndex,
    PointCloud,
    RigidTransform3D,
    VerticalAxis,
    build_neighbor_index,
    hull_diameter,
    rotation_between,
)

log = logging.getLogger(__name__)


@dataclass
class StreetSegment:
    id: int
    facade_points: np.ndarray
    footprint2d: np.ndarray
    ground_points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    outward: Optional[np.ndarray] = None  # horizontal unit normal toward the street

    @property
    def center2d(self) -> np.ndarray:
        return self.footprint2d.mean(axis=0)

    @property
    def diameter(self) -> float:
        return hull_diameter(self.footprint2d)


@dataclass
class OverviewSegment:
    """An over-view building: 2D samples plus optional outline and heights.

    Polygon-derived segments carry ``polygon`` (the ring); mask-derived ones
    carry ``cell_size`` so their footprint cells can be tested for membership.
    """

    id: int
    footprint2d: np.ndarray
    polygon: Optional[np.ndarray] = None
    cell_size: Optional[float] = None
    mean_roof_height: Optional[float] = None
    ground_height: Optional[float] = None

    def __post_init__(self) -> None:
        self.footprint2d = np.asarray(self.footprint2d, dtype=np.float64).reshape(-1, 2)
        if len(self.footprint2d) == 0:
            raise ValueError("over-view segment needs at least one sample")

    @property
    def center2d(self) -> np.ndarray:
        return self.footprint2d.mean(axis=0)

    @property
    def boundary2d(self) -> np.ndarray:
        """Samples on the outline: all of them for polygons, cell edges for masks.

        A mask contributes the midpoint of every cell side whose neighbor is
        missing, so the samples sit on the building edge instead of half a
        cell inside it.
        """
        if self.cell_size is None:
            return self.footprint2d
        ij = np.rint((self.footprint2d - self.footprint2d.min(axis=0)) / self.cell_size).astype(np.int64)
        grid = np.zeros(tuple(ij.max(axis=0) + 3), dtype=bool)
        grid[ij[:, 0] + 1, ij[:, 1] + 1] = True
        out = []
        for d in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            missing = ~grid[ij[:, 0] + 1 + d[0], ij[:, 1] + 1 + d[1]]
            out.append(self.footprint2d[missing] + 0.5 * self.cell_size * np.asarray(d, dtype=np.float64))
        return np.concatenate(out)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.footprint2d)

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        half = 0.5 * (self.cell_size or 0.0)
        lo, hi = self.footprint2d.min(axis=0) - half, self.footprint2d.max(axis=0) + half
        out = np.zeros(len(xy), dtype=bool)
        near = np.flatnonzero(np.all((xy >= lo) & (xy <= hi), axis=1))
        if len(near) == 0:
            return out
        if self.polygon is not None:
            out[near] = shapely.contains_xy(shapely.Polygon(self.polygon), xy[near, 0], xy[near, 1])
        else:
            d, _ = self._tree.query(xy[near], p=np.inf)
            out[near] = d <= half
        return out


# ---------------------------------------------------------------------------
# Street view
# ---------------------------------------------------------------------------


def angle_to_axis_deg(normals, axis: VerticalAxis) -> np.ndarray:
    """Unsigned angle between normal lines and the axis, in [0, 90]."""
    c = np.abs(np.asarray(normals) @ axis.direction)
    return np.degrees(np.arccos(np.clip(c, 0.0, 1.0)))


def extract_facade_points(
    cloud: PointCloud,
    index: NeighborIndex | None,
    axis: VerticalAxis,
    k: int = 16,
    facade_angle: float = 75.0,
    neighbor_fraction: float = 0.75,
) -> np.ndarray:
    """Indices of points whose normal is steep AND whose neighborhood agrees.

    A point passes if its normal makes more than ``facade_angle`` degrees with
    the vertical and more than ``neighbor_fraction`` of its k nearest points
    (the normal-estimation neighborhood, itself included) pass the same angle
    test. Points without a valid normal never pass.
    """
    if cloud.normals is None:
        raise ValueError("façade extraction requires normals")
    index = index or build_neighbor_index(cloud)
    steep = cloud.normal_valid & (angle_to_axis_deg(cloud.normals, axis) > facade_angle)
    k = min(k, len(cloud))
    _, nbr = index.knn(cloud.points, k)
    frac = steep[nbr].mean(axis=1)
    return np.flatnonzero(steep & (frac > neighbor_fraction))


def align_vertical(
    cloud: PointCloud, street_axis: VerticalAxis, reference_axis: VerticalAxis
) -> tuple[PointCloud, RigidTransform3D]:
    R = rotation_between(street_axis.direction, reference_axis.direction)
    t = RigidTransform3D(R, np.zeros(3))
    normals = None if cloud.normals is None else cloud.normals @ R.T
    return replace(cloud, points=t.apply(cloud.points), normals=normals), t


def median_spacing(points) -> float:
    pts = np.asarray(points)
    if len(pts) < 2:
        return 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


def region_grow_segments(
    cloud: PointCloud,
    facade_idx,
    angle_threshold: float = 15.0,
    min_diameter: float = 5.0,
    radius: float | None = None,
) -> list[StreetSegment]:
    """Group façade points into planar-ish building segments.

    Seeds are taken in ascending point order. A neighbor within ``radius``
    joins when its normal line is within ``angle_threshold`` of the region's
    running mean normal. ``radius`` defaults to 3x the median nearest-neighbor
    spacing of the façade points. Regions narrower than ``min_diameter``
    (horizontal hull diameter) are dropped.
    """
    facade_idx = np.asarray(facade_idx, dtype=np.int64)
    if len(facade_idx) == 0:
        return []
    pts = cloud.points[facade_idx]
    nrm = cloud.normals[facade_idx]
    if radius is None:
        radius = 3.0 * median_spacing(pts)
    cos_thr = math.cos(math.radians(angle_threshold))
    nbrs = cKDTree(pts).query_ball_point(pts, radius, return_sorted=True)

    region = np.full(len(pts), -1, dtype=np.int64)
    regions: list[np.ndarray] = []
    for seed in range(len(pts)):
        if region[seed] >= 0:
            continue
        rid = len(regions)
        region[seed] = rid
        acc = nrm[seed].copy()
        members = [seed]
        queue = deque([seed])
        while queue:
            cur = queue.popleft()
            mean = acc / np.linalg.norm(acc)
            for nb in nbrs[cur]:
                if region[nb] >= 0:
                    continue
                d = nrm[nb] @ mean
                if abs(d) >= cos_thr:
                    region[nb] = rid
                    acc += nrm[nb] if d >= 0 else -nrm[nb]
                    mean = acc / np.linalg.norm(acc)
                    members.append(nb)
                    queue.append(nb)
        regions.append(np.array(sorted(members), dtype=np.int64))

    segments = []
    for members in regions:
        if len(members) < 3:
            continue
        fp = pts[members, :2]
        if hull_diameter(fp) < min_diameter:
            continue
        segments.append(StreetSegment(len(segments), facade_idx[members], fp.copy()))
    log.info("region growing: %d regions, %d kept (radius %.3f m)", len(regions), len(segments), radius)
    return segments


def associate_ground_points(
    cloud: PointCloud,
    axis: VerticalAxis,
    segments: list[StreetSegment],
    ground_angle: float = 15.0,
) -> list[StreetSegment]:
    """Attach every near-horizontal-normal point to the segment whose footprint
    centroid is nearest in 2D (ties go to the lowest segment id)."""
    if not segments:
        raise ValueError("no segments to associate ground points with")
    if cloud.normals is None:
        raise ValueError("ground association requires normals")
    flat = cloud.normal_valid & (angle_to_axis_deg(cloud.normals, axis) < ground_angle)
    taken = np.zeros(len(cloud), dtype=bool)
    for s in segments:
        taken[s.facade_points] = True
    cand = np.flatnonzero(flat & ~taken)
    order = sorted(range(len(segments)), key=lambda i: segments[i].id)
    centers = np.array([segments[i].center2d for i in order])
    owner = np.empty(len(cand), dtype=np.int64)
    xy = cloud.points[cand, :2]
    for start in range(0, len(cand), 100_000):
        chunk = xy[start : start + 100_000]
        d2 = ((chunk[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        owner[start : start + 100_000] = np.argmin(d2, axis=1)
    out = list(segments)
    for pos, i in enumerate(order):
        out[i] = replace(segments[i], ground_points=cand[owner == pos])
    return out


def extract_street_segments(
    cloud: PointCloud,
    axis: VerticalAxis,
    k: int = 16,
    facade_angle: float = 75.0,
    neighbor_fraction: float = 0.75,
    region_angle: float = 15.0,
    min_diameter: float = 5.0,
    ground_angle: float = 15.0,
    index: NeighborIndex | None = None,
) -> list[StreetSegment]:
    index = index or build_neighbor_index(cloud)
    facade = extract_facade_points(cloud, index, axis, k, facade_angle, neighbor_fraction)
    segs = region_grow_segments(cloud, facade, region_angle, min_diameter)
    if segs:
        segs = associate_ground_points(cloud, axis, segs, ground_angle)
        segs = [replace(s, outward=facade_outward_normal(cloud, s)) for s in segs]
    return segs


def facade_outward_normal(cloud: PointCloud, segment: StreetSegment) -> np.ndarray | None:
    """Horizontal façade normal, signed to point toward the segment's ground.

    Street-view ground is seen from the street, so it lies on the open side
    of the façade. None without ground points.
    """
    if len(segment.ground_points) == 0 or cloud.normals is None:
        return None
    n = cloud.normals[segment.facade_points, :2]
    _, vecs = np.linalg.eigh(n.T @ n)
    d = vecs[:, -1]
    side = cloud.points[segment.ground_points, :2].mean(axis=0) - segment.center2d
    s = float(side @ d)
    if s == 0.0:
        return None
    return d if s > 0 else -d


def probe_samples(segment: StreetSegment, offset: float = 1.0, every: int = 4) -> np.ndarray:
    """Every ``every``-th footprint sample pushed ``offset`` meters toward the
    street; empty when the façade side is unknown."""
    if segment.outward is None:
        return np.zeros((0, 2))
    return segment.footprint2d[::every] + offset * np.asarray(segment.outward)


# ---------------------------------------------------------------------------
# Over view
# ---------------------------------------------------------------------------


def ingest_overview_mask(
    mask, origin, cell_size: float, min_diameter: float = 5.0
) -> list[OverviewSegment]:
    """8-connected components of building cells, one segment each.

    ``mask[row, col]`` covers the cell whose lower-left corner is
    ``origin + (col, row) * cell_size``. Distinct positive values are kept
    apart even where they touch; plain binary masks behave as usual.
    Segments are ordered by their first cell in row-major order.
    """
    mask = np.asarray(mask)
    origin = np.asarray(origin, dtype=np.float64)
    comps: list[tuple[int, np.ndarray]] = []
    structure = np.ones((3, 3), dtype=bool)
    for value in np.unique(mask[mask > 0]):
        lab, n = ndimage.label(mask == value, structure=structure)
        flat = lab.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
        for c in range(n):
            cells = order[bounds[c] : bounds[c + 1]]
            comps.append((int(cells[0]), cells))
    comps.sort(key=lambda item: item[0])
    w = mask.shape[1]
    segs = []
    for _, cells in comps:
        rows, cols = np.divmod(cells, w)
        xy = origin + (np.column_stack([cols, rows]) + 0.5) * cell_size
        if hull_diameter(xy) < min_diameter:
            continue
        segs.append(OverviewSegment(len(segs), xy, cell_size=float(cell_size)))
    return segs


@dataclass
class PolygonRejection:
    index: int
    reason: str


def densify_ring(ring, spacing: float) -> np.ndarray:
    """Boundary samples no further than ``spacing`` apart, vertices included."""
    ring = np.asarray(ring, dtype=np.float64)
    if np.allclose(ring[0], ring[-1]):
        ring = ring[:-1]
    out = []
    for a, b in zip(ring, np.roll(ring, -1, axis=0)):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / spacing)))
        t = np.arange(n)[:, None] / n
        out.append(a + t * (b - a))
    return np.vstack(out)


def ingest_overview_polygons(
    polygons, sample_spacing: float = 0.5, min_diameter: float = 5.0
) -> tuple[list[OverviewSegment], list[PolygonRejection]]:
    """Building outlines to boundary-sampled segments.

    Returns the kept segments and a record for each ring that was rejected
    (too few vertices, self-intersecting) or dropped for being small.
    """
    segs: list[OverviewSegment] = []
    rejected: list[PolygonRejection] = []
    for i, ring in enumerate(polygons):
        ring = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
        open_ring = ring[:-1] if len(ring) > 1 and np.allclose(ring[0], ring[-1]) else ring
        if len(open_ring) < 3:
            rejected.append(PolygonRejection(i, "fewer than 3 vertices"))
            continue
        if not shapely.LinearRing(open_ring).is_simple:
            log.warning("polygon %d is self-intersecting; skipped", i)
            rejected.append(PolygonRejection(i, "self-intersecting"))
            continue
        if hull_diameter(open_ring) < min_diameter:
            rejected.append(PolygonRejection(i, "diameter below minimum"))
            continue
        segs.append(OverviewSegment(len(segs), densify_ring(open_ring, sample_spacing), polygon=open_ring))
    return segs, rejected


def segments_to_json(segments) -> list[dict]:
    out = []
    for s in segments:
        item = {"id": s.id, "center": s.center2d.tolist(), "footprint": s.footprint2d.tolist()}
        if isinstance(s, OverviewSegment):
            if s.polygon is not None:
                item["polygon"] = s.polygon.tolist()
            if s.cell_size is not None:
                item["cell_size"] = s.cell_size
            item["ground_height"] = s.ground_height
            item["mean_roof_height"] = s.mean_roof_height
        else:
            item["facade_points"] = s.facade_points.tolist()
            item["ground_points"] = s.ground_points.tolist()
            item["outward"] = None if s.outward is None else s.outward.tolist()
        out.append(item)
    return out


def street_segments_from_json(items) -> list[StreetSegment]:
    return [
        StreetSegment(
            int(d["id"]),
            np.asarray(d["facade_points"], dtype=np.int64),
            np.asarray(d["footprint"], dtype=np.float64).reshape(-1, 2),
            np.asarray(d["ground_points"], dtype=np.int64),
            None if d.get("outward") is None else np.asarray(d["outward"], dtype=np.float64),
        )
        for d in items
    ]


def overview_segments_from_json(items) -> list[OverviewSegment]:
    return [
        OverviewSegment(
            int(d["id"]),
            np.asarray(d["footprint"], dtype=np.float64).reshape(-1, 2),
            None if d.get("polygon") is None else np.asarray(d["polygon"], dtype=np.float64),
            d.get("cell_size"),
            d.get("mean_roof_height"),
            d.get("ground_height"),
        )
        for d in items
    ]
