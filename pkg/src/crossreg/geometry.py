"""Geometric primitives shared by every stage of the registration pipeline.

Point sets are plain ``(N, 3)`` / ``(N, 2)`` float64 arrays; the small
dataclasses below only carry the extra structure (normals, rigid motions,
distance grids) that downstream code needs to agree on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, TypeAlias

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError, cKDTree

Array: TypeAlias = NDArray[np.float64]

UP = np.array([0.0, 0.0, 1.0])


def _as_points(pts, dim: int) -> Array:
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, dim)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"expected an (N, {dim}) array, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Point clouds and neighbor search
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    """3D points with optional unit normals and per-point track ids.

    ``normal_valid`` is False where the neighborhood covariance was degenerate;
    those normals are zero vectors and must not be used for classification.
    """

    points: Array
    normals: Optional[Array] = None
    normal_valid: Optional[NDArray[np.bool_]] = None
    source_track_ids: Optional[NDArray[np.int64]] = None

    def __post_init__(self) -> None:
        self.points = _as_points(self.points, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        n = len(self.points)
        if self.normals is not None:
            self.normals = _as_points(self.normals, 3)
            if len(self.normals) != n:
                raise ValueError("normals must align with points")
            if self.normal_valid is None:
                self.normal_valid = np.ones(n, dtype=bool)
            norms = np.linalg.norm(self.normals[self.normal_valid], axis=1)
            if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ValueError("normals must have unit length")
        if self.source_track_ids is not None:
            self.source_track_ids = np.asarray(self.source_track_ids, dtype=np.int64)
            if len(self.source_track_ids) != n:
                raise ValueError("source_track_ids must align with points")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.normal_valid is None else self.normal_valid[idx],
            None if self.source_track_ids is None else self.source_track_ids[idx],
        )


class NeighborIndex:
    """Exact k-nearest / radius queries over a fixed point set (KD-tree)."""

    def __init__(self, points) -> None:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("cannot index an empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, query, k: int) -> tuple[Array, NDArray[np.int64]]:
        """Return ``(distances, indices)`` of shape ``(M, k)``, ascending."""
        if k < 1:
            raise ValueError("k must be positive")
        if k > len(self.points):
            raise ValueError(f"k={k} exceeds indexed point count {len(self.points)}")
        q = np.asarray(query, dtype=np.float64).reshape(-1, self.points.shape[1])
        d, i = self._tree.query(q, k=k)
        return d.reshape(len(q), k), i.reshape(len(q), k).astype(np.int64)

    def radius(self, query, r: float) -> list[NDArray[np.int64]]:
        """Indices within ``r`` of each query point, sorted by ascending distance."""
        q = np.asarray(query, dtype=np.float64).reshape(-1, self.points.shape[1])
        out = []
        for qi, nbrs in zip(q, self._tree.query_ball_point(q, r)):
            nbrs = np.asarray(nbrs, dtype=np.int64)
            d = np.linalg.norm(self.points[nbrs] - qi, axis=1)
            out.append(nbrs[np.lexsort((nbrs, d))])
        return out

    def radius_unsorted(self, query, r: float) -> list[list[int]]:
        q = np.asarray(query, dtype=np.float64).reshape(-1, self.points.shape[1])
        return self._tree.query_ball_point(q, r)


def build_neighbor_index(cloud: PointCloud | NDArray) -> NeighborIndex:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return NeighborIndex(pts)


# ---------------------------------------------------------------------------
# Normals and the vertical axis
# ---------------------------------------------------------------------------


def _canonical_sign(normals: Array) -> Array:
    """Flip each vector into a fixed hemisphere (z > 0, then y > 0, then x > 0)."""
    key = np.where(
        np.abs(normals[:, 2]) > 1e-12,
        normals[:, 2],
        np.where(np.abs(normals[:, 1]) > 1e-12, normals[:, 1], normals[:, 0]),
    )
    return np.where((key < 0)[:, None], -normals, normals)


def estimate_normals(
    cloud: PointCloud, index: NeighborIndex | None = None, k: int = 16, chunk: int = 200_000
) -> PointCloud:
    """PCA normals from the k nearest neighbors (the point itself included).

    Normal lines are what matter downstream, so orientation is canonical
    (upper hemisphere) rather than propagated across the surface; this makes
    neighboring normals on any smooth patch agree in sign.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(cloud) < k:
        raise ValueError(f"k={k} exceeds point count {len(cloud)}")
    index = index or build_neighbor_index(cloud)
    pts = cloud.points
    normals = np.zeros_like(pts)
    valid = np.zeros(len(pts), dtype=bool)
    for start in range(0, len(pts), chunk):
        sl = slice(start, start + chunk)
        _, nbr = index.knn(pts[sl], k)
        nb = pts[nbr]
        nb = nb - nb.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", nb, nb) / k
        evals, evecs = np.linalg.eigh(cov)
        scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
        ok = (evals[:, 1] - evals[:, 0]) > 1e-9 * scale
        ok &= evals[:, 2] > 0
        n = evecs[:, :, 0]
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
        normals[sl] = np.where(ok[:, None], _canonical_sign(n), 0.0)
        valid[sl] = ok
    return replace(cloud, normals=normals, normal_valid=valid)


@dataclass(frozen=True)
class VerticalAxis:
    direction: Array

    def __post_init__(self) -> None:
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("vertical axis must be a unit vector")
        object.__setattr__(self, "direction", d)


def hemisphere_bins(resolution_deg: float = 5.0) -> Array:
    """Quasi-uniform bin centers on the upper hemisphere (Fibonacci lattice).

    The count is chosen so each bin covers roughly ``resolution_deg``².
    """
    cell = math.radians(resolution_deg) ** 2
    n = max(1, int(round(2.0 * math.pi / cell)))
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def estimate_vertical_axis(normals, resolution_deg: float = 5.0) -> VerticalAxis:
    """Modal direction of an orientation histogram over the unit hemisphere.

    Antipodal normals fall into the same bin. The result is the renormalized
    mean of the members of the most populated bin (ties: lowest bin index),
    summed with ``math.fsum`` so the estimate does not depend on input order.
    """
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(n) == 0:
        raise ValueError("no normals to bin")
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    centers = hemisphere_bins(resolution_deg)
    tree = cKDTree(np.vstack([centers, -centers]))
    _, b = tree.query(n)
    b = b % len(centers)
    counts = np.bincount(b, minlength=len(centers))
    mode = int(np.argmax(counts))
    members = n[b == mode]
    members = np.where((members @ centers[mode] < 0)[:, None], -members, members)
    mean = np.array([math.fsum(members[:, c]) for c in range(3)])
    mean /= np.linalg.norm(mean)
    if mean[2] < 0:
        mean = -mean
    return VerticalAxis(mean)


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------


def rot2(angle: float) -> Array:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def wrap_angle(a):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class RigidTransform2D:
    angle: float = 0.0
    translation: Array = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self) -> None:
        object.__setattr__(self, "angle", float(self.angle))
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(2)
        )

    @property
    def rotation(self) -> Array:
        return rot2(self.angle)

    def apply(self, pts) -> Array:
        p = np.asarray(pts, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform2D":
        return RigidTransform2D(-self.angle, -(self.rotation.T @ self.translation))

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform2D(
            float(wrap_angle(self.angle + other.angle)),
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform2D") -> "RigidTransform2D":
        return self.compose(other)

    @classmethod
    def identity(cls) -> "RigidTransform2D":
        return cls()


@dataclass(frozen=True)
class RigidTransform3D:
    rotation: Array = field(default_factory=lambda: np.eye(3))
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, pts) -> Array:
        p = np.asarray(pts, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform3D":
        return RigidTransform3D(self.rotation.T, -(self.rotation.T @ self.translation))

    def compose(self, other: "RigidTransform3D") -> "RigidTransform3D":
        return RigidTransform3D(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def __matmul__(self, other: "RigidTransform3D") -> "RigidTransform3D":
        return self.compose(other)

    def matrix34(self) -> Array:
        return np.hstack([self.rotation, self.translation[:, None]])

    @classmethod
    def identity(cls) -> "RigidTransform3D":
        return cls()

    @classmethod
    def from_matrix34(cls, m) -> "RigidTransform3D":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


def apply_transform_2d(t: RigidTransform2D, pts) -> Array:
    return t.apply(pts)


def apply_transform_3d(t: RigidTransform3D, pts) -> Array:
    return t.apply(pts)


def axis_angle_matrix(axis, angle: float) -> Array:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = skew(a)
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def skew(v) -> Array:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_between(a, b) -> Array:
    """Minimal (geodesic) rotation taking unit vector ``a`` onto ``b``.

    For antiparallel inputs the rotation is by pi about the axis orthogonal
    to ``a`` that is closest to +x (falling back to +y).
    """
    a = np.asarray(a, dtype=np.float64) / np.linalg.norm(a)
    b = np.asarray(b, dtype=np.float64) / np.linalg.norm(b)
    c = float(np.clip(a @ b, -1.0, 1.0))
    v = np.cross(a, b)
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        for ref in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
            axis = ref - (ref @ a) * a
            if np.linalg.norm(axis) > 1e-6:
                return axis_angle_matrix(axis, math.pi)
    return axis_angle_matrix(v / s, math.atan2(s, c))


def rotation_angle(R) -> float:
    """Geodesic angle (radians) of a 3x3 rotation."""
    return math.acos(float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Distance maps
# ---------------------------------------------------------------------------


def edt_cells(occupied: NDArray[np.bool_]) -> Array:
    """Exact Euclidean distance (in cells) to the nearest occupied cell."""
    occupied = np.asarray(occupied, dtype=bool)
    if not occupied.any():
        raise ValueError("distance transform needs at least one occupied cell")
    return ndimage.distance_transform_edt(~occupied)


@dataclass
class DistanceMap:
    """Distances (meters) from cell centers to the nearest source cell center.

    ``grid[row, col]`` is the cell whose center sits at
    ``origin + ((col + 0.5) * cell_size, (row + 0.5) * cell_size)``.
    """

    origin: Array
    cell_size: float
    grid: Array

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def cell_index(self, pts) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
        """(row, col) of the cell containing each 2D point; may lie off-grid."""
        p = (np.asarray(pts, dtype=np.float64).reshape(-1, 2) - self.origin) / self.cell_size
        return np.floor(p[:, 1]).astype(np.int64), np.floor(p[:, 0]).astype(np.int64)

    def cell_center(self, rows, cols) -> Array:
        return self.origin + (np.column_stack([cols, rows]) + 0.5) * self.cell_size

    def lookup_cells(self, rows, cols) -> Array:
        """Values at integer cells; off-grid cells are extrapolated as the value
        at the clamped cell plus the center-to-center distance to it."""
        h, w = self.grid.shape
        rc = np.clip(rows, 0, h - 1)
        cc = np.clip(cols, 0, w - 1)
        extra = np.hypot(rows - rc, cols - cc) * self.cell_size
        return self.grid[rc, cc] + extra

    def lookup(self, pts) -> Array:
        return self.lookup_cells(*self.cell_index(pts))

    def extended(self, pad: int) -> "DistanceMap":
        """Same map grown by ``pad`` cells per side using the off-grid rule."""
        h, w = self.grid.shape
        rows, cols = np.mgrid[-pad : h + pad, -pad : w + pad]
        grid = self.lookup_cells(rows, cols)
        return DistanceMap(self.origin - pad * self.cell_size, self.cell_size, grid)


def build_distance_map(footprint_points, cell_size: float = 0.5, padding: float = 5.0) -> DistanceMap:
    """Distance map over the footprint bounding box grown by ``padding`` meters."""
    pts = _as_points(footprint_points, 2)
    if len(pts) == 0:
        raise ValueError("need at least one footprint point")
    if not np.all(np.isfinite(pts)):
        raise ValueError("footprint coordinates must be finite")
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    lo = np.floor((pts.min(axis=0) - padding) / cell_size) * cell_size
    hi = pts.max(axis=0) + padding
    w, h = (np.floor((hi - lo) / cell_size).astype(int) + 1).tolist()
    dmap = DistanceMap(lo, float(cell_size), np.zeros((h, w)))
    r, c = dmap.cell_index(pts)
    occ = np.zeros((h, w), dtype=bool)
    occ[r, c] = True
    dmap.grid = edt_cells(occ) * cell_size
    return dmap


def penalize_interior(dmap: DistanceMap, inside_fns, penalty: float) -> DistanceMap:
    """Copy of ``dmap`` with ``penalty`` added on cells that lie inside a
    building (per the ``inside_fns`` membership tests) and more than one cell
    from the outline.

    Street samples pushed toward the street then expose placements with the
    open side of a façade facing into a building.
    """
    grid = dmap.grid.copy()
    h, w = grid.shape
    rows, cols = np.mgrid[0:h, 0:w]
    deep = grid > dmap.cell_size
    cand = np.flatnonzero(deep.ravel())
    if len(cand):
        centers = dmap.cell_center(rows.ravel()[cand], cols.ravel()[cand])
        inside = np.zeros(len(cand), dtype=bool)
        for fn in inside_fns:
            inside |= np.asarray(fn(centers), dtype=bool)
        grid.ravel()[cand[inside]] += penalty
    return DistanceMap(dmap.origin.copy(), dmap.cell_size, grid)


def brute_force_edt(occupied: NDArray[np.bool_]) -> Array:
    """O(cells x sources) reference transform (cells units)."""
    src = np.argwhere(occupied)
    rows, cols = np.indices(occupied.shape)
    best = np.full(occupied.shape, np.iinfo(np.int64).max, dtype=np.int64)
    for r, c in src:
        best = np.minimum(best, (rows - r) ** 2 + (cols - c) ** 2)
    return np.sqrt(best.astype(np.float64))


# ---------------------------------------------------------------------------
# Misc helpers
# ---------------------------------------------------------------------------


def hull_diameter(pts2d) -> float:
    """Maximum pairwise distance of a 2D point set, evaluated on its convex hull."""
    p = np.unique(_as_points(pts2d, 2), axis=0)
    if len(p) < 2:
        return 0.0
    if len(p) > 3:
        try:
            p = p[ConvexHull(p).vertices]
        except QhullError:
            pass  # collinear: brute force over all points below
    best = 0.0
    for start in range(0, len(p), 512):
        d = np.linalg.norm(p[start : start + 512, None, :] - p[None, :, :], axis=-1)
        best = max(best, float(d.max()))
    return best


def voxel_downsample(points, voxel: float) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Keep the lowest-index point of every occupied voxel.

    Returns ``(keep, owner)`` where ``keep`` indexes the retained points in
    ascending order and ``owner[i]`` is the position in ``keep`` of the voxel
    representative of point ``i``.
    """
    pts = _as_points(points, 3)
    if voxel <= 0:
        idx = np.arange(len(pts))
        return idx, idx
    keys = np.floor(pts / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return first[order], rank[inverse.reshape(-1)]
