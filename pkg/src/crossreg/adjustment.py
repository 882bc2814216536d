"""Distance-weighted blending of per-segment rigid transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .bundle import CameraPose
from .geometry import RigidTransform3D, rotation_angle


def blend_weight(d):
    """``1 / ln(d + e)``: 1 at d = 0, positive, strictly decreasing to 0."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    w = 1.0 / np.log(d + math.e)
    return float(w) if w.ndim == 0 else w


def blend_point_transform(p, transforms: Sequence[tuple[RigidTransform3D, float]]) -> np.ndarray:
    """Weighted mean of ``T_i(p)`` with weights ``blend_weight(d_i)``."""
    if not transforms:
        raise ValueError("need at least one transform to blend")
    p = np.asarray(p, dtype=np.float64).reshape(3)
    w = np.array([blend_weight(d) for _, d in transforms])
    moved = np.array([T.apply(p) for T, _ in transforms])
    return (w / w.sum()) @ moved


@dataclass
class BlendModel:
    """Matched segments with their transforms, footprints and neighbor lists.

    A point owned by segment ``i`` is moved by ``T_i`` and by the transforms of
    the ``K`` segments nearest to ``i`` (centroid distance), weighted by the
    point's horizontal distance to each segment's footprint. With
    ``max_angle``/``max_shift`` set, a neighbor only counts if its transform
    agrees with the owner's: relative rotation at most ``max_angle`` degrees
    and the two images of the owner's centroid at most ``max_shift`` apart.
    """

    ids: list[int]
    transforms: list[RigidTransform3D]
    trees: list[cKDTree]
    neighbors: list[list[int]]  # positions into ids, owner excluded
    _all_tree: cKDTree
    _all_owner: np.ndarray

    @classmethod
    def build(
        cls,
        transforms: dict[int, RigidTransform3D],
        footprints: dict[int, np.ndarray],
        K: int = 4,
        max_angle: float | None = None,
        max_shift: float | None = None,
    ):
        if not transforms:
            raise ValueError("no segment transforms to blend")
        ids = sorted(transforms)
        fps = [np.unique(np.asarray(footprints[i], dtype=np.float64), axis=0) for i in ids]
        centers = np.array([fp.mean(axis=0) for fp in fps])
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        Ts = [transforms[i] for i in ids]
        c3 = np.column_stack([centers, np.zeros(len(ids))])

        def agrees(a: int, b: int) -> bool:
            if max_angle is not None and math.degrees(rotation_angle(Ts[a].rotation @ Ts[b].rotation.T)) > max_angle:
                return False
            if max_shift is not None and np.linalg.norm(Ts[a].apply(c3[a]) - Ts[b].apply(c3[a])) > max_shift:
                return False
            return True

        neighbors = []
        for a in range(len(ids)):
            order = [b for b in np.lexsort((np.arange(len(ids)), d[a])) if b != a and agrees(a, b)]
            neighbors.append([int(b) for b in order[:K]])
        owner = np.concatenate([np.full(len(fp), k) for k, fp in enumerate(fps)])
        return cls(ids, Ts, [cKDTree(fp) for fp in fps], neighbors,
                   cKDTree(np.vstack(fps)), owner)

    def position(self, segment_id: int) -> int:
        return self.ids.index(segment_id)

    def nearest_owner(self, xy) -> np.ndarray:
        """Position (into ``ids``) of the segment with the nearest footprint sample."""
        _, k = self._all_tree.query(np.asarray(xy, dtype=np.float64).reshape(-1, 2))
        return self._all_owner[k]

    def weights(self, xy, owner) -> tuple[np.ndarray, np.ndarray]:
        """Slot segment positions ``(N, S)`` (-1 = unused) and normalized weights."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        owner = np.asarray(owner, dtype=np.int64)
        S = 1 + max((len(nb) for nb in self.neighbors), default=0)
        slots = np.full((len(xy), S), -1, dtype=np.int64)
        w = np.zeros((len(xy), S))
        for o in np.unique(owner):
            rows = np.flatnonzero(owner == o)
            members = [int(o)] + self.neighbors[o]
            for s, seg in enumerate(members):
                dist, _ = self.trees[seg].query(xy[rows])
                slots[rows, s] = seg
                w[rows, s] = blend_weight(dist)
        return slots, w / w.sum(axis=1, keepdims=True)

    def apply(self, points, slots, weights) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros_like(pts)
        for s in range(slots.shape[1]):
            for seg in np.unique(slots[:, s]):
                if seg < 0:
                    continue
                rows = np.flatnonzero(slots[:, s] == seg)
                out[rows] += weights[rows, s, None] * self.transforms[seg].apply(pts[rows])
        return out

    def transform_points(self, points, owner=None) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if owner is None:
            owner = self.nearest_owner(pts[:, :2])
        slots, w = self.weights(pts[:, :2], owner)
        return self.apply(pts, slots, w)


def transform_poses(poses: Sequence[CameraPose], model: BlendModel, owner=None) -> list[CameraPose]:
    """Blend camera centers like points; rotate by the owner segment only.

    Owners default to the segment with the nearest footprint to the camera
    center in 2D.
    """
    centers = np.array([p.center for p in poses])
    if owner is None:
        owner = model.nearest_owner(centers[:, :2])
    new_centers = model.transform_points(centers, owner)
    out = []
    for p, c, o in zip(poses, new_centers, owner):
        R3 = model.transforms[int(o)].rotation
        out.append(replace(p, rotation=p.rotation @ R3.T, center=c))
    return out
