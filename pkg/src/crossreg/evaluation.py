"""Symmetric mutual-nearest Chamfer distance between two clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud


def _coords(cloud, dims: int) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return np.ascontiguousarray(pts[:, :dims])


def mutual_nearest_pairs(A, B, cutoff: float = 10.0, dims: int = 3) -> np.ndarray:
    """``(K, 2)`` index pairs ``(a, b)`` that are each other's nearest neighbor
    and no farther apart than ``cutoff``, sorted by ``a``."""
    a = _coords(A, dims)
    b = _coords(B, dims)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both clouds must be non-empty")
    # unbalanced trees build and query faster on scanned clouds
    da, ia = cKDTree(b, balanced_tree=False, compact_nodes=False).query(a)
    _, ib = cKDTree(a, balanced_tree=False, compact_nodes=False).query(b)
    idx = np.arange(len(a))
    keep = (ib[ia] == idx) & (da <= cutoff)
    return np.column_stack([idx[keep], ia[keep]])


@dataclass
class ChamferReport:
    mean: float
    std: float
    pair_count: int
    cutoff: float
    distances: np.ndarray = field(repr=False)
    dims: int = 3

    @property
    def defined(self) -> bool:
        return self.pair_count > 0

    def to_json(self) -> dict:
        return {
            "mean": self.mean if self.defined else None,
            "std": self.std if self.defined else None,
            "pair_count": self.pair_count,
            "cutoff": self.cutoff,
            "dims": self.dims,
            "undefined_mean": not self.defined,
        }

    def histogram(self, bin_width: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
        nb = max(1, int(math.ceil(self.cutoff / bin_width)))
        return np.histogram(self.distances, bins=nb, range=(0.0, nb * bin_width))

    def write_csv(self, path) -> None:
        Path(path).write_text("distance\n" + "".join(f"{d!r}\n" for d in self.distances.tolist()))


def chamfer(A, B, cutoff: float = 10.0, dims: int = 3) -> ChamferReport:
    """Mean and standard deviation of mutual-nearest pair distances.

    ``dims=2`` drops the height coordinate before pairing. The pair set is
    identical when the clouds are swapped, so the report is symmetric.
    """
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    a = _coords(A, dims)
    b = _coords(B, dims)
    pairs = mutual_nearest_pairs(a, b, cutoff, dims)
    d = np.linalg.norm(a[pairs[:, 0]] - b[pairs[:, 1]], axis=1)
    d = np.sort(d)
    if len(d) == 0:
        return ChamferReport(math.nan, math.nan, 0, cutoff, d, dims)
    mean = math.fsum(d) / len(d)
    std = math.sqrt(math.fsum((d - mean) ** 2) / len(d))
    return ChamferReport(mean, std, len(d), cutoff, d, dims)
