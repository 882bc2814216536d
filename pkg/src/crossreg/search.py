"""Exhaustive offset search over a distance map, accelerated without loss.

The score of a sample set at integer offset ``o`` is the weighted mean of
distance-map values at the shifted sample cells. Distance maps (including the
off-grid extrapolation) change by at most ``cell_size`` per unit step in L1,
so a score evaluated on a coarse lattice bounds every offset in its block from
below. Blocks whose bound exceeds the best score found so far cannot contain
the optimum and are skipped, which returns exactly the full-search minimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

from .geometry import DistanceMap

_TIE = 1e-12


@dataclass
class SampleCells:
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def bin_samples(dmap: DistanceMap, pts) -> SampleCells:
    """Cells hit by 2D samples, with multiplicities."""
    r, c = dmap.cell_index(pts)
    r0, c0 = r.min(), c.min()
    w = int(c.max() - c0) + 1
    key = (r - r0) * w + (c - c0)
    counts = np.bincount(key)
    nz = np.flatnonzero(counts)
    rr, cc = np.divmod(nz, w)
    return SampleCells(rr + r0, cc + c0, counts[nz].astype(np.float64))


def _scores(dmap: DistanceMap, cells: SampleCells, oy: np.ndarray, ox: np.ndarray) -> np.ndarray:
    """Weighted mean lookup for each offset pair (oy[i], ox[i])."""
    rows = cells.rows[:, None] + oy[None, :]
    cols = cells.cols[:, None] + ox[None, :]
    h, w = dmap.grid.shape
    if rows.min() >= 0 and cols.min() >= 0 and rows.max() < h and cols.max() < w:
        vals = dmap.grid[rows, cols]
    else:
        vals = dmap.lookup_cells(rows, cols)
    return (cells.weights @ vals) / cells.total


def inside_fraction(dmap: DistanceMap, cells: SampleCells, oy: int, ox: int) -> float:
    h, w = dmap.grid.shape
    r = cells.rows + oy
    c = cells.cols + ox
    ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    return float(cells.weights[ok].sum() / cells.total)


@dataclass
class SearchResult:
    candidate: int
    oy: int
    ox: int
    score: float
    evaluated: int


def search_offsets(
    dmap: DistanceMap,
    candidates: list[SampleCells],
    half_rows: int,
    half_cols: int,
    priority: list[float] | None = None,
    stride: int = 3,
) -> SearchResult:
    """Global minimum over candidates x offsets in ``[-half, half]`` per axis.

    Ties are broken by ``priority`` (lower first, e.g. ``|angle|``), then
    lexicographically on ``(ox, oy)``.
    """
    if priority is None:
        priority = [0.0] * len(candidates)
    rad = stride // 2
    bound = 2 * rad * dmap.cell_size  # max L1 distance from block center, in meters

    def lattice(h: int) -> np.ndarray:
        k = int(np.ceil(h / stride))
        pts = np.arange(-k, k + 1) * stride
        return pts[np.abs(pts) <= h + rad]

    cy, cx = np.meshgrid(lattice(half_rows), lattice(half_cols), indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()
    in_window = (np.abs(cy) <= half_rows) & (np.abs(cx) <= half_cols)

    H, W = 2 * half_rows + 1, 2 * half_cols + 1
    score = np.full((len(candidates), H, W), np.inf)
    seen = np.zeros((len(candidates), H, W), dtype=bool)

    coarse = []
    iy, ix = cy[in_window] + half_rows, cx[in_window] + half_cols
    for ci, cells in enumerate(candidates):
        s = _scores(dmap, cells, cy, cx)
        coarse.append(s)
        score[ci, iy, ix] = s[in_window]
        seen[ci, iy, ix] = True
    best = float(score.min()) if in_window.any() else np.inf

    coarse_arr = np.array(coarse)
    order = np.argsort(coarse_arr, axis=None, kind="stable")
    dy, dx = np.meshgrid(np.arange(-rad, rad + 1), np.arange(-rad, rad + 1), indexing="ij")
    dy, dx = dy.ravel(), dx.ravel()
    evaluated = coarse_arr.size
    for flat in order:
        ci, j = divmod(int(flat), len(cy))
        if coarse_arr[ci, j] - bound > best + _tol(best):
            break
        oy, ox = cy[j] + dy, cx[j] + dx
        keep = (np.abs(oy) <= half_rows) & (np.abs(ox) <= half_cols)
        oy, ox = oy[keep], ox[keep]
        fresh = ~seen[ci, oy + half_rows, ox + half_cols]
        if not fresh.any():
            continue
        oy, ox = oy[fresh], ox[fresh]
        s = _scores(dmap, candidates[ci], oy, ox)
        evaluated += len(s)
        score[ci, oy + half_rows, ox + half_cols] = s
        seen[ci, oy + half_rows, ox + half_cols] = True
        best = min(best, float(s.min()))

    return _pick(score, best, half_rows, half_cols, priority, evaluated)


def _block(dmap: DistanceMap, r0: int, c0: int, h: int, w: int) -> np.ndarray:
    H, W = dmap.grid.shape
    if r0 >= 0 and c0 >= 0 and r0 + h <= H and c0 + w <= W:
        return dmap.grid[r0 : r0 + h, c0 : c0 + w]
    rr = np.arange(r0, r0 + h)
    cc = np.arange(c0, c0 + w)
    return dmap.lookup_cells(rr[:, None], cc[None, :])


def correlate_offsets(
    dmap: DistanceMap,
    candidates: list[SampleCells],
    half_rows: int,
    half_cols: int,
    priority: list[float] | None = None,
    recheck: float = 1e-3,
) -> SearchResult:
    """Same result as :func:`brute_force_search`, via FFT cross-correlation.

    Window scores come from one single-precision correlation per candidate.
    Offsets whose approximate score lies within ``recheck`` meters of the
    approximate minimum are re-scored exactly before the tie rule is applied;
    ``recheck`` is far above the transform's round-off, so the answer is the
    exact one.
    """
    if priority is None:
        priority = [0.0] * len(candidates)
    H, W = 2 * half_rows + 1, 2 * half_cols + 1
    approx = np.empty((len(candidates), H, W))
    for ci, cells in enumerate(candidates):
        r0, c0 = int(cells.rows.min()), int(cells.cols.min())
        h = int(cells.rows.max()) - r0 + 1
        w = int(cells.cols.max()) - c0 + 1
        block = _block(dmap, r0 - half_rows, c0 - half_cols, h + 2 * half_rows, w + 2 * half_cols)
        shape = [sp_fft.next_fast_len(n, real=True) for n in block.shape]
        img = np.zeros((h, w), dtype=np.float32)
        img[cells.rows - r0, cells.cols - c0] = cells.weights
        spec = sp_fft.rfft2(block.astype(np.float32), shape) * np.conj(sp_fft.rfft2(img, shape))
        approx[ci] = sp_fft.irfft2(spec, shape)[:H, :W] / cells.total
    low = float(approx.min())
    near = np.argwhere(approx <= low + recheck)
    score = np.full_like(approx, np.inf)
    for ci in np.unique(near[:, 0]):
        sel = near[near[:, 0] == ci]
        oy, ox = sel[:, 1] - half_rows, sel[:, 2] - half_cols
        score[ci, sel[:, 1], sel[:, 2]] = _scores(dmap, candidates[ci], oy, ox)
    return _pick(score, float(score.min()), half_rows, half_cols, priority, approx.size)


def _tol(best: float) -> float:
    return _TIE * max(1.0, abs(best))


def _pick(score, best, half_rows, half_cols, priority, evaluated) -> SearchResult:
    tied = np.argwhere(score <= best + _tol(best))
    keys = [(priority[ci], c - half_cols, r - half_rows, ci) for ci, r, c in tied.tolist()]
    _, ox, oy, ci = min(keys)
    return SearchResult(ci, oy, ox, float(score[ci, oy + half_rows, ox + half_cols]), evaluated)


def brute_force_search(
    dmap: DistanceMap, candidates: list[SampleCells], half_rows: int, half_cols: int,
    priority: list[float] | None = None,
) -> SearchResult:
    """Reference: every candidate at every offset."""
    if priority is None:
        priority = [0.0] * len(candidates)
    oy, ox = np.meshgrid(
        np.arange(-half_rows, half_rows + 1), np.arange(-half_cols, half_cols + 1), indexing="ij"
    )
    oy, ox = oy.ravel(), ox.ravel()
    allv = np.array([_scores(dmap, c, oy, ox) for c in candidates])
    score = allv.reshape(len(candidates), 2 * half_rows + 1, 2 * half_cols + 1)
    return _pick(score, float(allv.min()), half_rows, half_cols, priority, allv.size)
