"""Segment-level correspondence on the conjugate graph.

Nodes of the conjugate graph are pairs of neighboring street segments
("street edges"); the label of a node is an over-view edge or the null label.
Each over-view edge enters the label space twice, once per endpoint pairing,
so the pairing is decided jointly with the labelling. This module builds the
graphs, scores every (street edge, directed over-view edge) hypothesis against
a distance map, and assembles the data/smoothness tables consumed by
:mod:`crossreg.bp`.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .geometry import (
    DistanceMap,
    RigidTransform2D,
    build_distance_map,
    penalize_interior,
    rot2,
    wrap_angle,
)
from .segmentation import probe_samples
from .search import SampleCells, bin_samples, correlate_offsets, inside_fraction

log = logging.getLogger(__name__)

NULL = 0


@dataclass(frozen=True)
class SegmentEdge:
    """Unordered pair of segments, abstracted as the line between their centers."""

    a: int
    b: int
    pa: np.ndarray
    pb: np.ndarray

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise ValueError("edge endpoints must be distinct segments")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.pb - self.pa))

    def shares_segment(self, other: "SegmentEdge") -> bool:
        return bool({self.a, self.b} & {other.a, other.b})


def build_conjugate_nodes(segments: Sequence, K: int = 4) -> list[SegmentEdge]:
    """Edges between every segment and its K nearest (by centroid), deduplicated.

    Nearest-neighbor ties go to the lower segment id; the output is sorted by
    ``(a, b)`` with ``a < b``.
    """
    if len(segments) < 2:
        return []
    segs = sorted(segments, key=lambda s: s.id)
    ids = np.array([s.id for s in segs])
    centers = np.array([s.center2d for s in segs])
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    pairs = set()
    for i in range(len(segs)):
        order = np.lexsort((ids, d[i]))
        nearest = [j for j in order if j != i][:K]
        for j in nearest:
            pairs.add((min(i, j), max(i, j)))
    return [
        SegmentEdge(int(ids[i]), int(ids[j]), centers[i].copy(), centers[j].copy())
        for i, j in sorted(pairs)
    ]


def edge_neighbors(edges: Sequence[SegmentEdge]) -> list[tuple[int, int]]:
    """Unordered pairs (i < j) of edges sharing a segment."""
    by_seg: dict[int, list[int]] = {}
    for i, e in enumerate(edges):
        by_seg.setdefault(e.a, []).append(i)
        by_seg.setdefault(e.b, []).append(i)
    pairs = set()
    for members in by_seg.values():
        for x in range(len(members)):
            for y in range(x + 1, len(members)):
                pairs.add((members[x], members[y]))
    return sorted(pairs)


def _pairing_ends(e: SegmentEdge, pairing: int) -> tuple[np.ndarray, np.ndarray]:
    return (e.pa, e.pb) if pairing == 0 else (e.pb, e.pa)


def coarse_edge_transform(
    e_s: SegmentEdge, e_o: SegmentEdge, pairing: int | None = None
) -> tuple[RigidTransform2D, int]:
    """Rigid map of line ``l_s`` onto ``l_o``: direction onto direction, midpoint
    onto midpoint.

    ``pairing`` 0 sends ``e_s.a -> e_o.a``; 1 sends ``e_s.a -> e_o.b``. When not
    given, the pairing with the smaller summed endpoint residual wins and ties
    keep index order (0).
    """
    if e_s.length == 0.0 or e_o.length == 0.0:
        raise ValueError("edge line has zero length (coincident centroids)")
    options = [0, 1] if pairing is None else [pairing]
    best = None
    for p in options:
        qa, qb = _pairing_ends(e_o, p)
        ds, do = e_s.pb - e_s.pa, qb - qa
        ang = math.atan2(do[1], do[0]) - math.atan2(ds[1], ds[0])
        R = rot2(ang)
        t = 0.5 * (qa + qb) - R @ (0.5 * (e_s.pa + e_s.pb))
        T = RigidTransform2D(float(wrap_angle(ang)), t)
        mapped = T.apply(np.vstack([e_s.pa, e_s.pb]))
        resid = float(np.linalg.norm(mapped[0] - qa) + np.linalg.norm(mapped[1] - qb))
        scale = 1e-9 * max(1.0, e_s.length, e_o.length)
        if best is None or resid < best[0] - scale:
            best = (resid, T, p)
    return best[1], best[2]


@dataclass
class MatchHypothesis:
    street_edge: int
    label: int
    cost: float
    transform: RigidTransform2D = field(default_factory=RigidTransform2D)
    pairing: int = 0
    flagged: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.cost <= 1.0:
            raise ValueError("data cost must lie in [0, 1]")


def null_hypothesis(street_edge: int) -> MatchHypothesis:
    return MatchHypothesis(street_edge, NULL, 1.0, RigidTransform2D.identity())


@dataclass
class OverviewEdgeMap:
    """Distance map of an over-view edge's two footprints plus its search window."""

    edge: SegmentEdge
    dmap: DistanceMap
    half_rows: int
    half_cols: int

    @property
    def d_max(self) -> float:
        cs = self.dmap.cell_size
        return 0.5 * math.hypot((2 * self.half_cols + 1) * cs, (2 * self.half_rows + 1) * cs)


def overview_edge_map(
    edge: SegmentEdge, footprints: dict[int, np.ndarray], cell_size: float = 0.5, margin: float = 5.0
) -> OverviewEdgeMap:
    pts = np.vstack([footprints[edge.a], footprints[edge.b]])
    ext = pts.max(axis=0) - pts.min(axis=0)
    half_cols = int(math.ceil(0.5 * ext[0] / cell_size))
    half_rows = int(math.ceil(0.5 * ext[1] / cell_size))
    pad = 0.5 * float(ext.max()) + margin
    return OverviewEdgeMap(edge, build_distance_map(pts, cell_size, pad), half_rows, half_cols)


def _offset_transform(dx: float, dy: float, T: RigidTransform2D) -> RigidTransform2D:
    return RigidTransform2D(T.angle, T.translation + np.array([dx, dy]))


def edge_matchiness(
    e_s: SegmentEdge,
    street_samples: np.ndarray,
    target: OverviewEdgeMap,
    pairing: int | None = None,
    street_edge: int = -1,
    label: int = -1,
) -> MatchHypothesis:
    """Data cost of labelling street edge ``e_s`` with over-view edge ``target``.

    The coarse line alignment is followed by an exhaustive integer-cell offset
    search over a window the size of the over-view edge's bounding box; the
    cost is the minimal mean distance-map value normalized by half the window
    diagonal and clamped to 1. With ``pairing=None`` both endpoint pairings are
    scored and the cheaper one kept (ties keep index order).
    """
    options = [0, 1] if pairing is None else [pairing]
    best: MatchHypothesis | None = None
    cs = target.dmap.cell_size
    for p in options:
        T, _ = coarse_edge_transform(e_s, target.edge, p)
        cells = bin_samples(target.dmap, T.apply(street_samples))
        res = correlate_offsets(target.dmap, [cells], target.half_rows, target.half_cols)
        if inside_fraction(target.dmap, cells, res.oy, res.ox) == 0.0:
            hyp = MatchHypothesis(street_edge, label, 1.0, T, p, flagged=True)
        else:
            cost = min(1.0, res.score / target.d_max)
            hyp = MatchHypothesis(
                street_edge, label, cost, _offset_transform(res.ox * cs, res.oy * cs, T), p
            )
        if best is None or hyp.cost < best.cost:
            best = hyp
    return best


@dataclass
class SmoothParams:
    c1: float = 0.1
    c2: float = 0.6
    theta_th: float = 10.0  # degrees
    t_th: float = 100.0  # meters

    def __post_init__(self) -> None:
        if not (0.0 <= self.c1 <= self.c2):
            raise ValueError("need 0 <= c1 <= c2")


def label_edges(n_edges: int) -> list[tuple[int, int]]:
    """(over-view edge index, pairing) of labels 1, 2, ...; label 0 is null."""
    return [(k, p) for k in range(n_edges) for p in (0, 1)]


def overview_adjacency(edges: Sequence[SegmentEdge]) -> np.ndarray:
    """Label adjacency (null label at index 0): the labels' edges are distinct
    and share a segment. A label is not its own neighbor."""
    labels = label_edges(len(edges))
    A = np.zeros((len(labels) + 1, len(labels) + 1), dtype=bool)
    for i, (ki, _) in enumerate(labels, start=1):
        for j, (kj, _) in enumerate(labels, start=1):
            A[i, j] = ki != kj and edges[ki].shares_segment(edges[kj])
    return A


def smooth_cost(
    l_i: int,
    l_j: int,
    hyp_i: MatchHypothesis,
    hyp_j: MatchHypothesis,
    params: SmoothParams,
    adjacency: np.ndarray,
) -> float:
    if l_i == NULL or l_j == NULL:
        return params.c1
    dtheta = abs(float(wrap_angle(hyp_i.transform.angle - hyp_j.transform.angle)))
    dt = float(np.linalg.norm(hyp_i.transform.translation - hyp_j.transform.translation))
    if adjacency[l_i, l_j] and dtheta < math.radians(params.theta_th) and dt < params.t_th:
        return params.c1
    return params.c2


@dataclass
class MatchingProblem:
    """Cost tables of the conjugate-graph labelling.

    ``data[i, l]`` is the cost of label ``l`` on street edge ``i``. Label 0 is
    null; label ``l >= 1`` is over-view edge ``(l - 1) // 2`` under pairing
    ``(l - 1) % 2``. ``angle``/``trans`` describe each hypothesis's refined
    transform.
    """

    street_edges: list[SegmentEdge]
    overview_edges: list[SegmentEdge]
    data: np.ndarray
    angle: np.ndarray
    trans: np.ndarray
    pairing: np.ndarray
    neighbors: list[tuple[int, int]]
    adjacency: np.ndarray

    @property
    def n_labels(self) -> int:
        return self.data.shape[1]

    def label_edge(self, l: int) -> SegmentEdge:
        return self.overview_edges[(l - 1) // 2]

    def hypothesis(self, i: int, l: int) -> MatchHypothesis:
        return MatchHypothesis(
            i, l, float(self.data[i, l]),
            RigidTransform2D(self.angle[i, l], self.trans[i, l]), int(self.pairing[i, l]),
        )

    @cached_property
    def label_ends(self) -> np.ndarray:
        """``(L, 2)`` over-view segment ids that each label assigns to the street
        edge's ``a`` and ``b`` segments (-1 for the null label)."""
        ends = np.full((self.n_labels, 2), -1, dtype=np.int64)
        for l in range(1, self.n_labels):
            e = self.label_edge(l)
            ends[l] = (e.a, e.b) if (l - 1) % 2 == 0 else (e.b, e.a)
        return ends

    def pair_adjacency(self, i: int, j: int) -> np.ndarray:
        """Which label pairs of neighboring street edges i, j count as adjacent.

        Two non-null labels are adjacent when they are distinct over-view
        edges and the street segment shared by ``i`` and ``j`` is sent to the
        same over-view segment by both, i.e. the over-view edges meet exactly
        where the street edges meet.
        """
        ei, ej = self.street_edges[i], self.street_edges[j]
        shared = {ei.a, ei.b} & {ej.a, ej.b}
        if len(shared) != 1:
            raise ValueError(f"street edges {i} and {j} do not share exactly one segment")
        s = shared.pop()
        ends = self.label_ends
        img_i = ends[:, 0] if ei.a == s else ends[:, 1]
        img_j = ends[:, 0] if ej.a == s else ends[:, 1]
        edge_of = np.r_[-1, (np.arange(1, self.n_labels) - 1) // 2]
        A = (img_i[:, None] == img_j[None, :]) & (edge_of[:, None] != edge_of[None, :])
        A[NULL, :] = False
        A[:, NULL] = False
        return A

    def pairwise(self, i: int, j: int, params: SmoothParams) -> np.ndarray:
        """Matrix V[l_i, l_j] for neighboring street edges (vectorized smooth_cost)."""
        dth = np.abs(wrap_angle(self.angle[i][:, None] - self.angle[j][None, :]))
        dt = np.linalg.norm(self.trans[i][:, None, :] - self.trans[j][None, :, :], axis=-1)
        ok = self.pair_adjacency(i, j) & (dth < math.radians(params.theta_th)) & (dt < params.t_th)
        V = np.where(ok, params.c1, params.c2)
        V[NULL, :] = params.c1
        V[:, NULL] = params.c1
        return V

    def to_json(self, params: SmoothParams) -> dict:
        return {
            "street_edges": [[e.a, e.b] for e in self.street_edges],
            "overview_edges": [[e.a, e.b] for e in self.overview_edges],
            "data_costs": self.data.tolist(),
            "angles": self.angle.tolist(),
            "translations": self.trans.tolist(),
            "pairings": self.pairing.tolist(),
            "neighbors": [list(p) for p in self.neighbors],
            "smooth": {"c1": params.c1, "c2": params.c2, "theta_th": params.theta_th, "t_th": params.t_th},
        }


def street_samples(segment, probe_offset: float | None = 1.0) -> np.ndarray:
    """Footprint samples plus, when the façade side is known, street-side probes."""
    fp = np.asarray(segment.footprint2d)
    if probe_offset is None:
        return fp
    return np.vstack([fp, probe_samples(segment, probe_offset)])


def outline_samples(segment) -> np.ndarray:
    """Distance-map sources for a segment: its outline when it has one.

    Interior mask cells would make every placement inside a building free.
    """
    return getattr(segment, "boundary2d", segment.footprint2d)


def build_matching_problem(
    street_segments: Sequence,
    overview_segments: Sequence,
    K: int = 4,
    cell_size: float = 0.5,
    length_prune: tuple[float, float] | None = None,
    label_K: int | None = None,
    workers: int = 1,
    side_penalty: float | None = 10.0,
    probe_offset: float = 1.0,
) -> MatchingProblem:
    """Score every (street edge, over-view edge) hypothesis.

    ``label_K`` sets the neighbor count for the over-view label graph
    (default ``K``). Façade centroids sit off the building centroids, so the
    two K-nearest graphs disagree near corners; a wider label graph keeps the
    true pairing available there.

    ``length_prune=(lo, hi)`` skips labels whose line-length ratio
    ``|l_o| / |l_s|`` falls outside the range (they keep cost 1).
    ``workers > 1`` scores street edges on a thread pool; results are
    gathered in edge order, so the tables do not depend on it.

    With ``side_penalty`` set, street samples include probes pushed
    ``probe_offset`` meters toward the street and over-view maps charge
    ``side_penalty`` meters inside buildings, so a façade cannot sit on a wall
    that faces away from the street.
    """
    s_edges = build_conjugate_nodes(street_segments, K)
    o_edges = build_conjugate_nodes(overview_segments, K if label_K is None else label_K)
    s_fp = {s.id: street_samples(s, probe_offset if side_penalty is not None else None) for s in street_segments}
    o_fp = {s.id: np.asarray(outline_samples(s)) for s in overview_segments}
    maps = [overview_edge_map(e, o_fp, cell_size) for e in o_edges]
    if side_penalty is not None:
        by_id = {s.id: s for s in overview_segments}
        for m in maps:
            fns = [by_id[m.edge.a].contains, by_id[m.edge.b].contains]
            m.dmap = penalize_interior(m.dmap, fns, side_penalty)
    labels = label_edges(len(o_edges))
    n, L = len(s_edges), len(labels) + 1

    def score_row(i: int):
        es = s_edges[i]
        samples = np.vstack([s_fp[es.a], s_fp[es.b]])
        row = np.ones(L), np.zeros(L), np.zeros((L, 2))
        for l, (k, p) in enumerate(labels, start=1):
            om = maps[k]
            if length_prune is not None:
                ratio = om.edge.length / es.length
                if not length_prune[0] <= ratio <= length_prune[1]:
                    continue
            h = edge_matchiness(es, samples, om, pairing=p, street_edge=i, label=l)
            row[0][l] = h.cost
            row[1][l] = h.transform.angle
            row[2][l] = h.transform.translation
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score_row, range(n)))
    else:
        rows = [score_row(i) for i in range(n)]
    data = np.array([r[0] for r in rows]).reshape(n, L)
    angle = np.array([r[1] for r in rows]).reshape(n, L)
    trans = np.array([r[2] for r in rows]).reshape(n, L, 2)
    pairing = np.tile(np.r_[0, [p for _, p in labels]], (n, 1)).astype(np.int64)
    log.info("matching problem: %d street edges x %d labels", n, L)
    return MatchingProblem(
        s_edges, o_edges, data, angle, trans, pairing,
        edge_neighbors(s_edges), overview_adjacency(o_edges),
    )


def decode_segment_correspondences(problem: MatchingProblem, labeling) -> dict[int, int | None]:
    """Per street segment, the majority over-view segment among its incident
    non-null edge labels (ties: lowest summed edge cost, then lowest id)."""
    votes: dict[int, dict[int, list[float]]] = {}
    for e in problem.street_edges:
        votes.setdefault(e.a, {})
        votes.setdefault(e.b, {})
    for i, l in enumerate(labeling):
        if l == NULL:
            continue
        es, eo = problem.street_edges[i], problem.label_edge(l)
        oa, ob = (eo.a, eo.b) if problem.pairing[i, l] == 0 else (eo.b, eo.a)
        cost = float(problem.data[i, l])
        for sid, oid in ((es.a, oa), (es.b, ob)):
            votes[sid].setdefault(oid, []).append(cost)
    out: dict[int, int | None] = {}
    for sid in sorted(votes):
        cand = votes[sid]
        if not cand:
            out[sid] = None
            continue
        out[sid] = min(cand, key=lambda o: (-len(cand[o]), sum(cand[o]), o))
    return out


def segment_initial_transform(
    problem: MatchingProblem, labeling, street_id: int, overview_id: int
) -> RigidTransform2D | None:
    """Transform of the cheapest incident edge whose label sends ``street_id``
    to ``overview_id`` (ties: lowest edge index)."""
    best = None
    for i, l in enumerate(labeling):
        if l == NULL:
            continue
        es = problem.street_edges[i]
        if street_id not in (es.a, es.b):
            continue
        img = problem.label_ends[l][0 if es.a == street_id else 1]
        if img != overview_id:
            continue
        key = (float(problem.data[i, l]), i)
        if best is None or key < best[0]:
            best = (key, problem.hypothesis(i, l).transform)
    return None if best is None else best[1]
