"""Ground-truthed synthetic street scenes with injected trajectory drift.

Buildings are jittered rectangles lining an irregular closed loop, each
turned away from the street by a random yaw so that neighboring façades are
not all parallel. The street view sees each building's street-facing façade plus the road
surface; cameras ride the loop looking left and right. Drift is injected by
integrating a heading error and a lateral slip along the loop (closed form
per straight leg) plus a vertical ramp, which bends the whole reconstruction
non-rigidly while keeping each building nearly rigid.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import shapely

from . import io
from .bundle import OBS_DTYPE, CameraPose, project_point
from .geometry import PointCloud, RigidTransform3D, axis_angle_matrix, hull_diameter

log = logging.getLogger(__name__)


@dataclass
class SceneConfig:
    n_buildings: int = 30
    # counter-clockwise loop corners; deliberately irregular so that no rotation
    # or reflection of the loop maps the building layout onto itself
    loop: tuple[tuple[float, float], ...] = (
        (0.0, 0.0), (330.0, -40.0), (430.0, 170.0), (200.0, 310.0), (-40.0, 200.0),
    )
    street_width: float = 24.0
    frontage: tuple[float, float] = (10.0, 25.0)
    depth: tuple[float, float] = (12.0, 16.0)
    height: tuple[float, float] = (8.0, 25.0)
    gap: tuple[float, float] = (4.0, 12.0)
    setback_jitter: float = 2.0
    yaw_jitter_deg: float = 15.0
    facade_spacing: float = 0.05
    facade_view_height: float = 6.0
    ground_spacing: float = 0.5
    point_noise: float = 0.02
    overview_spacing: float = 1.0
    overview_cell: float = 0.5
    camera_spacing: float = 5.0
    camera_height: float = 2.0
    focal: float = 800.0
    image_size: tuple[int, int] = (1280, 960)
    n_tracks: int = 600
    max_view_depth: float = 60.0
    sides: str = "outer"  # which side of the loop carries buildings: both, outer, inner
    seed: int = 0


@dataclass
class Building:
    id: int
    polygon: np.ndarray  # (4, 2) counter-clockwise
    height: float
    facade: tuple[np.ndarray, np.ndarray]  # street-facing edge endpoints


@dataclass
class SyntheticScene:
    config: SceneConfig
    buildings: list[Building]
    trajectory: np.ndarray  # closed polygon vertices (V, 2), first not repeated
    street: PointCloud
    labels: np.ndarray  # building id per street point, -1 for ground
    arc: np.ndarray  # trajectory arc length associated with each street point
    poses: list[CameraPose]
    pose_arc: np.ndarray
    tracks: np.ndarray  # (T, 3) track point positions
    track_arc: np.ndarray
    observations: np.ndarray
    overview_cloud: np.ndarray
    mask: np.ndarray
    mask_origin: np.ndarray

    @property
    def polygons(self) -> list[np.ndarray]:
        return [b.polygon for b in self.buildings]


@dataclass
class DriftModel:
    heading_rate: float = 0.0  # deg per meter travelled
    lateral_rate: float = 0.0  # m of sideways slip per meter travelled
    vertical_rate: float = 0.0  # m of height error per meter travelled
    noise: float = 0.0  # m, isotropic per-point noise after drift


@dataclass
class DistortedScene:
    scene: SyntheticScene
    model: DriftModel
    street: PointCloud
    poses: list[CameraPose]
    tracks: np.ndarray
    frame: RigidTransform3D
    truth: dict[int, RigidTransform3D]  # distorted -> undistorted, per building
    truth_residual: dict[int, float]


# ---------------------------------------------------------------------------
# Trajectory helpers
# ---------------------------------------------------------------------------


def _legs(traj: np.ndarray):
    """Start vertex, unit tangent, start arc and length of each loop leg."""
    a = traj
    b = np.roll(traj, -1, axis=0)
    d = b - a
    L = np.linalg.norm(d, axis=1)
    s0 = np.concatenate([[0.0], np.cumsum(L)[:-1]])
    return a, d / L[:, None], s0, L


def project_to_trajectory(traj: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Arc length of the closest trajectory point for each 2D position."""
    a, t, s0, L = _legs(traj)
    best_d = np.full(len(xy), np.inf)
    best_s = np.zeros(len(xy))
    for k in range(len(a)):
        u = np.clip((xy - a[k]) @ t[k], 0.0, L[k])
        d = np.linalg.norm(xy - (a[k] + u[:, None] * t[k]), axis=1)
        better = d < best_d
        best_d[better] = d[better]
        best_s[better] = s0[k] + u[better]
    return best_s


def trajectory_point(traj: np.ndarray, s) -> tuple[np.ndarray, np.ndarray]:
    """Position and unit tangent at arc lengths ``s``."""
    a, t, s0, L = _legs(traj)
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    k = np.clip(np.searchsorted(s0, s, side="right") - 1, 0, len(a) - 1)
    u = s - s0[k]
    return a[k] + u[:, None] * t[k], t[k]


def _rot_integral(omega: float, a: float, b: float) -> np.ndarray:
    """Closed form of the integral of R(omega * s) ds over [a, b]."""
    if abs(omega) < 1e-15:
        return (b - a) * np.eye(2)
    ds = math.sin(omega * b) - math.sin(omega * a)
    dc = math.cos(omega * b) - math.cos(omega * a)
    return np.array([[ds, dc], [-dc, ds]]) / omega


def drifted_positions(traj: np.ndarray, s, model: DriftModel) -> np.ndarray:
    """Position reached at arc ``s`` when integrating the drifted motion.

    The travelled velocity is the true tangent plus ``lateral_rate`` times the
    left normal, turned by the accumulated heading error ``heading_rate * s``.
    """
    a, t, s0, L = _legs(traj)
    omega = math.radians(model.heading_rate)
    normals = np.column_stack([-t[:, 1], t[:, 0]])
    v = t + model.lateral_rate * normals
    starts = [a[0].copy()]
    for k in range(len(a)):
        starts.append(starts[-1] + _rot_integral(omega, s0[k], s0[k] + L[k]) @ v[k])
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    k = np.clip(np.searchsorted(s0, s, side="right") - 1, 0, len(a) - 1)
    starts = np.array(starts)[k]
    vk = v[k]
    if abs(omega) < 1e-15:
        return starts + (s - s0[k])[:, None] * vk
    dsin = (np.sin(omega * s) - np.sin(omega * s0[k])) / omega
    dcos = (np.cos(omega * s) - np.cos(omega * s0[k])) / omega
    return starts + np.column_stack([dsin * vk[:, 0] + dcos * vk[:, 1], -dcos * vk[:, 0] + dsin * vk[:, 1]])


def drift_transforms(traj: np.ndarray, s, model: DriftModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-arc rigid maps true -> drifted: rotations (N,3,3), translations (N,3)."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    p, _ = trajectory_point(traj, s)
    q = drifted_positions(traj, s, model)
    ang = np.radians(model.heading_rate) * s
    c, sn = np.cos(ang), np.sin(ang)
    R = np.zeros((len(s), 3, 3))
    R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1], R[:, 2, 2] = c, -sn, sn, c, 1.0
    t = np.zeros((len(s), 3))
    t[:, :2] = q - np.einsum("nij,nj->ni", R[:, :2, :2], p)
    t[:, 2] = model.vertical_rate * s
    return R, t


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _loop(cfg: SceneConfig) -> np.ndarray:
    traj = np.asarray(cfg.loop, dtype=np.float64)
    if len(traj) < 3 or shapely.LinearRing(traj).is_ccw is False:
        raise ValueError("loop must list at least 3 corners counter-clockwise")
    return traj


def _place_buildings(cfg: SceneConfig, rng: np.random.Generator) -> list[Building]:
    traj = _loop(cfg)
    a, t, s0, L = _legs(traj)
    half = 0.5 * cfg.street_width
    margin = half + cfg.depth[1] + cfg.setback_jitter + 4.0
    # the loop runs counter-clockwise, so +1 (left) is the inner side
    allowed = {"both": (+1, -1), "outer": (-1,), "inner": (+1,)}[cfg.sides]
    strips = [(k, side) for k in range(len(a)) for side in allowed]
    cursor = {st: margin for st in strips}
    placed: list[tuple[int, int, float, float]] = []  # (leg, side, start, frontage)
    full = set()
    while len(placed) < cfg.n_buildings:
        if len(full) == len(strips):
            raise ValueError("loop too short for the requested number of buildings")
        for st in strips:
            if len(placed) == cfg.n_buildings:
                break
            if st in full:
                continue
            k = st[0]
            start = cursor[st] + rng.uniform(*cfg.gap)
            fr = rng.uniform(*cfg.frontage)
            if start + fr > L[k] - margin:
                full.add(st)
                continue
            placed.append((k, st[1], start, fr))
            cursor[st] = start + fr
    out = []
    for bid, (k, side, start, fr) in enumerate(placed):
        tk = t[k]
        nk = np.array([-tk[1], tk[0]]) * side  # points away from the road on this side
        setback = half + rng.uniform(0.0, cfg.setback_jitter)
        depth = rng.uniform(*cfg.depth)
        yaw = math.radians(rng.uniform(-cfg.yaw_jitter_deg, cfg.yaw_jitter_deg))
        f0 = a[k] + tk * start + nk * setback
        f1 = f0 + tk * fr
        corners = np.array([f0, f1, f1 + nk * depth, f0 + nk * depth])
        c = corners.mean(axis=0)
        R = np.array([[math.cos(yaw), -math.sin(yaw)], [math.sin(yaw), math.cos(yaw)]])
        corners = (corners - c) @ R.T + c
        if not shapely.Polygon(corners).exterior.is_ccw:
            corners = corners[::-1].copy()
        # street-facing edge: the two corners closest to the road
        dist = (corners - a[k]) @ nk
        order = np.argsort(dist)[:2]
        facade = (corners[order[0]], corners[order[1]])
        out.append(Building(bid, corners, float(rng.uniform(*cfg.height)), facade))
    return out


def _overlaps(buildings: list[Building], min_gap: float = 1.0) -> bool:
    polys = [shapely.Polygon(b.polygon).buffer(min_gap / 2) for b in buildings]
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            if polys[i].intersects(polys[j]):
                return True
    return False


def _sample_facade(b: Building, traj, cfg, rng):
    p0, p1 = b.facade
    length = float(np.linalg.norm(p1 - p0))
    n_u = max(2, int(round(length / cfg.facade_spacing)) + 1)
    top = min(b.height, cfg.facade_view_height)
    n_v = max(2, int(round(top / cfg.facade_spacing)) + 1)
    u = np.linspace(0.0, 1.0, n_u)
    v = np.linspace(0.0, top, n_v)
    U, V = np.meshgrid(u, v, indexing="ij")
    xy = p0 + U.reshape(-1, 1) * (p1 - p0)
    pts = np.column_stack([xy, V.reshape(-1)])
    d = (p1 - p0) / length
    normal = np.array([-d[1], d[0], 0.0])
    centroid = b.polygon.mean(axis=0)
    if (0.5 * (p0 + p1) - centroid) @ normal[:2] < 0:
        normal = -normal
    normals = np.tile(normal, (len(pts), 1))
    return pts, normals


def _sample_ground(traj, cfg, buildings):
    half = 0.5 * cfg.street_width - 0.5
    lo = traj.min(axis=0) - half
    hi = traj.max(axis=0) + half
    xs = np.arange(lo[0], hi[0] + 1e-9, cfg.ground_spacing)
    ys = np.arange(lo[1], hi[1] + 1e-9, cfg.ground_spacing)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    xy = np.column_stack([X.ravel(), Y.ravel()])
    a, t, s0, L = _legs(traj)
    dmin = np.full(len(xy), np.inf)
    for k in range(len(a)):
        u = np.clip((xy - a[k]) @ t[k], 0.0, L[k])
        dmin = np.minimum(dmin, np.linalg.norm(xy - (a[k] + u[:, None] * t[k]), axis=1))
    xy = xy[dmin <= half]
    return np.column_stack([xy, np.zeros(len(xy))])


def camera_rotation(view_dir2d) -> np.ndarray:
    """World -> camera rotation for a level camera looking along ``view_dir2d``."""
    z = np.array([view_dir2d[0], view_dir2d[1], 0.0])
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def _in_image(u, cfg) -> bool:
    return 0.0 <= u[0] < cfg.image_size[0] and 0.0 <= u[1] < cfg.image_size[1]


def generate_scene(config: SceneConfig | None = None, max_attempts: int = 100) -> SyntheticScene:
    cfg = config or SceneConfig()
    if min(cfg.frontage[0], cfg.depth[0]) < 5.0:
        raise ValueError("building sizes must be at least 5 m")
    rng = np.random.default_rng(cfg.seed)
    traj = _loop(cfg)
    for attempt in range(max_attempts):
        buildings = _place_buildings(cfg, rng)
        if not _overlaps(buildings):
            break
        log.info("building layout attempt %d overlapped; retrying", attempt)
    else:
        raise RuntimeError(f"no overlap-free layout after {max_attempts} attempts")

    pts, nrm, lab = [], [], []
    for b in buildings:
        p, n = _sample_facade(b, traj, cfg, rng)
        pts.append(p)
        nrm.append(n)
        lab.append(np.full(len(p), b.id))
    ground = _sample_ground(traj, cfg, buildings)
    pts.append(ground)
    nrm.append(np.tile([0.0, 0.0, 1.0], (len(ground), 1)))
    lab.append(np.full(len(ground), -1))
    pts = np.vstack(pts)
    nrm = np.vstack(nrm)
    labels = np.concatenate(lab).astype(np.int64)
    if cfg.point_noise > 0:
        pts = pts + rng.normal(0.0, cfg.point_noise, pts.shape)
    arc = project_to_trajectory(traj, pts[:, :2])

    # cameras: left- and right-looking pair per station
    perimeter = float(_legs(traj)[3].sum())
    stations = np.arange(0.0, perimeter - 1e-9, cfg.camera_spacing)
    pos, tan = trajectory_point(traj, stations)
    poses, pose_arc = [], []
    pp = np.array(cfg.image_size, dtype=np.float64) / 2.0
    for s, p, t in zip(stations, pos, tan):
        left = np.array([-t[1], t[0]])
        for d in (left, -left):
            C = np.array([p[0], p[1], cfg.camera_height])
            poses.append(CameraPose(camera_rotation(d), C, cfg.focal, pp))
            pose_arc.append(s)
    pose_arc = np.array(pose_arc)

    # tracks: façade points seen by at least two cameras
    facade_idx = np.flatnonzero(labels >= 0)
    pick = np.sort(rng.choice(facade_idx, size=min(cfg.n_tracks * 2, len(facade_idx)), replace=False))
    centers = np.array([p.center for p in poses])
    kept, obs = [], []
    for pi in pick:
        X = pts[pi]
        near = np.flatnonzero(np.linalg.norm(centers - X, axis=1) < cfg.max_view_depth)
        seen = []
        for ci in near:
            xc = poses[ci].rotation @ (X - poses[ci].center)
            if xc[2] < 1.0:
                continue
            u = project_point(poses[ci], X)
            if _in_image(u, cfg):
                seen.append((ci, u))
        if len(seen) >= 2:
            tid = len(kept)
            kept.append(pi)
            obs.extend((ci, tid, u[0], u[1]) for ci, u in seen)
        if len(kept) == cfg.n_tracks:
            break
    observations = np.array(obs, dtype=OBS_DTYPE)
    track_ids = np.full(len(pts), -1, dtype=np.int64)
    track_ids[np.array(kept, dtype=np.int64)] = np.arange(len(kept))
    tracks = pts[np.array(kept, dtype=np.int64)]

    overview, mask, origin = _overview(cfg, traj, buildings)
    street = PointCloud(pts, nrm, source_track_ids=track_ids)
    return SyntheticScene(
        cfg, buildings, traj, street, labels, arc, poses, pose_arc, tracks,
        arc[np.array(kept, dtype=np.int64)], observations, overview, mask, origin,
    )


def _overview(cfg: SceneConfig, traj, buildings):
    allpts = np.vstack([traj] + [b.polygon for b in buildings])
    lo = np.floor((allpts.min(axis=0) - 20.0) / cfg.overview_cell) * cfg.overview_cell
    hi = allpts.max(axis=0) + 20.0
    polys = [shapely.Polygon(b.polygon) for b in buildings]

    xs = np.arange(lo[0] + 0.5 * cfg.overview_spacing, hi[0], cfg.overview_spacing)
    ys = np.arange(lo[1] + 0.5 * cfg.overview_spacing, hi[1], cfg.overview_spacing)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    xy = np.column_stack([X.ravel(), Y.ravel()])
    z = np.zeros(len(xy))
    for b, poly in zip(buildings, polys):
        z[shapely.contains_xy(poly, xy[:, 0], xy[:, 1])] = b.height
    cloud = np.column_stack([xy, z])

    w = int(math.ceil((hi[0] - lo[0]) / cfg.overview_cell))
    h = int(math.ceil((hi[1] - lo[1]) / cfg.overview_cell))
    cx = lo[0] + (np.arange(w) + 0.5) * cfg.overview_cell
    cy = lo[1] + (np.arange(h) + 0.5) * cfg.overview_cell
    CX, CY = np.meshgrid(cx, cy)
    mask = np.zeros((h, w), dtype=np.int64)
    for b, poly in zip(buildings, polys):
        mask[shapely.contains_xy(poly, CX, CY)] = 1
    return cloud, mask, lo


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------


def kabsch(src, dst) -> tuple[RigidTransform3D, float]:
    """Least-squares rigid map src -> dst and its RMS residual."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    T = RigidTransform3D(R, cd - R @ cs)
    res = T.apply(src) - dst
    return T, float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def random_frame(seed: int) -> RigidTransform3D:
    """An arbitrary reconstruction frame: random yaw, offset and height."""
    rng = np.random.default_rng(seed + 7919)
    yaw = rng.uniform(-math.pi, math.pi)
    R = axis_angle_matrix([0.0, 0.0, 1.0], yaw)
    return RigidTransform3D(R, np.array([rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-20, 20)]))


def apply_drift(
    scene: SyntheticScene,
    model: DriftModel,
    seed: int = 0,
    frame: RigidTransform3D | None = None,
) -> DistortedScene:
    """Carry every point and camera along its locally drifted trajectory frame.

    ``frame`` (default identity) is applied last, placing the distorted
    reconstruction in an arbitrary coordinate system. Truth transforms are
    least-squares rigid fits from each building's distorted façade points back
    to the undistorted ones.
    """
    frame = frame or RigidTransform3D.identity()
    traj = scene.trajectory
    rng = np.random.default_rng(seed)

    def warp(pts, s):
        R, t = drift_transforms(traj, s, model)
        out = np.einsum("nij,nj->ni", R, pts) + t
        return frame.apply(out)

    pts = warp(scene.street.points, scene.arc)
    if model.noise > 0:
        pts = pts + rng.normal(0.0, model.noise, pts.shape)
    Rn, _ = drift_transforms(traj, scene.arc, model)
    normals = np.einsum("nij,nj->ni", Rn, scene.street.normals) @ frame.rotation.T
    street = PointCloud(pts, normals, source_track_ids=scene.street.source_track_ids)
    tracks = warp(scene.tracks, scene.track_arc)

    Rp, tp = drift_transforms(traj, scene.pose_arc, model)
    poses = []
    for p, R, t in zip(scene.poses, Rp, tp):
        Rw = frame.rotation @ R
        C = frame.apply(R @ p.center + t)
        poses.append(replace(p, rotation=p.rotation @ Rw.T, center=C))

    truth, resid = {}, {}
    for b in scene.buildings:
        sel = scene.labels == b.id
        T, r = kabsch(pts[sel], scene.street.points[sel])
        truth[b.id] = T
        resid[b.id] = r
    return DistortedScene(scene, model, street, poses, tracks, frame, truth, resid)


# ---------------------------------------------------------------------------
# Bundle output
# ---------------------------------------------------------------------------


def write_scene(dist: DistortedScene, out_dir) -> Path:
    """Write clouds, outlines, mask, cameras, observations, truth and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = dist.scene
    io.write_ply(out / "street.ply", PointCloud(dist.street.points))
    io.write_ply(out / "street_truth.ply", PointCloud(sc.street.points))
    np.savetxt(out / "street_labels.txt", sc.labels, fmt="%d")
    np.savetxt(out / "street_track_ids.txt", sc.street.source_track_ids, fmt="%d")
    io.write_xyz(out / "tracks.xyz", PointCloud(dist.tracks))
    io.write_xyz(out / "tracks_truth.xyz", PointCloud(sc.tracks))
    io.write_poses(out / "poses.txt", dist.poses)
    io.write_poses(out / "poses_truth.txt", sc.poses)
    io.write_observations(out / "observations.txt", sc.observations)
    io.write_polygons(out / "overview_polygons.json", sc.polygons)
    io.write_mask(out / "overview_mask.pgm", sc.mask)
    io.write_georef(out / "overview_mask.georef", sc.mask_origin, sc.config.overview_cell)
    io.write_ply(out / "overview.ply", PointCloud(sc.overview_cloud))
    io.dump_json(out / "truth_transforms.json", {
        str(k): {"composed": T.matrix34().ravel().tolist(), "residual": dist.truth_residual[k]}
        for k, T in dist.truth.items()
    })
    cfg = asdict(sc.config)
    io.dump_json(out / "manifest.json", {
        "config": cfg,
        "drift": asdict(dist.model),
        "frame": dist.frame.matrix34().ravel().tolist(),
        "files": sorted(p.name for p in out.iterdir()),
    })
    return out


BENCHMARK_DRIFT = DriftModel(heading_rate=0.05, lateral_rate=0.02, vertical_rate=0.002, noise=0.0)


def benchmark_scene(seed: int = 0, **overrides) -> DistortedScene:
    """30 buildings, closed loop, 0.05 m façade sampling, benchmark drift."""
    cfg = SceneConfig(seed=seed, **overrides)
    scene = generate_scene(cfg)
    return apply_drift(scene, BENCHMARK_DRIFT, seed=seed, frame=random_frame(seed))
