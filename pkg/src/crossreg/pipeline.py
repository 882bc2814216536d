"""End-to-end registration: segment, match, register, adjust, evaluate.

Each stage reads the artifacts of the previous ones from the output directory
and merges its section into ``summary.json``, so running the stages one by one
leaves the same files as a single :func:`run_pipeline` call. Nothing
time-dependent is written to the summary.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .adjustment import BlendModel, transform_poses
from .bp import field_to_json, matching_field, run_belief_propagation
from .bundle import BAProblem, constrained_bundle_adjust
from .evaluation import chamfer
from .fine import (
    SegmentTransform3D,
    align_z,
    compose_3d,
    overview_heights,
    refine_2d,
    target_distance_map,
)
from .geometry import (
    UP,
    PointCloud,
    RigidTransform2D,
    RigidTransform3D,
    VerticalAxis,
    build_neighbor_index,
    estimate_normals,
    estimate_vertical_axis,
    penalize_interior,
    rotation_between,
    voxel_downsample,
)
from .matching import (
    SmoothParams,
    build_matching_problem,
    decode_segment_correspondences,
    outline_samples,
    segment_initial_transform,
    street_samples,
)
from .segmentation import (
    angle_to_axis_deg,
    extract_street_segments,
    ingest_overview_mask,
    ingest_overview_polygons,
    overview_segments_from_json,
    segments_to_json,
    street_segments_from_json,
)

log = logging.getLogger(__name__)

STAGES = ("segment", "match", "register", "adjust", "evaluate")


class InputError(ValueError):
    """Missing or malformed user input."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    scale: float = 1.0
    voxel: float = 0.25
    k: int = 16
    facade_angle: float = 75.0
    neighbor_fraction: float = 0.75
    region_angle: float = 15.0
    min_diameter: float = 5.0
    ground_angle: float = 15.0
    K: int = 4
    label_K: int = 4
    length_prune: bool = False
    cell_size: float = 0.5
    c1: float = 0.1
    c2: float = 0.6
    theta_th: float = 10.0
    t_th: float = 100.0
    bp_max_iters: int = 100
    bp_tol: float = 1e-6
    bp_damping: float = 0.5
    refine_angle: float = 10.0
    refine_step: float = 1.0
    refine_fast: bool = True
    side_penalty: float = 10.0
    probe_offset: float = 1.0
    median_window: int = 5
    min_ground_points: int = 10
    ground_radius: float = 15.0
    z_statistic: str = "median"
    blend_K: int = 4
    lam: float = 20.0
    ba_max_iters: int = 50
    cutoff: float = 10.0
    polygon_spacing: float = 0.5

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise InputError("scale must be positive")
        if not 0.0 <= self.c1 <= self.c2:
            raise InputError("need 0 <= c1 <= c2")
        if not 0.0 <= self.bp_damping < 1.0:
            raise InputError("bp_damping must lie in [0, 1)")
        if self.ground_radius < 0:
            raise InputError("ground_radius must be non-negative")
        if self.z_statistic not in ("median", "mean"):
            raise InputError("z_statistic must be median or mean")

    @property
    def smooth(self) -> SmoothParams:
        return SmoothParams(self.c1, self.c2, self.theta_th, self.t_th)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


_HELP = {
    "scale": "street-cloud units per meter are divided out by this factor (must be known)",
    "voxel": "m, voxel size of the working cloud used for segmentation",
    "k": "neighbors per normal estimate",
    "facade_angle": "deg, minimum angle between a façade normal and the vertical",
    "neighbor_fraction": "share of the k neighbors that must also look like façade",
    "region_angle": "deg, normal tolerance while growing a façade region",
    "min_diameter": "m, segments narrower than this are dropped",
    "ground_angle": "deg, maximum angle between a ground normal and the vertical",
    "K": "nearest segments linked per street segment",
    "label_K": "nearest segments linked per over-view segment (label graph)",
    "length_prune": "skip labels whose line length ratio is outside [0.5, 2]",
    "cell_size": "m, over-view grid resolution for distance maps",
    "c1": "smoothness cost of consistent neighboring labels",
    "c2": "smoothness cost of inconsistent neighboring labels",
    "theta_th": "deg, rotation agreement threshold between neighboring labels and blended transforms",
    "t_th": "m, translation agreement threshold between neighboring labels and blended transforms",
    "bp_max_iters": "belief propagation sweep limit",
    "bp_tol": "relative energy change that ends belief propagation",
    "bp_damping": "fraction of the previous message kept in each update",
    "refine_angle": "deg, half range of the fine rotation search",
    "refine_step": "deg, step of the fine rotation search",
    "refine_fast": "coarse-to-fine offset search (same optimum as full search)",
    "side_penalty": "m, cost added inside over-view buildings so façades keep the street on their open side; 0 disables",
    "probe_offset": "m, distance of the street-side probe samples in front of each façade",
    "median_window": "ground points per median height filter",
    "min_ground_points": "below this a segment takes the global height offset",
    "ground_radius": "m, ground points farther than this from the facade are ignored for height (0 keeps all)",
    "z_statistic": "median or mean height offset statistic",
    "blend_K": "neighbor segments blended into each point's transform",
    "lam": "camera-center anchor weight in bundle adjustment",
    "ba_max_iters": "bundle adjustment iteration limit",
    "cutoff": "m, pairs farther apart are ignored by the Chamfer metric",
    "polygon_spacing": "m, sample spacing along over-view polygon outlines",
}


def config_template() -> str:
    lines = ["# crossreg pipeline configuration: key = value, '#' starts a comment", ""]
    for f in fields(PipelineConfig):
        value = f.default
        text = str(value).lower() if isinstance(value, bool) else str(value)
        lines.append(f"# {_HELP[f.name]}")
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def _convert(name: str, kind, raw: str):
    try:
        if kind in (bool, "bool"):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise InputError(f"config key {name!r}: cannot parse {raw!r}") from None


def parse_config(text: str, overrides: dict | None = None) -> PipelineConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[pipeline]\n" + text)
    except configparser.Error as exc:
        raise InputError(f"bad config file: {exc}") from None
    known = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    for key, raw in parser["pipeline"].items():
        if key not in known:
            raise InputError(f"unknown config key {key!r}")
        values[key] = _convert(key, known[key], raw)
    values.update(overrides or {})
    return PipelineConfig(**values)


def parse_overrides(items) -> dict:
    """``["key=value", ...]`` to typed config values."""
    known = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep:
            raise InputError(f"override {item!r} is not key=value")
        if key not in known:
            raise InputError(f"unknown config key {key!r}")
        values[key] = _convert(key, known[key], raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    if path is None:
        return PipelineConfig(**(overrides or {}))
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    return parse_config(p.read_text(), overrides)


# ---------------------------------------------------------------------------
# Inputs and artifacts
# ---------------------------------------------------------------------------


@dataclass
class PipelineInputs:
    street: str
    overview_mask: str | None = None
    overview_polygons: str | None = None
    overview_cloud: str | None = None
    poses: str | None = None
    observations: str | None = None
    tracks: str | None = None
    reference: str | None = None

    def validate(self) -> None:
        if self.overview_mask is None and self.overview_polygons is None:
            raise InputError("an over-view mask or polygon file is required")
        if self.overview_mask is not None and self.overview_polygons is not None:
            raise InputError("give either an over-view mask or polygons, not both")
        ba = [self.poses, self.observations, self.tracks]
        if any(v is not None for v in ba[1:]) and not all(v is not None for v in ba):
            raise InputError("observations and tracks need poses, observations and tracks together")
        for name, value in dataclasses.asdict(self).items():
            if value is not None and not Path(value).is_file():
                raise InputError(f"{name} file not found: {value}")
        if self.overview_mask is not None and not io.georef_path(self.overview_mask).is_file():
            raise InputError(f"georeference file not found: {io.georef_path(self.overview_mask)}")

    def resolved(self) -> "PipelineInputs":
        return PipelineInputs(**{
            k: None if v is None else str(Path(v).resolve()) for k, v in dataclasses.asdict(self).items()
        })


def _read(fn, path, what: str):
    try:
        return fn(path)
    except (io.FormatError, ValueError, OSError) as exc:
        raise InputError(f"cannot read {what} {path}: {exc}") from None


def _summary_path(out: Path) -> Path:
    return out / "summary.json"


def update_summary(out: Path, key: str, value) -> None:
    p = _summary_path(out)
    data = json.loads(p.read_text()) if p.is_file() else {}
    data[key] = value
    io.dump_json(p, data)


def _load_state(out: Path) -> tuple[PipelineConfig, PipelineInputs]:
    p = out / "pipeline.json"
    if not p.is_file():
        raise InputError(f"{out} holds no segmentation results; run the segment stage first")
    d = json.loads(p.read_text())
    return PipelineConfig(**d["config"]), PipelineInputs(**d["inputs"])


def _require(out: Path, name: str, stage: str) -> Path:
    p = out / name
    if not p.is_file():
        raise InputError(f"{p} is missing; run the {stage} stage first")
    return p


def _street_cloud(inputs: PipelineInputs, cfg: PipelineConfig, level: np.ndarray) -> np.ndarray:
    pts = _read(io.read_cloud, inputs.street, "street cloud").points * (1.0 / cfg.scale)
    return pts @ level.T


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_segment(cfg: PipelineConfig, inputs: PipelineInputs, out) -> dict:
    """Street segments from the working cloud, over-view segments from the source."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    inputs.validate()
    inputs = inputs.resolved()
    raw = _read(io.read_cloud, inputs.street, "street cloud").points * (1.0 / cfg.scale)
    if len(raw) < cfg.k:
        raise InputError("street cloud has fewer points than the normal neighborhood")
    keep, _ = voxel_downsample(raw, cfg.voxel)
    cloud = PointCloud(raw[keep])
    index = build_neighbor_index(cloud)
    cloud = estimate_normals(cloud, index, cfg.k)
    axis = estimate_vertical_axis(cloud.normals[cloud.normal_valid])
    level = rotation_between(axis.direction, UP)
    cloud = dataclasses.replace(cloud, points=cloud.points @ level.T, normals=cloud.normals @ level.T)
    index = build_neighbor_index(cloud)
    up = VerticalAxis(UP.copy())
    street = extract_street_segments(
        cloud, up, cfg.k, cfg.facade_angle, cfg.neighbor_fraction, cfg.region_angle,
        cfg.min_diameter, cfg.ground_angle, index=index,
    )
    if not street:
        raise StageError("segment", "no street-view building segments found")

    if inputs.overview_mask is not None:
        mask = _read(io.read_mask, inputs.overview_mask, "over-view mask")
        origin, cs = _read(io.read_georef, io.georef_path(inputs.overview_mask), "georeference")
        overview = ingest_overview_mask(mask, origin, cs, cfg.min_diameter)
        rejected = []
    else:
        rings = _read(io.read_polygons, inputs.overview_polygons, "over-view polygons")
        overview, rej = ingest_overview_polygons(rings, cfg.polygon_spacing, cfg.min_diameter)
        rejected = [{"index": r.index, "reason": r.reason} for r in rej]
    if not overview:
        raise StageError("segment", "no over-view building segments found")
    mode = "2d"
    if inputs.overview_cloud is not None:
        dsm = _read(io.read_cloud, inputs.overview_cloud, "over-view cloud").points
        for s in overview:
            s.ground_height, s.mean_roof_height = overview_heights(s, overview, dsm)
        mode = "3d"

    ground = cloud.normal_valid & (angle_to_axis_deg(cloud.normals, up) < cfg.ground_angle)
    np.savez(
        out / "segment.npz", keep=keep, points=cloud.points, normals=cloud.normals,
        normal_valid=cloud.normal_valid, level=level, axis=axis.direction, ground=ground,
    )
    io.dump_json(out / "street_segments.json", segments_to_json(street))
    io.dump_json(out / "overview_segments.json", segments_to_json(overview))
    io.dump_json(out / "pipeline.json", {"config": cfg.to_json(), "inputs": dataclasses.asdict(inputs)})
    section = {
        "mode": mode,
        "street_points": int(len(raw)),
        "working_points": int(len(keep)),
        "vertical_axis": axis.direction.tolist(),
        "street_segments": len(street),
        "overview_segments": len(overview),
        "rejected_polygons": rejected,
    }
    log.info("segment: %d street segments, %d over-view segments (%s mode)", len(street), len(overview), mode)
    _summary_path(out).unlink(missing_ok=True)
    update_summary(out, "config", cfg.to_json())
    update_summary(out, "segment", section)
    return section


def _load_segments(out: Path):
    street = street_segments_from_json(json.loads(_require(out, "street_segments.json", "segment").read_text()))
    overview = overview_segments_from_json(json.loads(_require(out, "overview_segments.json", "segment").read_text()))
    return street, overview


def stage_match(out, dump_instance=None, workers: int = 1) -> dict:
    out = Path(out)
    cfg, _ = _load_state(out)
    street, overview = _load_segments(out)
    problem = build_matching_problem(
        street, overview, cfg.K, cfg.cell_size,
        length_prune=(0.5, 2.0) if cfg.length_prune else None, label_K=cfg.label_K, workers=workers,
        side_penalty=cfg.side_penalty if cfg.side_penalty > 0 else None, probe_offset=cfg.probe_offset,
    )
    if not problem.street_edges:
        raise StageError("match", "fewer than two street segments; nothing to match")
    params = cfg.smooth
    field_ = matching_field(problem, params)
    if dump_instance is not None:
        inst = problem.to_json(params)
        inst["field"] = field_to_json(field_)
        io.dump_json(Path(dump_instance), inst)
    res = run_belief_propagation(field_, cfg.bp_max_iters, cfg.bp_tol, damping=cfg.bp_damping)
    for it, e in enumerate(res.energies, 1):
        log.debug("bp sweep %d energy %.6f", it, e)
    if res.diverged:
        log.warning("belief propagation did not converge in %d sweeps", cfg.bp_max_iters)
    corr = decode_segment_correspondences(problem, res.labeling)
    init = {}
    for sid, oid in corr.items():
        if oid is not None:
            T = segment_initial_transform(problem, res.labeling, sid, oid)
            init[str(sid)] = {"angle": T.angle, "translation": T.translation.tolist()}
    section = {
        "street_edges": len(problem.street_edges),
        "labels": int(problem.n_labels),
        "converged": bool(res.converged),
        "diverged": bool(res.diverged),
        "iterations": int(res.iterations),
        "energy_trace": [float(e) for e in res.energies],
        "labeling": [int(l) for l in res.labeling],
        "correspondences": {str(k): v for k, v in sorted(corr.items())},
        "matched": sum(v is not None for v in corr.values()),
    }
    io.dump_json(out / "matching.json", {**section, "initial_transforms": init})
    log.info(
        "match: %d/%d segments matched, BP %s after %d sweeps, energy %.4f",
        section["matched"], len(corr), "converged" if res.converged else "diverged",
        res.iterations, res.energy,
    )
    update_summary(out, "match", section)
    return section


def _near_ground(ground, facade, radius: float) -> np.ndarray:
    """Ground points within ``radius`` of the facade footprint in 2D."""
    if radius <= 0 or len(ground) == 0 or len(facade) == 0:
        return ground
    d, _ = cKDTree(facade[:, :2]).query(ground[:, :2], distance_upper_bound=radius)
    return ground[np.isfinite(d)]


def stage_register(out) -> dict:
    out = Path(out)
    cfg, _ = _load_state(out)
    street, overview = _load_segments(out)
    match = json.loads(_require(out, "matching.json", "match").read_text())
    work = np.load(_require(out, "segment.npz", "segment"))
    pts, ground_mask = work["points"], work["ground"]
    ov = {s.id: s for s in overview}
    three_d = any(s.ground_height is not None for s in overview)

    fallback_tz = 0.0
    if three_d:
        ov_ground = [s.ground_height for s in overview if s.ground_height is not None]
        st_ground = pts[ground_mask, 2]
        if ov_ground and len(st_ground):
            fallback_tz = float(np.median(ov_ground) - np.median(st_ground))

    transforms = []
    for seg in street:
        oid = match["correspondences"].get(str(seg.id))
        if oid is None:
            continue
        target = ov[oid]
        fallback = False
        if three_d and target.ground_height is not None:
            z = align_z(
                _near_ground(pts[seg.ground_points], pts[seg.facade_points], cfg.ground_radius),
                UP, target.ground_height, cfg.min_ground_points,
                cfg.median_window, cfg.z_statistic, fallback_tz,
            )
            RZ, tZ, fallback = z.RZ, z.tZ, z.fallback
        elif three_d:
            RZ, tZ, fallback = np.eye(3), fallback_tz, True
        else:
            RZ, tZ = np.eye(3), 0.0
        it = match["initial_transforms"][str(seg.id)]
        init = RigidTransform2D(it["angle"], np.asarray(it["translation"]))
        fp = (pts[seg.facade_points] @ RZ.T)[:, :2]
        outline = outline_samples(target)
        dmap = target_distance_map(outline, cfg.cell_size)
        if cfg.side_penalty > 0:
            fp = street_samples(dataclasses.replace(seg, footprint2d=fp), cfg.probe_offset)
            dmap = penalize_interior(dmap, [target.contains], cfg.side_penalty)
        ref = refine_2d(fp, outline, init, dmap, cfg.refine_angle, cfg.refine_step, fast=cfg.refine_fast)
        T = compose_3d(ref.transform.angle, ref.transform.translation, RZ, tZ, seg.id)
        item = T.to_json()
        item.update({
            "overview_id": int(oid),
            "residual": float(ref.residual),
            "initial_residual": float(ref.initial_residual),
            "unrefined": bool(ref.unrefined),
            "at_limit": bool(ref.at_limit),
            "z_fallback": bool(fallback),
        })
        transforms.append(item)
    if not transforms:
        raise StageError("register", "no matched segments to register")
    io.dump_json(out / "transforms.json", transforms)
    section = {
        "registered": len(transforms),
        "mean_residual": float(np.mean([t["residual"] for t in transforms])),
        "z_fallbacks": sum(t["z_fallback"] for t in transforms),
        "transforms": transforms,
    }
    log.info("register: %d segments, mean residual %.3f m", len(transforms), section["mean_residual"])
    update_summary(out, "register", section)
    return section


def _blend_model(out: Path, cfg: PipelineConfig) -> BlendModel:
    street, _ = _load_segments(out)
    items = json.loads(_require(out, "transforms.json", "register").read_text())
    transforms = {t["segment_id"]: SegmentTransform3D.from_json(t).composed for t in items}
    footprints = {s.id: s.footprint2d for s in street if s.id in transforms}
    return BlendModel.build(transforms, footprints, cfg.blend_K, cfg.theta_th, cfg.t_th)


def stage_adjust(out) -> dict:
    """Blend the full street cloud, then register and re-adjust the cameras."""
    out = Path(out)
    cfg, inputs = _load_state(out)
    work = np.load(_require(out, "segment.npz", "segment"))
    level = work["level"]
    model = _blend_model(out, cfg)
    pts = _street_cloud(inputs, cfg, level)
    registered = model.transform_points(pts)
    io.write_ply(out / "registered.ply", PointCloud(registered))
    section: dict = {"points": int(len(pts)), "bundle_adjustment": None}

    if inputs.poses is not None:
        poses, ids = _read(io.read_poses, inputs.poses, "poses")
        L = RigidTransform3D(level, np.zeros(3))
        leveled = [
            dataclasses.replace(p, rotation=p.rotation @ level.T, center=L.apply(p.center / cfg.scale))
            for p in poses
        ]
        reg_poses = transform_poses(leveled, model)
        io.write_poses(out / "poses_registered.txt", reg_poses, ids)
        section["poses"] = len(reg_poses)
        if inputs.observations is not None:
            section["bundle_adjustment"] = _bundle_adjust(out, cfg, inputs, model, reg_poses, ids, level)
    log.info("adjust: %d points blended", len(pts))
    update_summary(out, "adjust", section)
    return section


def _bundle_adjust(out, cfg, inputs, model, reg_poses, ids, level) -> dict:
    obs = _read(io.read_observations, inputs.observations, "observations")
    tracks = _read(io.read_cloud, inputs.tracks, "tracks").points * (1.0 / cfg.scale)
    index = {pid: k for k, pid in enumerate(ids)}
    try:
        pose_idx = np.array([index[int(p)] for p in obs["pose"]], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"observation references unknown pose id {exc}") from None
    if len(obs) and (obs["point"].min() < 0 or obs["point"].max() >= len(tracks)):
        raise InputError("observation references an unknown track point")
    counts = np.bincount(obs["point"], minlength=len(tracks))
    ok = counts[obs["point"]] >= 2
    obs, pose_idx = obs[ok], pose_idx[ok]
    if len(obs) == 0:
        log.warning("no track point is seen by two cameras; bundle adjustment skipped")
        return None
    used_pose = np.unique(pose_idx)
    used_pt = np.unique(obs["point"])
    remap_pose = {int(p): k for k, p in enumerate(used_pose)}
    remap_pt = {int(p): k for k, p in enumerate(used_pt)}
    sub = np.zeros(len(obs), dtype=obs.dtype)
    sub["pose"] = [remap_pose[int(p)] for p in pose_idx]
    sub["point"] = [remap_pt[int(p)] for p in obs["point"]]
    sub["u"], sub["v"] = obs["u"], obs["v"]
    X = model.transform_points(tracks[used_pt] @ level.T)
    poses = [reg_poses[int(i)] for i in used_pose]
    problem = BAProblem(poses, X, sub, np.array([p.center for p in poses]), lam=cfg.lam)
    new_poses, new_pts, report = constrained_bundle_adjust(problem, max_iters=cfg.ba_max_iters)
    final = list(reg_poses)
    for k, i in enumerate(used_pose):
        final[int(i)] = new_poses[k]
    all_pts = model.transform_points(tracks @ level.T)
    all_pts[used_pt] = new_pts
    io.write_poses(out / "poses_adjusted.txt", final, ids)
    io.write_xyz(out / "tracks_adjusted.xyz", PointCloud(all_pts))
    rep = report.to_json()
    rep.update({"cameras": len(poses), "points": len(X), "observations": len(sub)})
    io.dump_json(out / "ba_report.json", rep)
    log.info("bundle adjustment: RMS %.4f -> %.4f px in %d iterations", report.initial_rms, report.final_rms, report.iterations)
    return rep


def stage_evaluate(out, reference=None, cloud=None) -> dict:
    """3D and 2D Chamfer reports of the registered cloud against a reference."""
    out = Path(out)
    cfg, inputs = _load_state(out)
    ref_path = reference or inputs.reference
    if ref_path is None:
        log.info("evaluate: no reference cloud; skipped")
        update_summary(out, "evaluate", None)
        return {}
    if not Path(ref_path).is_file():
        raise InputError(f"reference cloud not found: {ref_path}")
    src = Path(cloud) if cloud is not None else _require(out, "registered.ply", "adjust")
    A = _read(io.read_cloud, src, "registered cloud")
    B = _read(io.read_cloud, ref_path, "reference cloud")
    section = {}
    for dims in (3, 2):
        rep = chamfer(A, B, cfg.cutoff, dims)
        section[f"chamfer_{dims}d"] = rep.to_json()
        rep.write_csv(out / f"chamfer_{dims}d.csv")
        counts, edges = rep.histogram()
        section[f"histogram_{dims}d"] = {"edges": edges.tolist(), "counts": counts.tolist()}
        if rep.defined:
            log.info("chamfer %dD: mean %.4f m, std %.4f m over %d pairs", dims, rep.mean, rep.std, rep.pair_count)
    update_summary(out, "evaluate", section)
    return section


def run_stage(name: str, fn, *args, **kwargs):
    """Call one stage; unexpected failures become :class:`StageError`."""
    try:
        return fn(*args, **kwargs)
    except (InputError, StageError):
        raise
    except Exception as exc:
        log.debug("stage %s failed", name, exc_info=True)
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(cfg: PipelineConfig, inputs: PipelineInputs, out, dump_instance=None, workers: int = 1) -> dict:
    out = Path(out)
    run_stage("segment", stage_segment, cfg, inputs, out)
    run_stage("match", stage_match, out, dump_instance, workers)
    run_stage("register", stage_register, out)
    run_stage("adjust", stage_adjust, out)
    run_stage("evaluate", stage_evaluate, out)
    return json.loads(_summary_path(out).read_text())
