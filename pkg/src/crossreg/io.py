"""Readers and writers for the on-disk formats used by the CLI.

Clouds: ASCII XYZ (``x y z [nx ny nz]``) and binary little-endian PLY.
Rasters: PGM (P5) or PNG masks with a ``origin_x origin_y cell_size``
sidecar. Poses: ``id fx cx cy r11..r33 Cx Cy Cz`` per line. Observations:
``pose_id point_id u v`` per line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import DistanceMap, PointCloud


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) not in (3, 6):
                raise FormatError(f"{path}:{lineno}: expected 3 or 6 columns, got {len(vals)}")
            rows.append([float(v) for v in vals])
    if not rows:
        return PointCloud(np.zeros((0, 3)))
    ncols = {len(r) for r in rows}
    if len(ncols) != 1:
        raise FormatError(f"{path}: mixed column counts")
    arr = np.array(rows)
    return PointCloud(arr[:, :3], arr[:, 3:6] if arr.shape[1] == 6 else None)


def write_xyz(path, cloud: PointCloud) -> None:
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data, fmt="%.17g")


_PLY_TYPES = {
    "double": "<f8", "float64": "<f8", "float": "<f4", "float32": "<f4",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
}


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        props: list[tuple[str, str]] = []
        count = None
        fmt = None
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    count = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise FormatError(f"{path}: list properties on vertices are unsupported")
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise FormatError(f"{path}: only binary_little_endian PLY is supported")
        data = np.frombuffer(fh.read(), dtype=np.dtype(props), count=count)
    names = {p for p, _ in props}
    pts = np.column_stack([data[c].astype(np.float64) for c in "xyz"])
    normals = None
    if {"nx", "ny", "nz"} <= names:
        normals = np.column_stack([data[c].astype(np.float64) for c in ("nx", "ny", "nz")])
    return PointCloud(pts, normals)


def write_ply(path, cloud: PointCloud) -> None:
    cols = ["x", "y", "z"]
    arrays = [cloud.points]
    if cloud.normals is not None:
        cols += ["nx", "ny", "nz"]
        arrays.append(cloud.normals)
    data = np.ascontiguousarray(np.hstack(arrays), dtype="<f8")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(data)}"]
    header += [f"property double {c}" for c in cols] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def write_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, cloud)
    else:
        write_xyz(path, cloud)


# ---------------------------------------------------------------------------
# Rasters
# ---------------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] not in (b"P5", b"P2"):
        raise FormatError(f"{path}: not a PGM file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if tokens[0] == b"P2":
        vals = np.array(raw[pos:].split(), dtype=np.int64)
        return vals[: w * h].reshape(h, w)
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.min() < 0:
        raise ValueError("PGM values must be non-negative")
    maxval = 255 if img.max() < 256 else 65535
    if img.max() > 65535:
        raise ValueError("PGM values must fit in 16 bits")
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(img.astype(dtype).tobytes())


def read_mask(path) -> np.ndarray:
    """Labeled raster as int64, row 0 = lowest y (the file's last line)."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        img = read_pgm(path)
    else:
        from PIL import Image

        img = np.asarray(Image.open(path).convert("I")).astype(np.int64)
    return img[::-1].copy()


def write_mask(path, mask) -> None:
    write_pgm(path, np.asarray(mask)[::-1])


def read_georef(path) -> tuple[np.ndarray, float]:
    vals = Path(path).read_text().split("#", 1)[0].split()
    if len(vals) != 3:
        raise FormatError(f"{path}: expected 'origin_x origin_y cell_size'")
    ox, oy, cs = (float(v) for v in vals)
    if cs <= 0:
        raise FormatError(f"{path}: cell size must be positive")
    return np.array([ox, oy]), cs


def write_georef(path, origin, cell_size: float) -> None:
    Path(path).write_text(f"{float(origin[0])!r} {float(origin[1])!r} {float(cell_size)!r}\n")


def georef_path(mask_path) -> Path:
    p = Path(mask_path)
    return p.with_suffix(".georef")


def write_distance_map_pgm(path, dmap: DistanceMap) -> None:
    """Distances in centimeters, clipped to 16 bits."""
    cm = np.clip(np.round(dmap.grid * 100.0), 0, 65535).astype(np.int64)
    write_pgm(path, cm[::-1])


# ---------------------------------------------------------------------------
# Vector data, poses, observations
# ---------------------------------------------------------------------------


def read_polygons(path) -> list[np.ndarray]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("polygons", [])
    return [np.asarray(ring, dtype=np.float64).reshape(-1, 2) for ring in data]


def write_polygons(path, rings) -> None:
    Path(path).write_text(json.dumps([np.asarray(r).tolist() for r in rings]))


def read_poses(path):
    from .bundle import CameraPose

    poses = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vals = line.split()
        if len(vals) != 16:
            raise FormatError(f"{path}:{lineno}: expected 16 fields, got {len(vals)}")
        pid = int(vals[0])
        f, cx, cy = (float(v) for v in vals[1:4])
        R = np.array([float(v) for v in vals[4:13]]).reshape(3, 3)
        C = np.array([float(v) for v in vals[13:16]])
        poses[pid] = CameraPose(R, C, f, np.array([cx, cy]))
    return [poses[k] for k in sorted(poses)], sorted(poses)


def write_poses(path, poses, ids=None) -> None:
    ids = list(range(len(poses))) if ids is None else ids
    lines = []
    for pid, p in zip(ids, poses):
        vals = [p.focal, *p.principal_point, *p.rotation.ravel(), *p.center]
        lines.append(f"{pid} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_observations(path) -> np.ndarray:
    """Structured array with fields pose, point, u, v."""
    path = Path(path)
    dtype = np.dtype([("pose", "<i8"), ("point", "<i8"), ("u", "<f8"), ("v", "<f8")])
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(dtype)
    rows = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            a, b, u, v = line.split()
            rows.append((int(a), int(b), float(u), float(v)))
    return np.array(rows, dtype=dtype)


def write_observations(path, obs) -> None:
    path = Path(path)
    if path.suffix.lower() == ".npy":
        np.save(path, obs)
        return
    lines = [f"{int(o['pose'])} {int(o['point'])} {float(o['u'])!r} {float(o['v'])!r}" for o in obs]
    path.write_text("\n".join(lines) + "\n")


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
