import numpy as np
import pytest
from PIL import Image

from crossreg import io
from crossreg.bundle import OBS_DTYPE, CameraPose
from crossreg.geometry import PointCloud, build_distance_map


def test_xyz_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    c = PointCloud(rng.normal(size=(50, 3)), None)
    io.write_xyz(tmp_path / "a.xyz", c)
    np.testing.assert_array_equal(io.read_xyz(tmp_path / "a.xyz").points, c.points)
    n = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    io.write_cloud(tmp_path / "b.xyz", PointCloud(c.points, n))
    back = io.read_cloud(tmp_path / "b.xyz")
    np.testing.assert_array_equal(back.normals, n)


def test_xyz_errors_and_comments(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2 3\n1 2\n")
    with pytest.raises(io.FormatError):
        io.read_xyz(p)
    p.write_text("# header\n1 2 3  # trailing\n\n4 5 6\n")
    np.testing.assert_array_equal(io.read_xyz(p).points, [[1, 2, 3], [4, 5, 6]])
    p.write_text("")
    assert len(io.read_xyz(p).points) == 0


def test_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(100, 3))
    io.write_cloud(tmp_path / "a.ply", PointCloud(pts))
    np.testing.assert_array_equal(io.read_cloud(tmp_path / "a.ply").points, pts)


def test_ply_float_properties(tmp_path):
    data = np.zeros(3, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1")])
    data["x"] = [1, 2, 3]
    header = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\n" \
             b"property float z\nproperty uchar red\nend_header\n"
    (tmp_path / "f.ply").write_bytes(header + data.tobytes())
    np.testing.assert_array_equal(io.read_ply(tmp_path / "f.ply").points[:, 0], [1, 2, 3])


def test_ply_rejects_ascii(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(io.FormatError):
        io.read_ply(tmp_path / "a.ply")
    (tmp_path / "b.ply").write_bytes(b"not ply\n")
    with pytest.raises(io.FormatError):
        io.read_ply(tmp_path / "b.ply")


@pytest.mark.parametrize("maxval", [200, 3000])
def test_pgm_roundtrip(tmp_path, maxval):
    img = np.random.default_rng(2).integers(0, maxval, (7, 9))
    io.write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_ascii_and_comments(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n# made by hand\n3 2\n9\n1 2 3\n4 5 6\n")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "a.pgm"), [[1, 2, 3], [4, 5, 6]])


def test_mask_rows_flip_to_y_up(tmp_path):
    mask = np.zeros((4, 5), dtype=int)
    mask[0, 1] = 3  # row 0 is the lowest y
    io.write_mask(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(io.read_mask(tmp_path / "m.pgm"), mask)
    assert io.read_pgm(tmp_path / "m.pgm")[-1, 1] == 3


def test_png_mask(tmp_path):
    img = np.zeros((4, 5), dtype=np.uint8)
    img[3, 2] = 7
    Image.fromarray(img).save(tmp_path / "m.png")
    m = io.read_mask(tmp_path / "m.png")
    assert m[0, 2] == 7 and m.sum() == 7


def test_georef(tmp_path):
    io.write_georef(tmp_path / "m.georef", [1.5, -2.25], 0.5)
    origin, cs = io.read_georef(tmp_path / "m.georef")
    np.testing.assert_array_equal(origin, [1.5, -2.25])
    assert cs == 0.5
    assert io.georef_path(tmp_path / "m.pgm") == tmp_path / "m.georef"
    (tmp_path / "bad.georef").write_text("1 2 0\n")
    with pytest.raises(io.FormatError):
        io.read_georef(tmp_path / "bad.georef")


def test_poses_roundtrip_sorted_by_id(tmp_path):
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    poses = [CameraPose(R, [1.0, 2.0, 3.0], 800.0, [640.0, 480.0]), CameraPose(np.eye(3), [0.1, 0.2, 0.3], 500.0)]
    io.write_poses(tmp_path / "p.txt", poses, ids=[5, 2])
    back, ids = io.read_poses(tmp_path / "p.txt")
    assert ids == [2, 5]
    np.testing.assert_array_equal(back[1].rotation, R)
    np.testing.assert_array_equal(back[1].center, [1, 2, 3])
    assert back[0].focal == 500.0
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(io.FormatError):
        io.read_poses(tmp_path / "bad.txt")


@pytest.mark.parametrize("name", ["o.txt", "o.npy"])
def test_observations_roundtrip(tmp_path, name):
    obs = np.array([(0, 1, 10.5, 20.25), (3, 2, -1.0, 0.1)], dtype=OBS_DTYPE)
    io.write_observations(tmp_path / name, obs)
    back = io.read_observations(tmp_path / name)
    assert back.dtype.names == ("pose", "point", "u", "v")
    np.testing.assert_array_equal(back, obs)


def test_polygons_roundtrip(tmp_path):
    rings = [np.array([[0, 0], [4, 0], [4, 3]], float), np.array([[10, 10], [12, 10], [12, 12], [10, 12]], float)]
    io.write_polygons(tmp_path / "p.json", rings)
    back = io.read_polygons(tmp_path / "p.json")
    for a, b in zip(rings, back):
        np.testing.assert_array_equal(a, b)
    (tmp_path / "q.json").write_text('{"polygons": [[[0, 0], [1, 0], [1, 1]]]}')
    assert io.read_polygons(tmp_path / "q.json")[0].shape == (3, 2)


def test_distance_map_pgm_in_centimeters(tmp_path):
    dmap = build_distance_map(np.array([[0.0, 0.0]]), 0.5, 2.0)
    io.write_distance_map_pgm(tmp_path / "d.pgm", dmap)
    img = io.read_pgm(tmp_path / "d.pgm")[::-1]
    np.testing.assert_array_equal(img, np.round(dmap.grid * 100))


def test_dump_json_is_sorted(tmp_path):
    io.dump_json(tmp_path / "a.json", {"b": 1, "a": 2})
    assert (tmp_path / "a.json").read_text().index('"a"') < (tmp_path / "a.json").read_text().index('"b"')
