import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossreg.geometry import (
    UP,
    DistanceMap,
    NeighborIndex,
    PointCloud,
    RigidTransform2D,
    RigidTransform3D,
    axis_angle_matrix,
    brute_force_edt,
    build_distance_map,
    build_neighbor_index,
    edt_cells,
    estimate_normals,
    estimate_vertical_axis,
    hull_diameter,
    penalize_interior,
    rotation_between,
    voxel_downsample,
)


# --- point clouds and neighbor search --------------------------------------


def test_point_cloud_rejects_bad_input():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, np.nan]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), normals=np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), normals=np.array([[0.0, 0.0, 1.0]]))


def test_neighbor_index_rejects_empty():
    with pytest.raises(ValueError):
        build_neighbor_index(np.zeros((0, 3)))


def test_knn_self_query_returns_self():
    idx = build_neighbor_index(np.array([[1.0, 2.0, 3.0]]))
    d, i = idx.knn([1.0, 2.0, 3.0], 1)
    assert i[0, 0] == 0 and d[0, 0] == 0.0


def test_knn_collinear_points():
    idx = build_neighbor_index(np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]]))
    d, i = idx.knn([0.0, 0, 0], 2)
    assert i[0].tolist() == [0, 1]
    assert d[0].tolist() == [0.0, 1.0]


def test_knn_k_larger_than_set_rejected():
    idx = build_neighbor_index(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        idx.knn(np.zeros(3), 4)


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_exhaustive_sort(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-10, 10, (100 * (seed + 1), 3))
    idx = NeighborIndex(pts)
    d, i = idx.knn(pts, 5)
    full = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    ref = np.sort(full, axis=1)[:, :5]
    np.testing.assert_allclose(d, ref, atol=1e-12)
    np.testing.assert_allclose(np.take_along_axis(full, i, axis=1), ref, atol=1e-12)


def test_radius_query_sorted_and_complete():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 5, (300, 3))
    idx = NeighborIndex(pts)
    for q, nb in zip(pts[:20], idx.radius(pts[:20], 1.0)):
        d = np.linalg.norm(pts - q, axis=1)
        assert set(nb.tolist()) == set(np.flatnonzero(d <= 1.0).tolist())
        assert np.all(np.diff(d[nb]) >= 0)


# --- normals and vertical axis ---------------------------------------------


def _plane_cloud(normal, n=400, seed=0, noise=0.0, extent=1.0):
    rng = np.random.default_rng(seed)
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    a = np.cross(normal, [1.0, 0, 0] if abs(normal[0]) < 0.9 else [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    uv = rng.uniform(-extent / 2, extent / 2, (n, 2))
    pts = uv[:, :1] * a + uv[:, 1:] * b + noise * rng.standard_normal((n, 1)) * normal
    return PointCloud(pts)


@pytest.mark.parametrize("normal", [(0, 0, 1), (1, 0, 0), (0.3, -0.4, 0.5)])
def test_normals_on_exact_planes(normal):
    cloud = estimate_normals(_plane_cloud(normal), k=16)
    n = np.asarray(normal, float) / np.linalg.norm(normal)
    assert cloud.normal_valid.all()
    np.testing.assert_allclose(np.abs(cloud.normals @ n), 1.0, atol=1e-6)


def test_normals_on_offset_plane_x5():
    cloud = _plane_cloud((1, 0, 0))
    cloud = PointCloud(cloud.points + [5.0, 0, 0])
    out = estimate_normals(cloud, k=10)
    np.testing.assert_allclose(np.abs(out.normals[:, 0]), 1.0, atol=1e-6)


def test_noisy_plane_normals_close_to_total_least_squares_fit():
    # ~0.14 m spacing: ten neighbors span enough of the plane to average the noise
    cloud = _plane_cloud((0, 0, 1), n=50, noise=0.01)
    out = estimate_normals(cloud, k=10)
    p = cloud.points - cloud.points.mean(axis=0)
    tls = np.linalg.eigh(p.T @ p)[1][:, 0]
    ang = np.degrees(np.arccos(np.clip(np.abs(out.normals @ tls), 0, 1)))
    assert np.median(ang) < 5.0


def test_normals_agree_in_sign_on_a_patch():
    out = estimate_normals(_plane_cloud((0.2, 0.1, 1.0)), k=12)
    assert np.all(out.normals @ out.normals[0] > 0)


def test_normals_invariant_to_in_plane_rotation():
    base = _plane_cloud((0, 0, 1))
    R = axis_angle_matrix(UP, 0.7)
    out = estimate_normals(PointCloud(base.points @ R.T), k=16)
    np.testing.assert_allclose(np.abs(out.normals[:, 2]), 1.0, atol=1e-6)


def test_degenerate_neighborhood_flagged():
    pts = np.column_stack([np.arange(20.0), np.zeros(20), np.zeros(20)])
    out = estimate_normals(PointCloud(pts), k=5)
    assert not out.normal_valid.any()
    assert np.all(out.normals == 0)


def test_normals_reject_bad_k():
    with pytest.raises(ValueError):
        estimate_normals(PointCloud(np.zeros((5, 3))), k=2)
    with pytest.raises(ValueError):
        estimate_normals(PointCloud(np.random.default_rng(0).random((5, 3))), k=6)


def test_vertical_axis_trivial():
    axis = estimate_vertical_axis(np.tile([0.0, 0.0, 1.0], (10, 1)))
    np.testing.assert_allclose(axis.direction, UP, atol=1e-12)


def test_vertical_axis_modal_direction_with_wall_clutter():
    rng = np.random.default_rng(3)
    up = rng.normal([0, 0, 1], 0.02, (700, 3))
    wall = rng.normal([1, 0, 0], 0.02, (300, 3))
    n = np.vstack([up, -wall])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    axis = estimate_vertical_axis(n)
    assert math.degrees(math.acos(axis.direction @ UP)) < 5.0


def test_vertical_axis_merges_antipodes():
    n = np.vstack([np.tile([0, 0, 1.0], (3, 1)), np.tile([0, 0, -1.0], (3, 1)), np.tile([1.0, 0, 0], (4, 1))])
    axis = estimate_vertical_axis(n)
    np.testing.assert_allclose(axis.direction, UP, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_vertical_axis_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal([0, 0, 1], 0.1, (200, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    a = estimate_vertical_axis(n).direction
    b = estimate_vertical_axis(n[rng.permutation(len(n))]).direction
    assert np.array_equal(a, b)


# --- rigid transforms -------------------------------------------------------


def test_rotate_unit_x_by_quarter_turn():
    out = RigidTransform2D(math.pi / 2).apply(np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-12)


def test_identity_is_fixpoint():
    pts = np.random.default_rng(0).random((10, 3))
    assert np.array_equal(RigidTransform3D.identity().apply(pts), pts)
    assert np.array_equal(RigidTransform2D.identity().apply(pts[:, :2]), pts[:, :2])


@settings(max_examples=50, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-100, 100), st.floats(-100, 100), st.integers(0, 1000))
def test_transform2d_inverse_roundtrip(angle, tx, ty, seed):
    T = RigidTransform2D(angle, [tx, ty])
    pts = np.random.default_rng(seed).uniform(-50, 50, (20, 2))
    np.testing.assert_allclose(T.inverse().apply(T.apply(pts)), pts, atol=1e-9)


def _random_rigid3(rng):
    axis = rng.normal(size=3)
    return RigidTransform3D(axis_angle_matrix(axis, rng.uniform(-math.pi, math.pi)), rng.uniform(-10, 10, 3))


@pytest.mark.parametrize("seed", range(10))
def test_transform3d_inverse_and_associativity(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (_random_rigid3(rng) for _ in range(3))
    pts = rng.uniform(-20, 20, (30, 3))
    np.testing.assert_allclose(A.inverse().apply(A.apply(pts)), pts, atol=1e-9)
    np.testing.assert_allclose(((A @ B) @ C).apply(pts), (A @ (B @ C)).apply(pts), atol=1e-9)
    np.testing.assert_allclose((A @ B).apply(pts), A.apply(B.apply(pts)), atol=1e-9)


def test_transform2d_composition_order():
    A = RigidTransform2D(0.3, [1.0, 2.0])
    B = RigidTransform2D(-1.1, [0.5, -3.0])
    p = np.array([[2.0, -1.0]])
    np.testing.assert_allclose((A @ B).apply(p), A.apply(B.apply(p)), atol=1e-12)


def test_transform3d_rejects_non_rotation():
    with pytest.raises(ValueError):
        RigidTransform3D(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform3D(np.eye(3) * 1.01)


def test_matrix34_roundtrip():
    T = _random_rigid3(np.random.default_rng(5))
    U = RigidTransform3D.from_matrix34(T.matrix34())
    assert np.array_equal(U.rotation, T.rotation) and np.array_equal(U.translation, T.translation)


@pytest.mark.parametrize("a", [(0, 0, 1), (0, 0, -1), (1, 0, 0), (0.2, -0.3, 0.9), (0, 1, 0)])
def test_rotation_between_maps_a_onto_up(a):
    a = np.asarray(a, float) / np.linalg.norm(a)
    R = rotation_between(a, UP)
    np.testing.assert_allclose(R @ a, UP, atol=1e-12)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12


# --- distance maps -----------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_edt_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 65, 2)
    occ = rng.random((h, w)) < rng.uniform(0.001, 0.2)
    occ[rng.integers(h), rng.integers(w)] = True
    assert np.array_equal(edt_cells(occ), brute_force_edt(occ))


def test_edt_rejects_empty_grid():
    with pytest.raises(ValueError):
        edt_cells(np.zeros((4, 4), dtype=bool))


def test_distance_map_single_source():
    dmap = build_distance_map(np.array([[3.2, -1.7]]), cell_size=0.5, padding=4.0)
    rows, cols = np.indices(dmap.shape)
    centers = dmap.cell_center(rows.ravel(), cols.ravel())
    true = np.linalg.norm(centers - [3.2, -1.7], axis=1)
    assert np.all(np.abs(dmap.grid.ravel() - true) <= 0.5 * math.sqrt(2) * 0.5 + 1e-12)
    r, c = dmap.cell_index([[3.2, -1.7]])
    assert dmap.grid[r[0], c[0]] == 0.0


def test_distance_map_two_sources_midpoint():
    dmap = build_distance_map(np.array([[0.0, 0.0], [10.0, 0.0]]), cell_size=0.5, padding=2.0)
    assert abs(dmap.lookup([[5.0, 0.0]])[0] - 5.0) <= 0.5


def test_distance_map_covers_padded_bbox():
    pts = np.array([[1.0, 1.0], [4.0, 7.0]])
    dmap = build_distance_map(pts, cell_size=0.5, padding=3.0)
    lo = dmap.origin
    hi = lo + np.array(dmap.shape[::-1]) * dmap.cell_size
    assert np.all(lo <= pts.min(axis=0) - 3.0) and np.all(hi >= pts.max(axis=0) + 3.0)


def test_distance_map_rejects_bad_input():
    with pytest.raises(ValueError):
        build_distance_map(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        build_distance_map(np.array([[0.0, 0.0]]), cell_size=0.0)
    with pytest.raises(ValueError):
        build_distance_map(np.zeros((0, 2)))


def test_lookup_off_grid_extrapolates():
    dmap = DistanceMap(np.zeros(2), 1.0, np.zeros((3, 3)))
    assert dmap.lookup_cells(np.array([1]), np.array([5]))[0] == 3.0
    ext = dmap.extended(2)
    assert ext.shape == (7, 7) and ext.grid[0, 0] == pytest.approx(2 * math.sqrt(2))


def test_penalize_interior_spares_outline_band():
    ring = np.array([[x, y] for x in np.arange(0, 10.01, 0.25) for y in (0.0, 10.0)]
                    + [[x, y] for y in np.arange(0, 10.01, 0.25) for x in (0.0, 10.0)])
    dmap = build_distance_map(ring, 0.5, 5.0)
    inside = lambda xy: np.all((xy > 0) & (xy < 10), axis=1)
    pen = penalize_interior(dmap, [inside], 10.0)
    near = dmap.grid <= dmap.cell_size
    assert np.array_equal(pen.grid[near], dmap.grid[near])
    assert pen.lookup([[5.0, 5.0]])[0] == pytest.approx(dmap.lookup([[5.0, 5.0]])[0] + 10.0)
    assert pen.lookup([[-3.0, 5.0]])[0] == dmap.lookup([[-3.0, 5.0]])[0]


# --- helpers ----------------------------------------------------------------


def test_hull_diameter_matches_pairwise_max():
    pts = np.random.default_rng(2).random((200, 2)) * 30
    ref = np.max(np.linalg.norm(pts[:, None] - pts[None], axis=-1))
    assert hull_diameter(pts) == pytest.approx(ref, abs=1e-12)
    line = np.column_stack([np.arange(5.0), np.zeros(5)])
    assert hull_diameter(line) == 4.0


def test_voxel_downsample_keeps_first_point_per_voxel():
    pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0, 0], [0.15, 0.05, 0.0]])
    keep, owner = voxel_downsample(pts, 1.0)
    assert keep.tolist() == [0, 2]
    assert owner.tolist() == [0, 0, 1, 0]
