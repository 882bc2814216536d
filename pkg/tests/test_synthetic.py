import math

import numpy as np
import pytest
from scipy import ndimage

from crossreg import synthetic as S
from crossreg.bundle import project_point
from crossreg.geometry import RigidTransform3D, axis_angle_matrix, hull_diameter


@pytest.fixture(scope="module")
def small_scene():
    return S.generate_scene(S.SceneConfig(n_buildings=6, seed=1))


def test_generation_is_deterministic():
    cfg = S.SceneConfig(n_buildings=4, seed=5)
    a, b = S.generate_scene(cfg), S.generate_scene(cfg)
    np.testing.assert_array_equal(a.street.points, b.street.points)
    np.testing.assert_array_equal(a.observations, b.observations)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_buildings_disjoint_and_labeled(small_scene):
    sc = small_scene
    assert len(sc.buildings) == 6
    assert not S._overlaps(sc.buildings)
    ids = {b.id for b in sc.buildings}
    assert set(np.unique(sc.labels)) == ids | {-1}
    _, n = ndimage.label(sc.mask > 0)
    assert n == len(sc.buildings)
    for b in sc.buildings:
        assert hull_diameter(b.polygon) > 5.0


def test_facade_points_lie_on_their_facade(small_scene):
    sc = small_scene
    for b in sc.buildings:
        pts = sc.street.points[sc.labels == b.id]
        a, c = b.facade
        d = (c - a) / np.linalg.norm(c - a)
        n = np.array([-d[1], d[0]])
        dist = np.abs((pts[:, :2] - a) @ n)
        assert dist.max() < 6 * sc.config.point_noise


def test_observations_are_exact_projections(small_scene):
    sc = small_scene
    for o in sc.observations[:500]:
        u = project_point(sc.poses[o["pose"]], sc.tracks[o["point"]])
        np.testing.assert_allclose(u, [o["u"], o["v"]], atol=1e-9)


def test_no_drift_keeps_scene():
    sc = S.generate_scene(S.SceneConfig(n_buildings=4, seed=2))
    d = S.apply_drift(sc, S.DriftModel())
    np.testing.assert_allclose(d.street.points, sc.street.points, atol=1e-9)
    for T in d.truth.values():
        np.testing.assert_allclose(T.matrix34(), RigidTransform3D.identity().matrix34(), atol=1e-9)
    assert max(d.truth_residual.values()) < 1e-9


def test_frame_only_truth_is_frame_inverse():
    sc = S.generate_scene(S.SceneConfig(n_buildings=4, seed=3))
    F = S.random_frame(3)
    d = S.apply_drift(sc, S.DriftModel(), frame=F)
    inv = F.inverse()
    for T in d.truth.values():
        np.testing.assert_allclose(T.matrix34(), inv.matrix34(), atol=1e-9)
    for p, q in zip(d.poses, sc.poses):
        np.testing.assert_allclose(p.center, F.apply(q.center), atol=1e-9)
        X = sc.tracks[0]
        np.testing.assert_allclose(p.rotation @ (F.apply(X) - p.center), q.rotation @ (X - q.center), atol=1e-9)


def test_drift_grows_with_distance():
    sc = S.generate_scene(S.SceneConfig(n_buildings=6, seed=4))
    d = S.apply_drift(sc, S.BENCHMARK_DRIFT)
    err = np.array([np.linalg.norm(p.center - q.center) for p, q in zip(d.poses, sc.poses)])
    early = err[sc.pose_arc < 50].mean()
    late = err[sc.pose_arc > sc.pose_arc.max() - 200].mean()
    assert err[sc.pose_arc == 0].max() < 1e-9 and late > 10 * early


def test_drift_zero_at_start():
    traj = np.array([[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0]])
    p = S.drifted_positions(traj, np.array([0.0]), S.DriftModel(heading_rate=0.1, lateral_rate=0.05))
    np.testing.assert_allclose(p[0], traj[0], atol=1e-12)


def test_kabsch_recovers_transform():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(50, 3))
    T = RigidTransform3D(axis_angle_matrix([0.3, -0.2, 0.9], 1.1), np.array([3.0, -1.0, 2.0]))
    est, r = S.kabsch(src, T.apply(src))
    np.testing.assert_allclose(est.matrix34(), T.matrix34(), atol=1e-12)
    assert r < 1e-12


def test_random_frame_is_yaw_only():
    F = S.random_frame(9)
    np.testing.assert_allclose(F.rotation[2], [0, 0, 1], atol=1e-15)


def test_write_scene_files(tmp_path):
    sc = S.generate_scene(S.SceneConfig(n_buildings=3, seed=6))
    out = S.write_scene(S.apply_drift(sc, S.DriftModel(heading_rate=0.01)), tmp_path / "s")
    names = {p.name for p in out.iterdir()}
    for need in ("street.ply", "street_truth.ply", "overview_mask.pgm", "overview_mask.georef", "overview.ply",
                 "poses.txt", "observations.txt", "tracks.xyz", "truth_transforms.json", "manifest.json",
                 "overview_polygons.json"):
        assert need in names
