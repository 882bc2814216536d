import math

import numpy as np
import pytest
from scipy.optimize import linprog

from crossreg.adjustment import BlendModel, blend_point_transform, blend_weight, transform_poses
from crossreg.bundle import CameraPose
from crossreg.geometry import RigidTransform3D, axis_angle_matrix


def random_transform(rng, max_angle=0.3, max_shift=5.0):
    axis = rng.normal(size=3)
    R = axis_angle_matrix(axis / np.linalg.norm(axis), rng.uniform(-max_angle, max_angle))
    return RigidTransform3D(R, rng.uniform(-max_shift, max_shift, 3))


def yaw(deg, t=(0.0, 0.0, 0.0)):
    return RigidTransform3D(axis_angle_matrix(np.array([0.0, 0.0, 1.0]), math.radians(deg)), np.asarray(t, float))


def in_convex_hull(p, verts):
    """Feasibility of p = sum w_i v_i, w >= 0, sum w = 1."""
    n = len(verts)
    A = np.vstack([np.asarray(verts).T, np.ones(n)])
    b = np.concatenate([p, [1.0]])
    res = linprog(np.zeros(n), A_eq=A, b_eq=b, bounds=[(0, None)] * n, method="highs")
    return res.status == 0


def test_weight_examples():
    assert blend_weight(0.0) == 1.0
    assert blend_weight(math.e ** 2 - math.e) == pytest.approx(0.5, abs=1e-15)
    d = np.linspace(0, 1000, 200)
    w = blend_weight(d)
    assert np.all(w > 0) and np.all(np.diff(w) < 0)
    with pytest.raises(ValueError):
        blend_weight(-1.0)


def test_single_transform_exact():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = random_transform(rng)
        p = rng.uniform(-50, 50, 3)
        np.testing.assert_allclose(blend_point_transform(p, [(T, rng.uniform(0, 30))]), T.apply(p), atol=1e-12)


def test_identical_transforms_exact():
    rng = np.random.default_rng(1)
    for _ in range(20):
        T = random_transform(rng)
        p = rng.uniform(-50, 50, 3)
        pairs = [(T, d) for d in rng.uniform(0, 40, 5)]
        np.testing.assert_allclose(blend_point_transform(p, pairs), T.apply(p), atol=1e-12)


def test_blend_needs_a_transform():
    with pytest.raises(ValueError):
        blend_point_transform(np.zeros(3), [])


def test_blend_inside_convex_hull():
    rng = np.random.default_rng(2)
    for _ in range(50):
        Ts = [random_transform(rng) for _ in range(int(rng.integers(2, 6)))]
        p = rng.uniform(-20, 20, 3)
        out = blend_point_transform(p, [(T, d) for T, d in zip(Ts, rng.uniform(0, 50, len(Ts)))])
        assert in_convex_hull(out, [T.apply(p) for T in Ts])


def test_nearer_transform_dominates():
    p = np.zeros(3)
    a, b = yaw(0, (1, 0, 0)), yaw(0, (-1, 0, 0))
    out = blend_point_transform(p, [(a, 0.0), (b, 20.0)])
    assert out[0] > 0


# --- segment model -----------------------------------------------------------


def square(cx, cy, s=10.0, n=20):
    t = np.linspace(0, 1, n, endpoint=False)
    xs = np.concatenate([cx + s * t, np.full(n, cx + s), cx + s - s * t, np.full(n, cx)])
    ys = np.concatenate([np.full(n, cy), cy + s * t, np.full(n, cy + s), cy + s - s * t])
    return np.column_stack([xs, ys])


def model_row(transforms, **kw):
    fps = {i: square(20.0 * i, 0.0) for i in transforms}
    return BlendModel.build(transforms, fps, **kw), fps


def test_model_weights_positive_and_normalized():
    rng = np.random.default_rng(3)
    Ts = {i: random_transform(rng) for i in range(6)}
    model, _ = model_row(Ts, K=3)
    for _ in range(10):
        xy = rng.uniform(-20, 130, (100, 2))
        owner = model.nearest_owner(xy)
        slots, w = model.weights(xy, owner)
        used = slots >= 0
        assert np.all(w[used] > 0) and np.all(w[~used] == 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_model_single_segment_is_rigid():
    rng = np.random.default_rng(4)
    T = random_transform(rng)
    model, _ = model_row({7: T})
    pts = rng.uniform(-30, 30, (50, 3))
    np.testing.assert_allclose(model.transform_points(pts), T.apply(pts), atol=1e-12)


def test_model_identical_transforms_rigid():
    rng = np.random.default_rng(5)
    T = random_transform(rng)
    model, _ = model_row({i: T for i in range(5)}, K=4)
    pts = rng.uniform(-30, 100, (200, 3))
    np.testing.assert_allclose(model.transform_points(pts), T.apply(pts), atol=1e-12)


def test_model_matches_pointwise_blend():
    rng = np.random.default_rng(6)
    Ts = {i: random_transform(rng) for i in range(4)}
    model, fps = model_row(Ts, K=2)
    pts = rng.uniform(-10, 70, (30, 3))
    owner = model.nearest_owner(pts[:, :2])
    out = model.transform_points(pts, owner)
    for p, o, q in zip(pts, owner, out):
        members = [int(o)] + model.neighbors[int(o)]
        pairs = []
        for m in members:
            d = np.min(np.linalg.norm(np.unique(fps[model.ids[m]], axis=0) - p[:2], axis=1))
            pairs.append((model.transforms[m], d))
        np.testing.assert_allclose(q, blend_point_transform(p, pairs), atol=1e-10)


def test_neighbors_are_nearest_by_centroid():
    Ts = {i: RigidTransform3D() for i in range(5)}
    model, _ = model_row(Ts, K=2)
    assert model.neighbors[0] == [1, 2]
    assert model.neighbors[2] == [1, 3]
    assert model.neighbors[4] == [3, 2]


def test_disagreeing_neighbors_excluded():
    Ts = {0: yaw(0), 1: yaw(0.5), 2: yaw(40), 3: yaw(0, (500, 0, 0))}
    model, _ = model_row(Ts, K=3, max_angle=10.0, max_shift=100.0)
    assert model.neighbors[0] == [1]
    assert model.neighbors[2] == []
    model, _ = model_row(Ts, K=3)
    assert model.neighbors[0] == [1, 2, 3]


def test_poses_follow_owner_rotation():
    Ts = {0: yaw(30, (2, 3, 0.5))}
    model, _ = model_row(Ts)
    R0 = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    pose = CameraPose(R0, [5.0, -4.0, 1.5], 500.0)
    (out,) = transform_poses([pose], model)
    np.testing.assert_allclose(out.center, Ts[0].apply(pose.center), atol=1e-12)
    X = np.array([3.0, 7.0, 2.0])
    # the moved camera sees the moved point where the old one saw the old point
    np.testing.assert_allclose(out.rotation @ (Ts[0].apply(X) - out.center), R0 @ (X - pose.center), atol=1e-12)


def test_empty_model_rejected():
    with pytest.raises(ValueError):
        BlendModel.build({}, {})
