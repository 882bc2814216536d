import math

import numpy as np
import pytest

from crossreg.evaluation import chamfer, mutual_nearest_pairs
from crossreg.geometry import PointCloud


def brute_chamfer(A, B, cutoff, dims=3):
    a, b = A[:, :dims], B[:, :dims]
    D = np.linalg.norm(a[:, None] - b[None], axis=-1)
    ia, ib = D.argmin(axis=1), D.argmin(axis=0)
    d = [D[i, ia[i]] for i in range(len(a)) if ib[ia[i]] == i and D[i, ia[i]] <= cutoff]
    if not d:
        return math.nan, 0
    return float(np.mean(d)), len(d)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 20, (int(rng.integers(200, 1000)), 3))
    B = A[rng.permutation(len(A))[: int(0.8 * len(A))]] + rng.normal(0, 0.3, (int(0.8 * len(A)), 3))
    for dims in (2, 3):
        rep = chamfer(A, B, cutoff=1.0, dims=dims)
        mean, n = brute_chamfer(A, B, 1.0, dims)
        assert rep.pair_count == n
        assert abs(rep.mean - mean) <= 1e-12


def test_brute_force_at_2000_points():
    rng = np.random.default_rng(11)
    A = rng.uniform(0, 30, (2000, 3))
    B = rng.uniform(0, 30, (1800, 3))
    rep = chamfer(A, B, cutoff=10.0)
    mean, n = brute_chamfer(A, B, 10.0)
    assert rep.pair_count == n and abs(rep.mean - mean) <= 1e-12


def test_symmetric():
    rng = np.random.default_rng(1)
    A, B = rng.uniform(0, 10, (500, 3)), rng.uniform(0, 10, (400, 3))
    ab, ba = chamfer(A, B), chamfer(B, A)
    assert ab.pair_count == ba.pair_count
    assert ab.mean == ba.mean and ab.std == ba.std


def test_identical_clouds_zero():
    rng = np.random.default_rng(2)
    A = rng.uniform(0, 10, (300, 3))
    rep = chamfer(A, A.copy())
    assert rep.mean == 0.0 and rep.std == 0.0 and rep.pair_count == 300


def test_translation_gives_shift_distance():
    A = np.mgrid[0:5, 0:5, 0:5].reshape(3, -1).T.astype(float) * 2.0
    rep = chamfer(A, A + [0.1, 0.0, 0.0])
    assert rep.pair_count == len(A)
    assert rep.mean == pytest.approx(0.1, abs=1e-12)
    assert chamfer(A, A + [0.0, 0.0, 0.1], dims=2).mean == 0.0


def test_cutoff_drops_far_pairs_and_undefined_mean():
    A = np.zeros((1, 3))
    rep = chamfer(A, A + [20.0, 0, 0], cutoff=10.0)
    assert not rep.defined and math.isnan(rep.mean) and rep.pair_count == 0
    assert rep.to_json()["undefined_mean"] is True
    assert chamfer(A, A + [20.0, 0, 0], cutoff=30.0).mean == 20.0


def test_pairs_are_mutual():
    rng = np.random.default_rng(3)
    A, B = rng.uniform(0, 10, (200, 3)), rng.uniform(0, 10, (150, 3))
    pairs = mutual_nearest_pairs(A, B)
    D = np.linalg.norm(A[:, None] - B[None], axis=-1)
    for a, b in pairs:
        assert D[a].argmin() == b and D[:, b].argmin() == a
    assert np.all(np.diff(pairs[:, 0]) > 0)


def test_accepts_point_clouds_and_rejects_empty():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 1, (20, 3))
    assert chamfer(PointCloud(pts), PointCloud(pts)).mean == 0.0
    with pytest.raises(ValueError):
        chamfer(pts, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        chamfer(pts, pts, dims=4)


def test_histogram_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    A = rng.uniform(0, 10, (100, 3))
    rep = chamfer(A, A + rng.normal(0, 0.2, A.shape), cutoff=2.0)
    counts, edges = rep.histogram(0.25)
    assert counts.sum() == rep.pair_count and edges[-1] == 2.0
    rep.write_csv(tmp_path / "d.csv")
    vals = np.loadtxt(tmp_path / "d.csv", skiprows=1)
    np.testing.assert_array_equal(vals, rep.distances)
