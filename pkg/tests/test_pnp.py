import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrpose.config import RansacConfig, ThresholdPolicy
from corrpose.errors import NoConsensus, TooFewCorrespondences
from corrpose.geometry import Pose, random_rotation
from corrpose.labelgen import PredictionMaps, corrupt, normalize_coords, rasterize
from corrpose.metrics import pose_error
from corrpose.pipeline import CorruptedOracleSource
from corrpose.pnp import Correspondences, adaptive_eps, extract, solve
from corrpose.roi import RoI
from corrpose.synthetic import default_camera, random_pose


def _project(pose, K, pts):
    cam = pts @ pose.rotation.T + pose.translation
    return np.stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy], axis=1)


def _synthetic(rng, n=200, pixel_noise=0.0):
    K = default_camera()
    pose = Pose(random_rotation(rng), [rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(1.2, 2.0)])
    pts = rng.uniform(-0.2, 0.2, size=(n, 3))
    px = _project(pose, K, pts) + rng.normal(0, pixel_noise, size=(n, 2)) * (pixel_noise > 0)
    return Correspondences(px, pts, np.arange(n)), pose, K


def test_exact_correspondences():
    rng = np.random.default_rng(0)
    for _ in range(10):
        corr, pose, K = _synthetic(rng)
        res = solve(corr, K)
        err = pose_error(res.pose, pose, zeroing="off")
        assert np.rad2deg(err.e_R) < 0.05
        assert err.e_t < 1e-3
        assert len(res.inliers) == 200
        assert res.reprojection_error < 0.5


def test_outliers_are_rejected():
    rng = np.random.default_rng(1)
    clean_err, dirty_err = [], []
    for _ in range(10):
        corr, pose, K = _synthetic(rng, pixel_noise=0.5)
        clean_err.append(pose_error(solve(corr, K).pose, pose, zeroing="off").e_pose)
        bad = rng.choice(200, 60, replace=False)
        px = corr.pixels.copy()
        # push outliers at least 20 px away from their true projection
        shift = rng.normal(size=(60, 2))
        px[bad] += shift / np.linalg.norm(shift, axis=1, keepdims=True) * rng.uniform(20, 200, size=(60, 1))
        res = solve(Correspondences(px, corr.points, corr.index), K)
        excluded = 1 - np.isin(bad, res.inliers).mean()
        assert excluded >= 0.95
        dirty_err.append(pose_error(res.pose, pose, zeroing="off").e_pose)
    assert np.mean(dirty_err) <= 2 * np.mean(clean_err)


def test_too_few_and_no_consensus():
    rng = np.random.default_rng(2)
    corr, _, K = _synthetic(rng, n=3)
    with pytest.raises(TooFewCorrespondences):
        solve(corr, K)
    noise = Correspondences(rng.uniform(0, 640, size=(50, 2)), rng.uniform(-0.2, 0.2, size=(50, 3)), np.arange(50))
    with pytest.raises(NoConsensus):
        solve(noise, K, RansacConfig(iters=50, min_inliers=30))


def test_solve_is_deterministic():
    rng = np.random.default_rng(3)
    corr, _, K = _synthetic(rng, n=1500, pixel_noise=1.0)
    a, b = solve(corr, K, seed=7), solve(corr, K, seed=7)
    assert a.pose.rotation.tobytes() == b.pose.rotation.tobytes()
    assert a.pose.translation.tobytes() == b.pose.translation.tobytes()
    assert np.array_equal(a.inliers, b.inliers)


def test_oracle_maps_reproject(sat, camera, rng):
    """Labels rendered on the crop map back to sub-pixel image positions."""
    for _ in range(5):
        pose = random_pose(rng, sat, camera)
        roi = RoI.from_mask(rasterize(sat, pose, camera).mask, 0.1)
        src = CorruptedOracleSource(sat, pose, camera, 128)
        corr = extract(src.predict(None, roi, 0), roi, sat.bbox)
        assert len(corr) > 50
        assert np.abs(_project(pose, camera, corr.points) - corr.pixels).max() < 0.5
        res = solve(corr, camera)
        assert res.reprojection_error < 0.5


def _random_maps(rng, size=24):
    coords = rng.random((size, size, 3))
    return PredictionMaps(coords, rng.random((size, size)), rng.random((size, size)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(1, 4))
def test_extraction_nesting(seed, e1, e2, stride):
    maps = _random_maps(np.random.default_rng(seed))
    lo, hi = sorted((e1, e2))
    roi = RoI((100.0, 100.0), 48.0)
    bbox = np.array([[0.0, 0, 0], [1.0, 1, 1]])
    a = extract(maps, roi, bbox, 0.5, lo, stride)
    b = extract(maps, roi, bbox, 0.5, hi, stride)
    assert set(a.index.tolist()) <= set(b.index.tolist())
    # stride 1 keeps a superset of any stride
    assert set(b.index.tolist()) <= set(extract(maps, roi, bbox, 0.5, hi, 1).index.tolist())
    rows, cols = np.divmod(b.index, 24)
    assert np.all(rows % stride == 0) and np.all(cols % stride == 0)
    assert np.all(maps.confidence[rows, cols] > 0.5) and np.all(maps.error[rows, cols] <= hi)


def test_extract_inclusive_gate_and_validation():
    maps = PredictionMaps(np.full((4, 4, 3), 0.5), np.ones((4, 4)), np.ones((4, 4)))
    roi = RoI((10.0, 10.0), 8.0)
    bbox = np.array([[0.0, 0, 0], [1.0, 1, 1]])
    assert len(extract(maps, roi, bbox, 0.5, 1.0, 1)) == 16
    with pytest.raises(ValueError):
        extract(maps, roi, bbox, 0.5, 0.0, 1)
    with pytest.raises(ValueError):
        extract(maps, roi, bbox, 0.5, 1.0, 0)


def test_adaptive_eps_examples():
    policy = ThresholdPolicy(mode="adaptive")
    conf = np.ones((32, 32))
    coords = np.full((32, 32, 3), 0.5)
    assert adaptive_eps(PredictionMaps(coords, np.zeros((32, 32)), conf), policy) == 0.025
    assert adaptive_eps(PredictionMaps(coords, np.full((32, 32), 0.4), conf), policy) == 0.5
    assert adaptive_eps(PredictionMaps(coords, np.zeros((32, 32)), np.zeros((32, 32))), policy) == 1.0


def test_adaptive_eps_tracks_noise(sat, camera, rng):
    from corrpose.config import NoiseConfig

    pose = random_pose(rng, sat, camera)
    lab = rasterize(sat, pose, camera)
    policy = ThresholdPolicy(mode="adaptive")
    small = adaptive_eps(corrupt(lab, NoiseConfig(sigma_coord=0.005), 0), policy)
    large = adaptive_eps(corrupt(lab, NoiseConfig(sigma_coord=0.05), 0), policy)
    assert small <= large


def test_normalized_extraction_roundtrip():
    bbox = np.array([[-0.2, -0.1, 0.0], [0.2, 0.3, 0.5]])
    pts = np.array([[0.0, 0.0, 0.25], [0.1, 0.2, 0.4]])
    coords = np.zeros((2, 2, 3))
    coords[0, 0], coords[0, 1] = normalize_coords(pts, bbox)
    maps = PredictionMaps(coords, np.zeros((2, 2)), np.array([[1.0, 1.0], [0.0, 0.0]]))
    corr = extract(maps, RoI((10.0, 10.0), 2.0), bbox, 0.5, 1.0, 1)
    assert np.allclose(corr.points, pts)
    assert np.allclose(corr.pixels, [[9.5, 9.5], [10.5, 9.5]])
