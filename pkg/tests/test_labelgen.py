import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrpose import mesh as M
from corrpose.config import NoiseConfig
from corrpose.errors import DegenerateBBox, ShapeMismatch, TooManyRegions
from corrpose.geometry import CameraIntrinsics, Pose, exp_so3
from corrpose.labelgen import (
    LabelMaps,
    PredictionMaps,
    corrupt,
    denormalize_coords,
    error_map,
    farthest_point_regions,
    losses,
    normalize_coords,
    rasterize,
)

BBOX = np.array([[-1.0, 0.0, 2.0], [3.0, 0.5, 4.0]])


def _labels(size=48, seed=0):
    mesh = M.box((0.3, 0.2, 0.25), subdivisions=1)
    K = CameraIntrinsics(90.0, 90.0, (size - 1) / 2, (size - 1) / 2, size, size)
    part = farthest_point_regions(mesh, 8)
    return rasterize(mesh, Pose(exp_so3([0.4, 0.3 + seed, 0.2]), [0, 0, 1.0]), K, partition=part)


# ---------------------------------------------------------------- normalization


def test_normalize_examples():
    assert np.allclose(normalize_coords(BBOX[0], BBOX), 0)
    assert np.allclose(normalize_coords(BBOX[1], BBOX), 1)
    assert np.allclose(normalize_coords(BBOX.mean(axis=0), BBOX), 0.5)
    with pytest.raises(DegenerateBBox):
        normalize_coords([0, 0, 0], [[0, 0, 0], [1, 1e-13, 1]])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3))
def test_normalize_roundtrip(p):
    assert np.allclose(denormalize_coords(normalize_coords(p, BBOX), BBOX), p, atol=1e-9)


# ---------------------------------------------------------------- regions


def brute_fps(vertices, n):
    c = tuple(sum(v[i] for v in vertices) / len(vertices) for i in range(3))
    dc = [math.dist(v, c) for v in vertices]
    seeds = [dc.index(max(dc))]
    while len(seeds) < n:
        best, best_d = None, -1.0
        for i, v in enumerate(vertices):
            if i in seeds:
                continue
            d = min(math.dist(v, vertices[s]) for s in seeds)
            if d > best_d:
                best, best_d = i, d
        seeds.append(best)
    labels = []
    for v in vertices:
        ds = [math.dist(v, vertices[s]) for s in seeds]
        labels.append(ds.index(min(ds)))
    return seeds, labels


@pytest.mark.parametrize("n", [1, 3, 8, 16])
def test_fps_matches_brute_force(n):
    m = M.satellite()
    part = farthest_point_regions(m, n)
    seeds, labels = brute_fps([tuple(v) for v in m.vertices], n)
    assert part.seeds.tolist() == seeds
    assert part.labels.tolist() == labels


def test_fps_examples():
    cube = M.box((1.0, 1.0, 1.0))
    one = farthest_point_regions(cube, 1)
    assert set(one.labels.tolist()) == {0}
    eight = farthest_point_regions(cube, 8)
    assert sorted(eight.seeds.tolist()) == list(range(8))
    assert eight.labels[eight.seeds].tolist() == list(range(8))
    sat = farthest_point_regions(M.satellite(), 8)
    assert len(set(sat.seeds.tolist())) == 8
    assert sorted(set(sat.labels.tolist())) == list(range(8))
    with pytest.raises(TooManyRegions):
        farthest_point_regions(cube, 9)
    with pytest.raises(TooManyRegions):
        farthest_point_regions(cube, 0)


def test_fps_deterministic():
    m = M.satellite()
    a, b = farthest_point_regions(m, 8), farthest_point_regions(m, 8)
    assert np.array_equal(a.seeds, b.seeds) and np.array_equal(a.labels, b.labels)


# ---------------------------------------------------------------- error map and losses


def test_error_map_examples():
    lab = _labels()
    assert np.all(error_map(lab.coords, lab) == 0)
    single = LabelMaps(
        coords=np.zeros((2, 2, 3)),
        mask=np.array([[True, False], [False, False]]),
        regions=np.array([[0, -1], [-1, -1]]),
        depth=np.array([[1.0, 0], [0, 0]]),
    )
    pred = np.zeros((2, 2, 3))
    pred[0, 0] = [0.1, -0.2, 0.05]
    pred[1, 1] = [0.5, 0.5, 0.5]
    e = error_map(pred, single)
    assert np.isclose(e[0, 0], 0.35) and e[1, 1] == 0
    with pytest.raises(ShapeMismatch):
        error_map(np.zeros((3, 3, 3)), single)


def test_error_map_matches_loops():
    lab = _labels()
    rng = np.random.default_rng(1)
    pred = rng.random(lab.coords.shape)
    e = error_map(pred, lab)
    h, w = lab.shape
    for y in range(h):
        for x in range(w):
            ref = 0.0
            if lab.mask[y, x]:
                for c in range(3):
                    ref += abs(pred[y, x, c] - lab.coords[y, x, c])
            assert e[y, x] == pytest.approx(ref, abs=1e-12)
    assert e.min() >= 0 and np.all(e[~lab.mask] == 0)


def brute_losses(pred, lab, a, b, g, d):
    h, w = lab.shape
    n_fg = int(lab.mask.sum())
    lq = lo = le = lr = 0.0
    for y in range(h):
        for x in range(w):
            m = bool(lab.mask[y, x])
            p = min(max(pred.confidence[y, x], 1e-7), 1 - 1e-7)
            lo += -math.log(p) if m else -math.log(1 - p)
            true_e = sum(abs(pred.coords[y, x, c] - lab.coords[y, x, c]) for c in range(3)) if m else 0.0
            le += (pred.error[y, x] - true_e) ** 2
            if m:
                lq += sum(abs(pred.coords[y, x, c] - lab.coords[y, x, c]) for c in range(3))
                lr += -math.log(max(pred.regions[y, x, lab.regions[y, x]], 1e-7))
    out = {"coords": lq / n_fg, "mask": lo / (h * w), "error": min(le / (h * w), 1.0), "regions": lr / n_fg}
    out["total"] = a * out["coords"] + b * out["mask"] + g * out["error"] + d * out["regions"]
    return out


def test_losses_match_loops():
    lab = _labels(size=32)
    rng = np.random.default_rng(2)
    scores = rng.random(lab.shape + (8,))
    scores /= scores.sum(axis=-1, keepdims=True)
    pred = PredictionMaps(rng.random(lab.coords.shape), rng.random(lab.shape), rng.random(lab.shape), scores)
    got = losses(pred, lab, 1.0, 1.0, 1.0, 0.1)
    ref = brute_losses(pred, lab, 1.0, 1.0, 1.0, 0.1)
    for k in ref:
        assert got[k] == pytest.approx(ref[k], abs=1e-6)
    # weighted sum is exact for other weights too
    got = losses(pred, lab, 0.3, 2.0, 0.7, 0.5)
    assert got["total"] == 0.3 * got["coords"] + 2.0 * got["mask"] + 0.7 * got["error"] + 0.5 * got["regions"]


def test_losses_perfect_prediction_and_bound():
    lab = _labels()
    onehot = np.zeros(lab.shape + (8,))
    onehot[lab.mask, lab.regions[lab.mask]] = 1.0
    perfect = PredictionMaps(lab.coords, np.zeros(lab.shape), lab.mask.astype(float), onehot)
    out = losses(perfect, lab)
    assert out["coords"] == 0 and out["error"] == 0 and out["regions"] == 0
    assert out["mask"] < 1e-6
    # error prediction off by 10 (stored clamped to 1): true errors are 0, so MSE is 1 and the bound holds at exactly 1
    off = PredictionMaps(lab.coords, np.full(lab.shape, 10.0), lab.mask.astype(float))
    assert losses(off, lab)["error"] == 1.0


def test_loss_error_bound_on_raw_mse():
    lab = _labels()
    rng = np.random.default_rng(3)
    pred = PredictionMaps(rng.random(lab.coords.shape), np.zeros(lab.shape), lab.mask.astype(float))
    # coordinate errors up to 3 push the squared error of a zero error map above 1
    far = PredictionMaps(pred.coords + 3.0 * lab.mask[..., None], np.zeros(lab.shape), lab.mask.astype(float))
    assert losses(far, lab)["error"] == 1.0


# ---------------------------------------------------------------- corruption


def test_corrupt_noise_free():
    lab = _labels()
    pred = corrupt(lab, NoiseConfig(), seed=0)
    assert np.array_equal(pred.coords, lab.coords)
    assert np.all(pred.error == 0)
    assert np.array_equal(pred.confidence, lab.mask.astype(float))


def test_corrupt_error_mean_matches_half_normal():
    mesh = M.box((0.3, 0.3, 0.3))
    K = CameraIntrinsics(300.0, 300.0, 127.5, 127.5, 256, 256)
    lab = rasterize(mesh, Pose(exp_so3([0.3, 0.5, 0.0]), [0, 0, 0.8]), K)
    assert lab.mask.sum() >= 10_000
    sigma = 0.05
    pred = corrupt(lab, NoiseConfig(sigma_coord=sigma), seed=4)
    expected = 3 * sigma * math.sqrt(2 / math.pi)
    assert abs(pred.error[lab.mask].mean() / expected - 1) < 0.05


def test_corrupt_deterministic_and_seeded():
    lab = _labels()
    cfg = NoiseConfig(sigma_coord=0.02, n_blobs=2, error_mode="noisy", conf_soft=0.3, conf_flip=0.01, conf_blur=1.0)
    a, b, c = corrupt(lab, cfg, 9), corrupt(lab, cfg, 9), corrupt(lab, cfg, 10)
    for f in ("coords", "error", "confidence"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert a.coords.tobytes() != c.coords.tobytes()
    assert a.error.min() >= 0 and 0 <= a.confidence.min() and a.confidence.max() <= 1


def test_blobs_create_gross_errors():
    lab = _labels(size=64)
    pred = corrupt(lab, NoiseConfig(n_blobs=3, blob_radius=4), seed=5)
    assert (pred.error > 0.1).sum() > 10


def test_prediction_maps_clamp_and_rotate():
    rng = np.random.default_rng(0)
    p = PredictionMaps(rng.random((6, 6, 3)), rng.normal(size=(6, 6)) * 3, rng.normal(size=(6, 6)))
    assert p.error.min() >= 0 and p.error.max() <= 1
    assert p.confidence.min() >= 0 and p.confidence.max() <= 1
    twice = p.rot90(2).rot90(2)
    assert np.array_equal(twice.coords, p.coords) and np.array_equal(twice.error, p.error)
    with pytest.raises(ShapeMismatch):
        PredictionMaps(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 4)))
