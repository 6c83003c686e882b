import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrpose.config import NoiseConfig, PipelineConfig, PnPConfig, RunConfig, ThresholdPolicy
from corrpose.errors import AllHypothesesFailed, NoHypotheses, SourceFailure
from corrpose.geometry import Pose
from corrpose.labelgen import PredictionMaps, rasterize
from corrpose.pipeline import (
    CorruptedOracleSource,
    Hypothesis,
    MapSource,
    estimate,
    generate,
    refine_all,
    refine_roi,
    rotation_ensemble,
    select,
)
from corrpose.refiner import ConfidenceMap
from corrpose.roi import RoI
from corrpose.synthetic import make_scene, random_pose

from conftest import BENCH_REFINER

SIZE = 128
NOISY = NoiseConfig(sigma_coord=0.02, n_blobs=2, conf_soft=0.3, conf_flip=0.01, conf_blur=1.0)


@pytest.fixture(scope="module")
def scene(sat):
    return make_scene(sat, np.random.default_rng(77))


def _source(sat, scene, noise=NOISY, seed=3):
    return CorruptedOracleSource(sat, scene.pose, scene.K, SIZE, noise, seed)


# ---------------------------------------------------------------- ensemble


def test_oracle_ensemble_is_equivariant(sat, scene):
    ens = rotation_ensemble(_source(sat, scene), scene.image, scene.roi)
    base = ens.per_rotation[0]
    for k in (1, 2, 3):
        m = ens.per_rotation[k]
        assert np.array_equal(m.confidence, base.confidence)
        # coordinates move spatially, their values are untouched
        assert np.array_equal(m.coords, base.coords)
    assert np.array_equal(ens.confidence, base.confidence)


def test_half_turn_is_involution(rng):
    maps = PredictionMaps(rng.random((9, 9, 3)), rng.random((9, 9)), rng.random((9, 9)), rng.random((9, 9, 4)))
    back = maps.rot90(2).rot90(2)
    for f in ("coords", "error", "confidence", "regions"):
        assert np.array_equal(getattr(back, f), getattr(maps, f))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_averaged_confidence_stays_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    src = MapSource({k: PredictionMaps(rng.random((6, 6, 3)), rng.random((6, 6)), rng.random((6, 6))) for k in range(4)})
    conf = rotation_ensemble(src, None, RoI((10.0, 10.0), 6.0)).confidence
    assert conf.min() >= 0 and conf.max() <= 1


def test_source_failures(rng):
    src = MapSource({0: PredictionMaps(rng.random((4, 4, 3)), rng.random((4, 4)), rng.random((4, 4)))})
    with pytest.raises(SourceFailure):
        rotation_ensemble(src, None, RoI((5.0, 5.0), 4.0))

    class Broken:
        def predict(self, image, roi, k):
            raise RuntimeError("network down")

    with pytest.raises(SourceFailure):
        rotation_ensemble(Broken(), None, RoI((5.0, 5.0), 4.0), rotations=(0,))


# ---------------------------------------------------------------- generation and selection


def test_generate_counts(sat, scene):
    ens = rotation_ensemble(_source(sat, scene), scene.image, scene.roi)
    hyps = generate(ens.per_rotation, scene.roi, scene.K, sat.bbox, PnPConfig())
    assert len(hyps) == 28  # 7 thresholds x 4 rotations, failures included
    assert sorted({h.rotation for h in hyps}) == [0, 1, 2, 3]
    assert all((h.initial is not None) == (h.status == "unrefined") for h in hyps)
    single = generate(
        {0: ens.per_rotation[0]}, scene.roi, scene.K, sat.bbox, PnPConfig(policy=ThresholdPolicy(mode="fixed"))
    )
    assert len(single) == 1 and single[0].eps == 1.0


def test_generate_all_background(sat, scene):
    empty = PredictionMaps(np.zeros((SIZE, SIZE, 3)), np.zeros((SIZE, SIZE)), np.zeros((SIZE, SIZE)))
    with pytest.raises(NoHypotheses):
        generate({0: empty}, scene.roi, scene.K, sat.bbox)


def _ok(eps, rot, prob):
    return Hypothesis(eps=eps, rotation=rot, refined=Pose.identity(), probability=prob, status="ok")


def test_select_examples():
    only = _ok(0.5, 0, 0.3)
    assert select([only]) is only
    a, b, c = _ok(0.1, 2, 0.7), _ok(0.1, 1, 0.7), _ok(0.05, 3, 0.6)
    assert select([a, b, c]) is b
    assert select([c, _ok(0.3, 0, 0.7), _ok(0.2, 0, 0.7)]).eps == 0.2
    with pytest.raises(AllHypothesesFailed):
        select([Hypothesis(eps=1.0, rotation=0, status="refine_failed")])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.sampled_from([1.0, 0.5, 0.1, 0.025]),
            st.integers(0, 3),
            st.floats(0, 1),
            st.sampled_from(["ok", "pnp_failed", "refine_failed", "unrefined"]),
        ),
        min_size=1,
        max_size=12,
    )
)
def test_select_returns_only_ok(items):
    hyps = [
        _ok(e, r, p) if s == "ok" else Hypothesis(eps=e, rotation=r, status=s) for e, r, p, s in items
    ]
    if not any(h.status == "ok" for h in hyps):
        with pytest.raises(AllHypothesesFailed):
            select(hyps)
        return
    best = select(hyps)
    assert best.status == "ok"
    assert best.probability == max(h.probability for h in hyps if h.status == "ok")
    # order of the input list does not matter
    assert select(hyps[::-1]).order == best.order


def test_refine_all_statuses_and_threads(sat, sat_svm, scene):
    ens = rotation_ensemble(_source(sat, scene), scene.image, scene.roi, rotations=(0,))
    conf = ConfidenceMap(ens.confidence, scene.roi)
    serial = generate(ens.per_rotation, scene.roi, scene.K, sat.bbox)
    threaded = generate(ens.per_rotation, scene.roi, scene.K, sat.bbox)
    refine_all(serial, scene.image, scene.K, sat_svm, BENCH_REFINER, conf, jobs=1)
    refine_all(threaded, scene.image, scene.K, sat_svm, BENCH_REFINER, conf, jobs=3)
    for a, b in zip(serial, threaded):
        assert (a.probability is not None) == (a.status == "ok")
        assert a.status == b.status and a.probability == b.probability
        if a.refined is not None:
            assert a.refined.rotation.tobytes() == b.refined.rotation.tobytes()


# ---------------------------------------------------------------- RoI refinement


def test_refine_roi_gate(sat, scene, rng):
    maps = _source(sat, scene, NoiseConfig()).predict(scene.image, scene.roi, 0)
    new = refine_roi(maps, sat, scene.pose, scene.K, scene.roi)
    assert new.source == "refined"
    assert new == RoI.from_mask(scene.mask, 0.1, source="refined")
    noisy = PredictionMaps(maps.coords, rng.random(maps.error.shape), maps.confidence)
    assert refine_roi(noisy, sat, scene.pose, scene.K, scene.roi) is scene.roi


def test_refined_roi_contains_mask(sat, camera, rng):
    for _ in range(30):
        pose = random_pose(rng, sat, camera)
        mask = rasterize(sat, pose, camera).mask
        roi = RoI.from_mask(mask, 0.3)
        maps = CorruptedOracleSource(sat, pose, camera, 64).predict(None, roi, 0)
        new = refine_roi(maps, sat, pose, camera, roi)
        rows, cols = np.nonzero(mask)
        assert new.left <= cols.min() - 0.5 and cols.max() + 0.5 <= new.left + new.side
        assert new.top <= rows.min() - 0.5 and rows.max() + 0.5 <= new.top + new.side


# ---------------------------------------------------------------- orchestration


def _run(sat, sat_svm, scene, cfg):
    src = _source(sat, scene)
    est = estimate(scene.image, scene.K, scene.roi, src, sat, sat_svm, cfg)
    return json.dumps(est.record(), sort_keys=True)


def test_estimate_is_deterministic(sat, sat_svm, scene):
    cfg = RunConfig(refiner=BENCH_REFINER, pipeline=PipelineConfig(map_size=SIZE, roi_refine=True))
    a, b = _run(sat, sat_svm, scene, cfg), _run(sat, sat_svm, scene, cfg)
    assert a == b
    rec = json.loads(a)
    assert rec["refined"] and len(rec["hypotheses"]) == 7


def test_estimate_updates_roi_on_consistent_maps(sat, scene):
    cfg = RunConfig(pipeline=PipelineConfig(map_size=SIZE, refine=False, roi_refine=True))
    est = estimate(scene.image, scene.K, scene.roi, _source(sat, scene, NoiseConfig()), sat, None, cfg)
    assert est.roi.source == "refined"


def test_estimate_without_refinement(sat, scene):
    cfg = RunConfig(pipeline=PipelineConfig(map_size=SIZE, refine=False))
    rec = json.loads(_run(sat, None, scene, cfg))
    assert rec["refined"] is False and rec["probability"] is None
    assert all(h["status"] in ("unrefined", "pnp_failed") for h in rec["hypotheses"])
