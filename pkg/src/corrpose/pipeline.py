"""Inference: correspondence maps -> pose hypotheses -> refined, selected pose."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np

from .config import NoiseConfig, PnPConfig, RefinerConfig, RunConfig
from .errors import AllHypothesesFailed, CorrposeError, NoHypotheses, SourceFailure
from .geometry import CameraIntrinsics, Pose
from .labelgen import LabelMaps, PredictionMaps, corrupt, rasterize
from .mesh import TriMesh
from .pnp import PnPResult, adaptive_eps, extract, solve
from .refiner import ConfidenceMap, SparseViewpointModel, refine
from .render import rasterize_mesh
from .roi import RoI

QUARTER_TURNS = (0, 1, 2, 3)

Status = Literal["ok", "unrefined", "pnp_failed", "refine_failed"]


@dataclass
class Hypothesis:
    """One (eps, rotation) candidate. ``rotation`` counts quarter turns.

    ``probability`` is set exactly when ``status == "ok"``; ``unrefined``
    hypotheses carry only their PnP pose.
    """

    eps: float
    rotation: int
    initial: PnPResult | None = None
    refined: Pose | None = None
    probability: float | None = None
    status: Status = "pnp_failed"
    message: str = ""

    @property
    def pose(self) -> Pose | None:
        return self.refined if self.refined is not None else (self.initial.pose if self.initial else None)

    @property
    def order(self) -> tuple[float, int]:
        return (self.eps, self.rotation)

    def row(self) -> dict:
        out = {"eps": self.eps, "rotation": self.rotation, "status": self.status}
        if self.initial is not None:
            out["n_correspondences"] = self.initial.n_correspondences
            out["n_inliers"] = int(len(self.initial.inliers))
            out["reprojection_error"] = self.initial.reprojection_error
        if self.probability is not None:
            out["probability"] = self.probability
        if self.message:
            out["message"] = self.message
        return out


# ---------------------------------------------------------------- sources


class CorrespondenceSource(Protocol):
    def predict(self, image: np.ndarray, roi: RoI, k: int) -> PredictionMaps:
        """Maps for the RoI crop rotated by ``k`` quarter turns (``np.rot90``
        convention), expressed in the rotated crop frame."""
        ...


class MapSource:
    """Serves precomputed maps (e.g. loaded from tensor files) per rotation."""

    def __init__(self, maps: dict[int, PredictionMaps]):
        self.maps = dict(maps)

    def predict(self, image, roi, k):
        if k not in self.maps:
            raise SourceFailure(f"no maps for rotation {k}")
        return self.maps[k]


class CorruptedOracleSource:
    """Ground-truth labels rendered on the RoI crop, then corrupted.

    Corruption happens once in the unrotated frame and the result is rotated,
    so the source is rotation-equivariant by construction.
    """

    def __init__(
        self,
        mesh: TriMesh,
        pose: Pose,
        K: CameraIntrinsics,
        size: int,
        noise: NoiseConfig = NoiseConfig(),
        seed: int = 0,
        bbox=None,
        label_mesh: TriMesh | None = None,
    ):
        self.mesh, self.pose, self.K, self.size = mesh, pose, K, size
        self.noise, self.seed = noise, seed
        self.bbox = mesh.bbox if bbox is None else bbox
        # optional approximate mesh whose vertices label the true surface
        self.label_mesh = label_mesh
        self._cache: dict[tuple, PredictionMaps] = {}

    def labels(self, roi: RoI) -> LabelMaps:
        Kc = roi.crop_intrinsics(self.K, self.size)
        attr = None if self.label_mesh is None else self.label_mesh.vertices
        try:
            return rasterize(self.mesh, self.pose, Kc, bbox=self.bbox, vertex_attr=attr)
        except CorrposeError as exc:
            raise SourceFailure(str(exc)) from exc

    def predict(self, image, roi, k):
        key = (roi.center, roi.side)
        if key not in self._cache:
            self._cache[key] = corrupt(self.labels(roi), self.noise, self.seed)
        return self._cache[key].rot90(k)


@dataclass
class EnsembleMaps:
    per_rotation: dict[int, PredictionMaps]  # de-rotated to the unrotated crop frame
    confidence: np.ndarray  # mean de-rotated confidence


def rotation_ensemble(
    source: CorrespondenceSource, image: np.ndarray, roi: RoI, rotations=QUARTER_TURNS
) -> EnsembleMaps:
    per = {}
    for k in rotations:
        try:
            maps = source.predict(image, roi, k)
        except SourceFailure:
            raise
        except Exception as exc:
            raise SourceFailure(f"source failed at rotation {k}: {exc}") from exc
        per[k] = maps.rot90(-k)
    conf = np.mean([m.confidence for m in per.values()], axis=0)
    return EnsembleMaps(per_rotation=per, confidence=conf)


# ---------------------------------------------------------------- hypotheses


def thresholds_for(maps: PredictionMaps, cfg: PnPConfig) -> tuple[float, ...]:
    if cfg.policy.mode == "adaptive":
        return (adaptive_eps(maps, cfg.policy, cfg.conf_thresh),)
    return cfg.policy.thresholds()


def generate(
    maps: dict[int, PredictionMaps],
    roi: RoI,
    K: CameraIntrinsics,
    bbox,
    cfg: PnPConfig = PnPConfig(),
    seed: int = 0,
) -> list[Hypothesis]:
    """One PnP hypothesis per rotation and threshold. Failures are kept with
    status ``pnp_failed``."""
    out = []
    for k in sorted(maps):
        # thresholds that keep the same pixels give the same (deterministic) solve
        solved: dict[bytes, PnPResult | CorrposeError] = {}
        for eps in thresholds_for(maps[k], cfg):
            h = Hypothesis(eps=float(eps), rotation=k)
            corr = extract(maps[k], roi, bbox, cfg.conf_thresh, eps, cfg.stride)
            key = corr.index.tobytes()
            if key not in solved:
                try:
                    solved[key] = solve(corr, K, cfg.ransac, seed)
                except CorrposeError as exc:
                    solved[key] = exc
            res = solved[key]
            if isinstance(res, CorrposeError):
                h.message = f"{type(res).__name__}: {res}"
            else:
                h.initial, h.status = res, "unrefined"
            out.append(h)
    if not any(h.initial is not None for h in out):
        raise NoHypotheses("PnP failed for every threshold and rotation")
    return out


def _pose_key(pose: Pose) -> bytes:
    return pose.rotation.tobytes() + pose.translation.tobytes()


def refine_all(
    hyps: list[Hypothesis],
    image: np.ndarray,
    K: CameraIntrinsics,
    svm: SparseViewpointModel,
    cfg: RefinerConfig,
    confidence: ConfidenceMap | None,
    jobs: int = 1,
) -> None:
    """Refine every PnP hypothesis in place. Hypotheses with bit-identical
    initial poses share one refinement."""
    todo: dict[bytes, Pose] = {}
    for h in hyps:
        if h.initial is not None:
            todo.setdefault(_pose_key(h.initial.pose), h.initial.pose)

    def run(pose):
        try:
            return refine(pose, image, K, svm, cfg, confidence)
        except CorrposeError as exc:
            return exc

    keys = list(todo)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = dict(zip(keys, ex.map(run, [todo[k] for k in keys])))
    else:
        results = {k: run(todo[k]) for k in keys}

    for h in hyps:
        if h.initial is None:
            continue
        res = results[_pose_key(h.initial.pose)]
        if isinstance(res, Exception):
            h.status = "refine_failed"
            h.message = f"{type(res).__name__}: {res}"
        else:
            h.refined, h.probability, h.status = res.pose, res.probability, "ok"


def select(hyps: list[Hypothesis]) -> Hypothesis:
    """Most probable refined hypothesis; ties go to lower eps, then lower rotation."""
    ok = [h for h in hyps if h.status == "ok"]
    if not ok:
        raise AllHypothesesFailed("no hypothesis survived refinement")
    return min(ok, key=lambda h: (-h.probability, h.eps, h.rotation))


def select_unrefined(hyps: list[Hypothesis]) -> Hypothesis:
    """Without refinement: largest inlier fraction, same tie-break order."""
    ok = [h for h in hyps if h.initial is not None]
    if not ok:
        raise NoHypotheses("no PnP hypothesis")
    frac = lambda h: len(h.initial.inliers) / h.initial.n_correspondences
    return min(ok, key=lambda h: (-frac(h), h.eps, h.rotation))


def refine_roi(
    maps: PredictionMaps,
    mesh: TriMesh,
    pose: Pose,
    K: CameraIntrinsics,
    roi: RoI,
    std_thresh: float = 0.1,
    conf_thresh: float = 0.5,
    pad: float = 0.1,
) -> RoI:
    """Replace the RoI by the padded box of the rendered mask when the error
    map over the predicted foreground is consistent enough."""
    fg = maps.confidence > conf_thresh
    if not fg.any() or float(np.std(maps.error[fg])) >= std_thresh:
        return roi
    try:
        mask = rasterize_mesh(mesh, pose, K).mask
    except CorrposeError:
        return roi
    if not mask.any():
        return roi
    new = RoI.from_mask(mask, pad, source="refined")
    return new if new.intersects(K.width, K.height) else roi


# ---------------------------------------------------------------- orchestration


@dataclass
class Estimate:
    pose: Pose
    chosen: Hypothesis
    hypotheses: list[Hypothesis]
    roi: RoI
    refined: bool
    extra: dict = field(default_factory=dict)

    def record(self) -> dict:
        q = self.pose.quat().as_array()
        return {
            "quaternion": [float(v) for v in q],
            "translation": [float(v) for v in self.pose.translation],
            "eps": self.chosen.eps,
            "rotation": self.chosen.rotation,
            "probability": self.chosen.probability,
            "refined": self.refined,
            "reprojection_error": self.chosen.initial.reprojection_error,
            "roi": {"center": list(self.roi.center), "side": self.roi.side, "source": self.roi.source},
            "hypotheses": [h.row() for h in self.hypotheses],
        }


def estimate(
    image: np.ndarray,
    K: CameraIntrinsics,
    roi: RoI,
    source: CorrespondenceSource,
    mesh: TriMesh,
    svm: SparseViewpointModel | None,
    cfg: RunConfig = RunConfig(),
    bbox=None,
) -> Estimate:
    """Full inference for one image and one RoI."""
    bbox = mesh.bbox if bbox is None else bbox
    pcfg = cfg.pipeline
    rotations = QUARTER_TURNS if pcfg.ensemble else (0,)
    ens = rotation_ensemble(source, image, roi, rotations)

    if pcfg.roi_refine:
        hyps = generate(ens.per_rotation, roi, K, bbox, cfg.pnp, cfg.seeds.pnp)
        first = select_unrefined(hyps)
        new_roi = refine_roi(ens.per_rotation[0], mesh, first.initial.pose, K, roi, pcfg.std_thresh, cfg.pnp.conf_thresh)
        if new_roi != roi:
            roi = new_roi
            ens = rotation_ensemble(source, image, roi, rotations)

    hyps = generate(ens.per_rotation, roi, K, bbox, cfg.pnp, cfg.seeds.pnp)
    if not pcfg.refine or svm is None:
        best = select_unrefined(hyps)
        return Estimate(pose=best.initial.pose, chosen=best, hypotheses=hyps, roi=roi, refined=False)

    confidence = ConfidenceMap(ens.confidence, roi)
    refine_all(hyps, image, K, svm, cfg.refiner, confidence, pcfg.jobs)
    best = select(hyps)
    return Estimate(pose=best.refined, chosen=best, hypotheses=hyps, roi=roi, refined=True)
