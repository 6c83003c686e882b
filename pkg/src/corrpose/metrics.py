"""Pose error metrics with calibration zeroing, ADD, and batch aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Literal

import numpy as np

from .errors import EmptyInput, ZeroGtTranslation
from .geometry import Pose, quat_of
from .mesh import TriMesh

ZERO_T = 0.002173
ZERO_R = float(np.deg2rad(0.169))

Zeroing = Literal["off", "independent", "conjunctive"]


@dataclass(frozen=True)
class PoseError:
    e_t: float
    e_R: float

    @property
    def e_pose(self) -> float:
        return self.e_t + self.e_R


def quaternion_angle(a, b) -> float:
    """``2 arccos |<a, b>|`` for unit quaternions; either sign gives the same angle."""
    dot = min(abs(float(np.dot(np.asarray(a, dtype=float), np.asarray(b, dtype=float)))), 1.0)
    return 2.0 * float(np.arccos(dot))


def rotation_error(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Angle between two rotations via unit quaternions, in [0, pi]."""
    return quaternion_angle(quat_of(R_est).as_array(), quat_of(R_gt).as_array())


def pose_error(est: Pose, gt: Pose, zeroing: Zeroing | bool = "independent") -> PoseError:
    """Normalized translation error and rotation angle.

    ``zeroing`` sets errors below the calibration accuracy to zero, either per
    component (``independent``) or only when both are below (``conjunctive``).
    ``True``/``False`` mean ``independent``/``off``.
    """
    if zeroing is True:
        zeroing = "independent"
    elif zeroing is False:
        zeroing = "off"
    t_norm = float(np.linalg.norm(gt.translation))
    if t_norm <= 0.0:
        raise ZeroGtTranslation("ground-truth translation has zero norm")
    e_t = float(np.linalg.norm(est.translation - gt.translation)) / t_norm
    e_R = rotation_error(est.rotation, gt.rotation)
    small_t, small_R = e_t < ZERO_T, e_R < ZERO_R
    if zeroing == "independent":
        e_t = 0.0 if small_t else e_t
        e_R = 0.0 if small_R else e_R
    elif zeroing == "conjunctive" and small_t and small_R:
        e_t, e_R = 0.0, 0.0
    elif zeroing not in ("off", "conjunctive"):
        raise ValueError(f"unknown zeroing mode {zeroing!r}")
    return PoseError(e_t=e_t, e_R=e_R)


@dataclass(frozen=True)
class AddResult:
    distance: float  # meters
    passed: bool


def add_metric(est: Pose, gt: Pose, mesh: TriMesh, thresh_frac: float = 0.1) -> AddResult:
    """Mean distance between model vertices under both poses."""
    if thresh_frac <= 0:
        raise ValueError("thresh_frac must be positive")
    v = mesh.vertices
    diff = v @ (est.rotation - gt.rotation).T + (est.translation - gt.translation)
    dist = float(np.linalg.norm(diff, axis=1).mean())
    return AddResult(distance=dist, passed=dist < thresh_frac * mesh.diameter)


# ---------------------------------------------------------------- aggregation


@dataclass
class EvalRecord:
    """One evaluated image. ``add`` is the ADD distance over the diameter."""

    image: str
    split: str
    e_t: float
    e_R: float
    add: float | None = None

    @property
    def e_pose(self) -> float:
        return self.e_t + self.e_R


DEFAULT_ADD_THRESHOLDS = tuple(np.round(np.linspace(0.0, 0.5, 51), 4))


def add_curve(fractions: np.ndarray, thresholds: Iterable[float]) -> list[tuple[float, float]]:
    """Fraction of samples whose ADD / diameter lies within each threshold.

    Inclusive, so the curve reaches 1.0 at the largest observed value. The
    single-threshold pass test of ``add_metric`` stays strict.
    """
    fractions = np.asarray(fractions, dtype=float)
    out = []
    for t in thresholds:
        out.append((float(t), float(np.mean(fractions <= t)) if len(fractions) else 0.0))
    return out


def aggregate(records: list[EvalRecord], add_thresholds=DEFAULT_ADD_THRESHOLDS) -> dict:
    """Per-split mean errors and a cumulative ADD curve per split.

    The special split ``all`` covers every record.
    """
    if not records:
        raise EmptyInput("no records to aggregate")
    splits: dict[str, list[EvalRecord]] = {"all": list(records)}
    for r in records:
        if r.split != "all":
            splits.setdefault(r.split, []).append(r)
    report: dict = {"splits": {}}
    for name in sorted(splits):
        rs = splits[name]
        e_t = np.array([r.e_t for r in rs])
        e_R = np.array([r.e_R for r in rs])
        entry = {
            "count": len(rs),
            "mean_e_t": float(e_t.mean()),
            "mean_e_R": float(e_R.mean()),
            "mean_e_pose": float((e_t + e_R).mean()),
            "median_e_pose": float(np.median(e_t + e_R)),
        }
        adds = np.array([r.add for r in rs if r.add is not None])
        if len(adds):
            entry["add_curve"] = add_curve(adds, add_thresholds)
            entry["add_0.1d"] = float(np.mean(adds < 0.1))
        report["splits"][name] = entry
    return report


def record_dict(r: EvalRecord) -> dict:
    d = asdict(r)
    d["e_pose"] = r.e_pose
    return d
