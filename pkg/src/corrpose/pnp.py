"""Correspondence extraction from prediction maps and robust PnP."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .config import PnPConfig, RansacConfig, ThresholdPolicy
from .errors import NoConsensus, TooFewCorrespondences
from .geometry import CameraIntrinsics, Pose, orthonormalize
from .labelgen import PredictionMaps, denormalize_coords
from .roi import RoI

MIN_POINTS = 4


@dataclass
class Correspondences:
    """Batched 2D-3D pairs. ``index`` holds the flat map index of each pair."""

    pixels: np.ndarray  # (N, 2) full-image pixels
    points: np.ndarray  # (N, 3) model frame, meters
    index: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.pixels)

    def subset(self, idx) -> "Correspondences":
        return Correspondences(self.pixels[idx], self.points[idx], self.index[idx])


@dataclass
class PnPResult:
    pose: Pose
    inliers: np.ndarray  # indices into the input correspondences
    reprojection_error: float  # mean over inliers, pixels
    n_correspondences: int


def keep_mask(maps: PredictionMaps, conf_thresh: float, eps: float) -> np.ndarray:
    """Pixels that pass both the confidence and the error gate (no stride)."""
    return (maps.confidence > conf_thresh) & (maps.error <= eps)


def extract(
    maps: PredictionMaps,
    roi: RoI,
    bbox,
    conf_thresh: float = 0.5,
    eps: float = 1.0,
    stride: int = 2,
) -> Correspondences:
    """Select confident, low-error pixels on a ``stride`` grid.

    The error gate is inclusive (``error <= eps``) so that ``eps = 1.0``
    keeps every confident pixel of a clamped error map.
    """
    if not (0.0 < eps <= 1.0):
        raise ValueError("eps must lie in (0, 1]")
    if not (0.0 < conf_thresh < 1.0):
        raise ValueError("conf_thresh must lie in (0, 1)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = maps.shape
    keep = keep_mask(maps, conf_thresh, eps)
    grid = np.zeros((h, w), dtype=bool)
    grid[::stride, ::stride] = True
    rows, cols = np.nonzero(keep & grid)
    size = h
    crop_px = np.stack([cols, rows], axis=-1).astype(float)
    pixels = roi.to_image(crop_px, size)
    points = denormalize_coords(maps.coords[rows, cols], bbox)
    return Correspondences(pixels=pixels, points=points, index=rows * w + cols)


def adaptive_eps(maps: PredictionMaps, policy: ThresholdPolicy, conf_thresh: float = 0.5) -> float:
    """Smallest grid threshold that still leaves enough correspondences.

    "Enough" means at least ``max(min_count, rho * n_confident)`` surviving
    pixels, counted before stride subsampling. Falls back to 1.0.
    """
    confident = maps.confidence > conf_thresh
    need = max(policy.min_count, policy.rho * int(confident.sum()))
    err = maps.error[confident]
    for eps in sorted(policy.grid):
        if int(np.count_nonzero(err <= eps)) >= need:
            return float(eps)
    return 1.0


# ---------------------------------------------------------------- RANSAC


def _rvec_pose(rvec, tvec) -> Pose:
    R, _ = cv2.Rodrigues(np.asarray(rvec, dtype=np.float64))
    return Pose(orthonormalize(R), np.asarray(tvec, dtype=float).reshape(3))


def _reproj_sq(R: np.ndarray, t: np.ndarray, K: CameraIntrinsics, pts: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Squared reprojection distance per point for one or many poses (R: (..., 3, 3))."""
    cam = pts @ np.swapaxes(R, -1, -2) + t[..., None, :]
    z = cam[..., 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    du = K.fx * cam[..., 0] / zs + (K.cx - px[:, 0])
    dv = K.fy * cam[..., 1] / zs + (K.cy - px[:, 1])
    return np.where(ok, du * du + dv * dv, np.inf)


def _reproj(R, t, K, pts, px) -> np.ndarray:
    return np.sqrt(_reproj_sq(R, t, K, pts, px))


def _p3p(pts: np.ndarray, px: np.ndarray, Kmat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    try:
        n, rvecs, tvecs = cv2.solveP3P(
            pts[:3].reshape(3, 1, 3), px[:3].reshape(3, 1, 2), Kmat, None, flags=cv2.SOLVEPNP_AP3P
        )
    except cv2.error:
        return []
    out = []
    for r, t in zip(rvecs[:n], tvecs[:n]):
        R, _ = cv2.Rodrigues(r)
        if np.all(np.isfinite(R)) and np.all(np.isfinite(t)):
            out.append((R, t.reshape(3)))
    return out


def solve(
    corr: Correspondences,
    K: CameraIntrinsics,
    ransac: RansacConfig = RansacConfig(),
    seed: int = 0,
) -> PnPResult:
    """RANSAC over minimal 3+1 point samples, then EPnP refit and LM polish.

    Hypotheses are scored on a fixed random subset of at most
    ``ransac.score_points`` correspondences; the final inlier set uses all.
    """
    n = len(corr)
    if n < MIN_POINTS:
        raise TooFewCorrespondences(f"{n} correspondences, need {MIN_POINTS}")
    pts = np.ascontiguousarray(corr.points, dtype=np.float64)
    px = np.ascontiguousarray(corr.pixels, dtype=np.float64)
    Kmat = K.matrix

    rng = np.random.default_rng(seed)
    samples = [rng.choice(n, size=4, replace=False) for _ in range(ransac.iters)]

    score = np.sort(rng.choice(n, size=ransac.score_points, replace=False)) if n > ransac.score_points else np.arange(n)

    Rs, ts = [], []
    for s in samples:
        sols = _p3p(pts[s], px[s], Kmat)
        if not sols:
            continue
        # the fourth point picks among the up to four P3P solutions
        errs = _reproj_sq(np.array([R for R, _ in sols]), np.array([t for _, t in sols]), K, pts[s[3:]], px[s[3:]])
        R, t = sols[int(np.argmin(errs[:, 0]))]
        Rs.append(R)
        ts.append(t)
    if not Rs:
        raise NoConsensus("no valid minimal solution")

    Rs, ts = np.array(Rs), np.array(ts)
    counts = np.zeros(len(Rs), dtype=np.int64)
    m = len(score)
    chunk = max(1, 200_000 // m)
    thr = ransac.inlier_px**2
    for a in range(0, len(Rs), chunk):
        d = _reproj_sq(Rs[a : a + chunk], ts[a : a + chunk], K, pts[score], px[score])
        counts[a : a + chunk] = (d < thr).sum(axis=1)
    min_score = ransac.min_inliers * m / n
    best = int(np.argmax(counts))
    if counts[best] < min_score:
        raise NoConsensus(f"best sample has {counts[best]} of {m} scored inliers, need {ransac.min_inliers} of {n}")

    R, t = Rs[best], ts[best]
    inl = np.flatnonzero(_reproj(R, t, K, pts, px) < ransac.inlier_px)
    rvec, _ = cv2.Rodrigues(R)
    tvec = t.reshape(3, 1).copy()
    if len(inl) >= 6:
        ok, r2, t2 = cv2.solvePnP(pts[inl], px[inl], Kmat, None, flags=cv2.SOLVEPNP_EPNP)
        if ok and np.all(np.isfinite(r2)) and np.all(np.isfinite(t2)):
            R2, _ = cv2.Rodrigues(r2)
            if _reproj(R2, t2.reshape(3), K, pts[inl], px[inl]).mean() < _reproj(R, t, K, pts[inl], px[inl]).mean():
                rvec, tvec = r2, t2
    if ransac.lm_iters > 0:
        crit = (cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, ransac.lm_iters, 1e-12)
        rvec, tvec = cv2.solvePnPRefineLM(pts[inl], px[inl], Kmat, None, rvec.copy(), tvec.copy(), crit)

    pose = _rvec_pose(rvec, tvec)
    d = _reproj(pose.rotation, pose.translation, K, pts, px)
    inliers = np.flatnonzero(d < ransac.inlier_px)
    if len(inliers) < ransac.min_inliers:
        raise NoConsensus("refit lost consensus")
    return PnPResult(
        pose=pose,
        inliers=inliers,
        reprojection_error=float(d[inliers].mean()),
        n_correspondences=n,
    )


def estimate_from_maps(
    maps: PredictionMaps,
    roi: RoI,
    K: CameraIntrinsics,
    bbox,
    eps: float,
    cfg: PnPConfig = PnPConfig(),
    seed: int = 0,
) -> PnPResult:
    corr = extract(maps, roi, bbox, cfg.conf_thresh, eps, cfg.stride)
    return solve(corr, K, cfg.ransac, seed)
