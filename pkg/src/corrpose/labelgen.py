"""Label generation from an (approximate) triangle mesh.

Normalized coordinates map the model's axis-aligned bounding box affinely to
``[0, 1]^3``: ``q_norm = (q - bbox_min) / (bbox_max - bbox_min)``. External
networks producing prediction maps must use the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import NoiseConfig
from .errors import DegenerateBBox, EmptyRender, ShapeMismatch, TooManyRegions
from .geometry import CameraIntrinsics, Pose
from .mesh import TriMesh
from .render import rasterize_mesh

BACKGROUND = -1
PROB_CLAMP = 1e-7


@dataclass
class LabelMaps:
    coords: np.ndarray  # (h, w, 3) normalized, 0 off-mask
    mask: np.ndarray  # (h, w) bool
    regions: np.ndarray  # (h, w) int, BACKGROUND off-mask
    depth: np.ndarray  # (h, w) meters, 0 off-mask

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class PredictionMaps:
    """Per-pixel network outputs for one RoI.

    The error channel is clamped to ``[0, 1]`` and the confidence to
    ``[0, 1]`` on construction, so an error threshold of 1.0 never filters.
    """

    coords: np.ndarray  # (h, w, 3)
    error: np.ndarray  # (h, w)
    confidence: np.ndarray  # (h, w)
    regions: np.ndarray | None = None  # (h, w, n) scores

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.error = np.clip(np.asarray(self.error, dtype=np.float64), 0.0, 1.0)
        self.confidence = np.clip(np.asarray(self.confidence, dtype=np.float64), 0.0, 1.0)
        h, w = self.error.shape
        if self.coords.shape != (h, w, 3) or self.confidence.shape != (h, w):
            raise ShapeMismatch("prediction maps must share height and width")
        if self.regions is not None:
            self.regions = np.asarray(self.regions, dtype=np.float64)
            if self.regions.shape[:2] != (h, w):
                raise ShapeMismatch("region scores must share height and width")

    @property
    def shape(self) -> tuple[int, int]:
        return self.error.shape

    def rot90(self, k: int) -> "PredictionMaps":
        """Rotate every channel spatially by ``k`` quarter turns (counter-clockwise).
        Coordinate values are model coordinates and stay unchanged."""
        r = lambda a: None if a is None else np.ascontiguousarray(np.rot90(a, k, axes=(0, 1)))
        return PredictionMaps(r(self.coords), r(self.error), r(self.confidence), r(self.regions))


@dataclass(frozen=True)
class RegionPartition:
    seeds: np.ndarray  # (n,) vertex indices in selection order
    labels: np.ndarray  # (V,) region id per vertex
    seed_points: np.ndarray  # (n, 3)

    @property
    def n(self) -> int:
        return len(self.seeds)


# ---------------------------------------------------------------- coordinates


def _check_bbox(bbox) -> tuple[np.ndarray, np.ndarray]:
    bbox = np.asarray(bbox, dtype=float).reshape(2, 3)
    extent = bbox[1] - bbox[0]
    if np.any(extent < 1e-12):
        raise DegenerateBBox(f"bounding box extent {extent} is degenerate")
    return bbox[0], extent


def normalize_coords(points, bbox) -> np.ndarray:
    lo, extent = _check_bbox(bbox)
    return (np.asarray(points, dtype=float) - lo) / extent


def denormalize_coords(coords, bbox) -> np.ndarray:
    lo, extent = _check_bbox(bbox)
    return np.asarray(coords, dtype=float) * extent + lo


# ---------------------------------------------------------------- regions


def farthest_point_regions(mesh: TriMesh, n: int) -> RegionPartition:
    """Greedy farthest-point sampling of ``n`` seed vertices and nearest-seed
    assignment of every vertex.

    The first seed is the lowest-index vertex among those farthest from the
    vertex centroid. Ties in both selection and assignment go to the lower
    index.
    """
    v = mesh.vertices
    if n < 1 or n > len(v):
        raise TooManyRegions(f"cannot pick {n} regions from {len(v)} vertices")
    d_centroid = np.linalg.norm(v - v.mean(axis=0), axis=1)
    first = int(np.flatnonzero(d_centroid == d_centroid.max())[0])
    seeds = [first]
    min_d = np.linalg.norm(v - v[first], axis=1)
    min_d[first] = -1.0
    for _ in range(1, n):
        nxt = int(np.argmax(min_d))
        seeds.append(nxt)
        min_d = np.minimum(min_d, np.linalg.norm(v - v[nxt], axis=1))
        min_d[seeds] = -1.0
    seeds = np.array(seeds, dtype=np.int64)
    seed_points = v[seeds]
    labels = assign_regions(v, seed_points)
    return RegionPartition(seeds=seeds, labels=labels, seed_points=seed_points)


def assign_regions(points: np.ndarray, seed_points: np.ndarray) -> np.ndarray:
    """Index of the nearest seed for each point (first seed wins ties)."""
    d = np.linalg.norm(points[:, None, :] - seed_points[None, :, :], axis=-1)
    return np.argmin(d, axis=1)


# ---------------------------------------------------------------- rendering


def rasterize(
    mesh: TriMesh,
    pose: Pose,
    K: CameraIntrinsics,
    size: tuple[int, int] | None = None,
    partition: RegionPartition | None = None,
    bbox=None,
    vertex_attr: np.ndarray | None = None,
) -> LabelMaps:
    """Render ground-truth label maps.

    ``bbox`` is the normalization box (defaults to the mesh's own).
    ``vertex_attr`` replaces the interpolated model coordinates, which lets a
    caller render the surface of one mesh labeled with the coordinates of a
    vertex-corresponding approximate mesh. Region ids come from the nearest
    partition seed to each pixel's surface point.
    """
    buf = rasterize_mesh(mesh, pose, K, size, vertex_attr)
    mask = buf.mask
    if not mask.any():
        raise EmptyRender("object covers no pixel")
    bbox = mesh.bbox if bbox is None else bbox
    coords = np.zeros(mask.shape + (3,))
    # interpolation round-off can leave tiny excursions outside the box
    coords[mask] = np.clip(normalize_coords(buf.attr[mask], bbox), 0.0, 1.0)
    regions = np.full(mask.shape, BACKGROUND, dtype=np.int64)
    if partition is None:
        regions[mask] = 0
    else:
        regions[mask] = assign_regions(buf.attr[mask], partition.seed_points)
    return LabelMaps(coords=coords, mask=mask, regions=regions, depth=buf.depth)


# ---------------------------------------------------------------- errors and losses


def error_map(pred_coords: np.ndarray, target: LabelMaps) -> np.ndarray:
    """Per-pixel L1 coordinate error over the three channels, zero off-mask."""
    pred_coords = np.asarray(pred_coords, dtype=float)
    if pred_coords.shape != target.coords.shape:
        raise ShapeMismatch(f"{pred_coords.shape} vs {target.coords.shape}")
    return np.abs(pred_coords - target.coords).sum(axis=-1) * target.mask


def losses(
    pred: PredictionMaps,
    target: LabelMaps,
    alpha: float = 1.0,
    beta: float = 1.0,
    gamma: float = 1.0,
    delta: float = 0.1,
) -> dict[str, float]:
    """Training losses for one sample.

    * coords: L1 over mask pixels and channels, averaged over mask pixels
    * mask: binary cross entropy averaged over all pixels
    * error: ``min(mean squared error, 1)`` against the true error map
    * regions: cross entropy of the true-class score over mask pixels,
      averaged over mask pixels (scores are probabilities)
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} vs {target.shape}")
    m = target.mask
    n_fg = max(int(m.sum()), 1)

    l_coords = float(np.abs(pred.coords - target.coords)[m].sum() / n_fg)

    p = np.clip(pred.confidence, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = m.astype(float)
    l_mask = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))

    true_err = error_map(pred.coords, target)
    l_error = float(min(np.mean((pred.error - true_err) ** 2), 1.0))

    l_regions = 0.0
    if pred.regions is not None and m.any():
        n_cls = pred.regions.shape[-1]
        if target.regions[m].max() >= n_cls:
            raise ShapeMismatch("region id exceeds the number of score channels")
        true_score = np.take_along_axis(pred.regions[m], target.regions[m][:, None], axis=1)[:, 0]
        l_regions = float(-np.log(np.maximum(true_score, PROB_CLAMP)).sum() / n_fg)

    total = alpha * l_coords + beta * l_mask + gamma * l_error + delta * l_regions
    return {"coords": l_coords, "mask": l_mask, "error": l_error, "regions": l_regions, "total": total}


# ---------------------------------------------------------------- synthetic predictions


def corrupt(labels: LabelMaps, noise: NoiseConfig, seed: int) -> PredictionMaps:
    """Turn labels into network-like predictions, deterministically per seed."""
    rng = np.random.default_rng(seed)
    mask = labels.mask
    h, w = mask.shape

    coords = labels.coords.copy()
    if noise.sigma_coord > 0:
        coords[mask] += rng.normal(0.0, noise.sigma_coord, size=(int(mask.sum()), 3))

    fg = np.argwhere(mask)
    if noise.n_blobs > 0 and len(fg):
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(noise.n_blobs):
            cy, cx = fg[rng.integers(len(fg))]
            blob = mask & ((yy - cy) ** 2 + (xx - cx) ** 2 <= noise.blob_radius**2)
            coords[blob] = rng.uniform(0.0, 1.0, size=(int(blob.sum()), 3))

    err = error_map(coords, labels)
    if noise.error_mode == "noisy":
        err = err + mask * rng.normal(0.0, noise.sigma_error, size=(h, w))
        err = np.maximum(err, 0.0)

    conf = mask.astype(float)
    if noise.conf_blur > 0:
        conf = gaussian_filter(conf, noise.conf_blur)
    if noise.conf_soft > 0:
        u = rng.uniform(0.0, noise.conf_soft, size=(h, w))
        conf = np.abs(conf - u)
    if noise.conf_flip > 0:
        flip = rng.random((h, w)) < noise.conf_flip
        conf = np.where(flip, 1.0 - conf, conf)

    return PredictionMaps(coords=coords, error=err, confidence=conf)
