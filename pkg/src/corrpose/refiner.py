"""Region-based pose refinement on correspondence lines.

Each line probes the image along the projected contour normal of one model
point. Pixel colors give foreground/background posteriors through color
histograms, which are averaged with a learned confidence map. The contour
location along every line gets a discrete distribution, and the pose is
pulled toward the most probable locations with regularized Newton steps.

Line units: a *step* is one pixel along the dominant axis of the normal
(image distance ``1 / nbar``), a *segment* is ``s`` steps. Contour
distances ``d`` and segment centers ``r`` are in segments; ``r < 0`` is
inside the object.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import cv2
import numpy as np
from scipy.special import logsumexp

from .config import RefinerConfig
from .errors import DivergedPose, EmptyRender, NonPositiveDepth, NoValidLines
from .geometry import CameraIntrinsics, Pose, exp_so3, perturb, right_jacobian_so3
from .mesh import TriMesh, icosphere_directions
from .render import rasterize_mesh
from .roi import RoI

LOG_FLOOR = 1e-300


# ---------------------------------------------------------------- sparse viewpoint model


@dataclass(frozen=True)
class SparseViewpointModel:
    """Contour geometry precomputed from ``n_views`` directions.

    ``directions[k]`` points from the object center toward the camera of view
    ``k`` (model frame). ``points`` and ``normals`` are model-frame arrays of
    shape (n_views, n_points, 3); normals lie in each view's image plane and
    point away from the silhouette. ``fg_dist``/``bg_dist`` (meters, at the
    point's depth) measure how far the silhouette stays continuously
    foreground inward and background outward along the normal.
    """

    directions: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    center: np.ndarray
    fg_dist: np.ndarray
    bg_dist: np.ndarray
    edge_faces: np.ndarray  # (n_views, n_points, 2) faces adjacent to each point's edge, -1 if open
    face_normals: np.ndarray
    face_centers: np.ndarray
    corners: np.ndarray  # (F, 3, 3) triangle corners for occlusion tests

    @property
    def n_views(self) -> int:
        return len(self.directions)

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def nearest_view(self, pose: Pose) -> int:
        cam = -pose.rotation.T @ pose.translation - self.center
        norm = np.linalg.norm(cam)
        if norm < 1e-12:
            return 0
        return int(np.argmax(self.directions @ (cam / norm)))

    def on_silhouette(self, view: int, pose: Pose) -> np.ndarray:
        """Whether each contour point's mesh edge separates a front- and a
        back-facing face as seen from the camera of ``pose``."""
        cam = -pose.rotation.T @ pose.translation
        facing = np.einsum("ij,ij->i", self.face_normals, cam - self.face_centers) > 0
        f = self.edge_faces[view]
        return (f[:, 1] < 0) | (facing[f[:, 0]] != facing[np.maximum(f[:, 1], 0)])

    def unoccluded(self, points: np.ndarray, pose: Pose, chunk: int = 200_000) -> np.ndarray:
        """Whether the segment from the camera center to each model point
        misses every triangle (hits at the point itself do not count)."""
        origin = -pose.rotation.T @ pose.translation
        D = points - origin
        v0 = self.corners[:, 0]
        e1 = self.corners[:, 1] - v0
        e2 = self.corners[:, 2] - v0
        free = np.ones(len(points), dtype=bool)
        step = max(1, chunk // len(v0))
        for a in range(0, len(points), step):
            d = D[a : a + step, None, :]
            pvec = np.cross(d, e2[None])
            det = np.einsum("pfk,fk->pf", pvec, e1)
            ok = np.abs(det) > 1e-15
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tvec = (origin - v0)[None]
            u = np.einsum("fk,pfk->pf", tvec[0], pvec) * inv
            qvec = np.cross(tvec, e1[None])
            v = np.einsum("pk,pfk->pf", d[:, 0], qvec) * inv
            t = np.einsum("fk,pfk->pf", e2, qvec) * inv
            hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0) & (t < 1.0 - 1e-4)
            free[a : a + step] = ~hit.any(axis=1)
        return free

    def normals_2d(self, view: int) -> np.ndarray:
        """Normals expressed in the image plane of their own view."""
        R = _look_at(self.directions[view])
        return (self.normals[view] @ R.T)[:, :2]


def _look_at(direction: np.ndarray) -> np.ndarray:
    """Rotation (model -> camera) of a camera on ``direction`` looking at the origin."""
    z = -np.asarray(direction, dtype=float)
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _edges(mesh: TriMesh):
    """Unique undirected edges and, per edge, up to two adjacent faces (-1 if none)."""
    tris = mesh.triangles
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    f = np.tile(np.arange(len(tris)), 3)
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, f = e[order], f[order]
    uniq, start, counts = np.unique(e, axis=0, return_index=True, return_counts=True)
    f0 = f[start]
    f1 = np.where(counts >= 2, f[np.minimum(start + 1, len(f) - 1)], -1)
    return uniq, f0, f1


def _resample_closed(poly: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` points equally spaced by arc length on a closed polygon, plus the
    index of the polygon segment each point lies on."""
    nxt = np.roll(poly, -1, axis=0)
    seg = np.linalg.norm(nxt - poly, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.arange(n) * (total / n)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 1)
    frac = (s - cum[idx]) / np.maximum(seg[idx], 1e-12)
    return poly[idx] + frac[:, None] * (nxt[idx] - poly[idx]), idx


def _run_lengths(mask: np.ndarray, pts: np.ndarray, nrm: np.ndarray, max_len: float, step: float = 0.5):
    """Distance (pixels) along -n that stays foreground and along +n that stays background.

    Samples sit on boundary pixels, so the first 1.5 pixels on either side are
    not tested.
    """
    h, w = mask.shape
    t = np.arange(step, max_len + step, step)

    def first_change(sign, want_fg):
        pos = pts[:, None, :] + sign * t[None, :, None] * nrm[:, None, :]
        ix = np.rint(pos[..., 0]).astype(np.int64)
        iy = np.rint(pos[..., 1]).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        val = np.zeros(ix.shape, dtype=bool)
        val[inside] = mask[iy[inside], ix[inside]]
        bad = (val != want_fg) & (t > 1.5)[None, :]
        return np.where(bad.any(axis=1), t[np.argmax(bad, axis=1)], max_len)

    return first_change(-1.0, True), first_change(1.0, False)


def build_svm(
    mesh: TriMesh,
    n_views: int = 42,
    n_points: int = 200,
    view_distance: float | None = None,
    render_size: int = 200,
) -> SparseViewpointModel:
    """Render the silhouette from every icosphere direction and sample contour points.

    Each 2D contour sample is snapped onto the nearest projected silhouette
    edge of the mesh and lifted to 3D along that edge, which keeps the model
    points on the true geometry instead of on the pixel grid.
    """
    dirs = icosphere_directions(n_views)
    center = mesh.center
    dist = 4.0 * mesh.diameter if view_distance is None else float(view_distance)
    f = 0.8 * render_size * dist / mesh.diameter
    c = 0.5 * (render_size - 1)
    K = CameraIntrinsics(f, f, c, c, render_size, render_size)
    edges, f0, f1 = _edges(mesh)
    fn = mesh.face_normals()
    fc = mesh.vertices[mesh.triangles].mean(axis=1)

    all_pts = np.zeros((len(dirs), n_points, 3))
    all_nrm = np.zeros((len(dirs), n_points, 3))
    all_fg = np.zeros((len(dirs), n_points))
    all_bg = np.zeros((len(dirs), n_points))
    all_ef = np.zeros((len(dirs), n_points, 2), dtype=np.int64)
    for k, d in enumerate(dirs):
        R = _look_at(d)
        cam_pos = center + dist * d
        pose = Pose(R, -R @ cam_pos)
        buf = rasterize_mesh(mesh, pose, K)
        mask = buf.mask.astype(np.uint8)
        if not mask.any():
            raise EmptyRender(f"view {k} renders no pixel")
        contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        contour = max(contours, key=len)[:, 0, :].astype(float)
        if len(contour) < 3:
            raise EmptyRender(f"view {k} has a degenerate silhouette")
        samples, _ = _resample_closed(contour, n_points)

        # outward normals from the smoothed sample polygon
        tangent = np.roll(samples, -2, axis=0) - np.roll(samples, 2, axis=0)
        nrm = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
        x, y = samples[:, 0], samples[:, 1]
        area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        if area < 0:
            nrm = -nrm
        nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)

        # silhouette edges for this view
        facing = np.einsum("ij,ij->i", fn, cam_pos - fc) > 0
        sil = (f1 < 0) | (facing[f0] != facing[np.maximum(f1, 0)])
        E = edges[sil]
        EF = np.stack([f0[sil], f1[sil]], axis=1)
        va = mesh.vertices[E[:, 0]] @ R.T + pose.translation
        vb = mesh.vertices[E[:, 1]] @ R.T + pose.translation
        pa = np.stack([K.fx * va[:, 0] / va[:, 2] + K.cx, K.fy * va[:, 1] / va[:, 2] + K.cy], 1)
        pb = np.stack([K.fx * vb[:, 0] / vb[:, 2] + K.cx, K.fy * vb[:, 1] / vb[:, 2] + K.cy], 1)
        ab = pb - pa
        len2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-12)
        lam = np.clip(np.einsum("nij,ij->ni", samples[:, None, :] - pa[None], ab) / len2, 0.0, 1.0)
        proj = pa[None] + lam[..., None] * ab[None]
        dist2 = np.sum((proj - samples[:, None, :]) ** 2, axis=-1)
        best = np.argmin(dist2, axis=1)
        lb = lam[np.arange(n_points), best]
        za, zb = va[best, 2], vb[best, 2]
        # perspective-correct parameter along the 3D edge
        s3 = lb * za / (lb * za + (1.0 - lb) * zb)
        p_cam = va[best] + s3[:, None] * (vb[best] - va[best])

        edge_dir = ab[best]
        elen = np.sqrt(len2[best])
        use_edge = elen > 1.0
        en = np.stack([edge_dir[:, 1], -edge_dir[:, 0]], axis=1) / elen[:, None]
        en *= np.sign(np.einsum("ij,ij->i", en, nrm))[:, None]
        nrm = np.where(use_edge[:, None], en, nrm)

        # contour samples sit on boundary pixel centers; measure from the silhouette edge
        fg_px, bg_px = _run_lengths(buf.mask, samples, nrm, 0.5 * render_size)
        to_m = p_cam[:, 2] / f
        all_fg[k] = fg_px * to_m
        all_bg[k] = bg_px * to_m
        all_ef[k] = EF[best]
        all_pts[k] = (p_cam - pose.translation) @ R
        all_nrm[k] = np.concatenate([nrm, np.zeros((n_points, 1))], axis=1) @ R
    return SparseViewpointModel(
        directions=dirs, points=all_pts, normals=all_nrm, center=center, fg_dist=all_fg, bg_dist=all_bg,
        edge_faces=all_ef, face_normals=fn, face_centers=fc, corners=mesh.vertices[mesh.triangles],
    )


def svm_from_config(mesh: TriMesh, cfg: RefinerConfig = RefinerConfig()) -> SparseViewpointModel:
    return build_svm(mesh, cfg.n_views, cfg.n_points, cfg.view_distance)


def save_svm(svm: SparseViewpointModel, path) -> None:
    np.savez_compressed(path, **{f.name: getattr(svm, f.name) for f in fields(svm)})


def load_svm(path) -> SparseViewpointModel:
    with np.load(path) as data:
        return SparseViewpointModel(**{f.name: data[f.name] for f in fields(SparseViewpointModel)})


# ---------------------------------------------------------------- posteriors


@dataclass
class ColorHistograms:
    """Foreground/background RGB histograms with ``bins`` cells per channel."""

    fg: np.ndarray
    bg: np.ndarray
    bins: int = 16
    learning_rate: float = 0.2

    def index(self, colors: np.ndarray) -> np.ndarray:
        q = (np.asarray(colors, dtype=np.int64) * self.bins) // 256
        return (q[..., 0] * self.bins + q[..., 1]) * self.bins + q[..., 2]

    @staticmethod
    def _normalized(counts: np.ndarray) -> np.ndarray:
        total = counts.sum()
        if total <= 0:
            return np.full(counts.shape, 1.0 / counts.size)
        return counts / total

    def _counts(self, colors: np.ndarray) -> np.ndarray:
        return np.bincount(self.index(colors).ravel(), minlength=self.bins**3).astype(float)

    @classmethod
    def from_samples(cls, fg_colors, bg_colors, bins: int = 16, learning_rate: float = 0.2):
        h = cls(np.zeros(bins**3), np.zeros(bins**3), bins, learning_rate)
        h.fg = cls._normalized(h._counts(np.asarray(fg_colors).reshape(-1, 3)))
        h.bg = cls._normalized(h._counts(np.asarray(bg_colors).reshape(-1, 3)))
        return h

    def update(self, fg_colors, bg_colors) -> None:
        a = self.learning_rate
        new_fg = self._normalized(self._counts(np.asarray(fg_colors).reshape(-1, 3)))
        new_bg = self._normalized(self._counts(np.asarray(bg_colors).reshape(-1, 3)))
        self.fg = (1.0 - a) * self.fg + a * new_fg
        self.bg = (1.0 - a) * self.bg + a * new_bg

    def likelihoods(self, colors) -> tuple[np.ndarray, np.ndarray]:
        i = self.index(colors)
        return self.fg[i], self.bg[i]

    def copy(self) -> "ColorHistograms":
        return ColorHistograms(self.fg.copy(), self.bg.copy(), self.bins, self.learning_rate)


def pixel_posterior(lik_fg, lik_bg) -> tuple[np.ndarray, np.ndarray]:
    """Color posteriors ``p(m_f | tau)``, ``p(m_b | tau)``; (0.5, 0.5) when both likelihoods vanish."""
    lik_fg = np.asarray(lik_fg, dtype=float)
    lik_bg = np.asarray(lik_bg, dtype=float)
    total = lik_fg + lik_bg
    zero = total <= 0
    safe = np.where(zero, 1.0, total)
    pf = np.where(zero, 0.5, lik_fg / safe)
    pb = np.where(zero, 0.5, lik_bg / safe)
    return pf, pb


def fused_posterior(color_fg, confidence) -> tuple[np.ndarray, np.ndarray]:
    """Average of the color posterior and the learned confidence."""
    color_fg = np.asarray(color_fg, dtype=float)
    confidence = np.asarray(confidence, dtype=float)
    pf = 0.5 * (color_fg + confidence)
    pb = 0.5 * ((1.0 - color_fg) + (1.0 - confidence))
    return pf, pb


def h_f(x, slope: float):
    return 0.5 - 0.5 * np.tanh(np.asarray(x, dtype=float) / (2.0 * slope))


def h_b(x, slope: float):
    return 1.0 - h_f(x, slope)


def contour_likelihood(d, r, pf, pb, slope: float):
    """Unnormalized probability of the contour sitting at ``d`` (segments)
    given segment centers ``r`` and their posteriors."""
    x = np.asarray(r, dtype=float) - d
    return float(np.prod(h_f(x, slope) * pf + h_b(x, slope) * pb))


@dataclass(frozen=True)
class ConfidenceMap:
    """Learned foreground confidence on an RoI crop, sampled in image pixels."""

    values: np.ndarray  # (S, S)
    roi: RoI

    def sample(self, image_px: np.ndarray) -> np.ndarray:
        """Bilinear lookup, zero outside the crop.

        Written as nested lerps so a constant map returns its value exactly.
        """
        size = self.values.shape[0]
        v = np.pad(np.asarray(self.values, dtype=float), 1)
        crop = self.roi.to_crop(image_px, size) + 1.0
        x0 = np.clip(np.floor(crop[..., 0]), 0, size).astype(np.int64)
        y0 = np.clip(np.floor(crop[..., 1]), 0, size).astype(np.int64)
        fx = np.clip(crop[..., 0] - x0, 0.0, 1.0)
        fy = np.clip(crop[..., 1] - y0, 0.0, 1.0)
        top = v[y0, x0] + fx * (v[y0, x0 + 1] - v[y0, x0])
        bot = v[y0 + 1, x0] + fx * (v[y0 + 1, x0 + 1] - v[y0 + 1, x0])
        return np.clip(top + fy * (bot - top), 0.0, 1.0)


# ---------------------------------------------------------------- correspondence lines


@dataclass
class LineSet:
    """Valid correspondence lines of one pose and scale."""

    pose: Pose
    K: CameraIntrinsics
    scale: int
    points: np.ndarray  # (N, 3) model frame
    centers: np.ndarray  # (N, 2) pixels
    normals: np.ndarray  # (N, 2) unit
    nbar: np.ndarray  # (N,)
    r: np.ndarray  # (2L,) segment centers
    pf: np.ndarray  # (N, 2L) segment posteriors
    pb: np.ndarray
    n_invalid: int = 0
    fg_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.uint8))
    bg_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.uint8))
    colors: np.ndarray | None = None  # (N, 2Ls, 3) raw samples
    conf: np.ndarray | None = None  # (N, 2Ls) learned confidence samples

    def __len__(self) -> int:
        return len(self.points)

    def weights(self, sigma_r: float, slope: float) -> np.ndarray:
        return slope * self.scale**2 / (sigma_r**2 * self.nbar**2)

    def candidates(self) -> np.ndarray:
        L = len(self.r) // 2
        return np.arange(-(L - 1), L, dtype=float)

    def duplicated(self, times: int) -> "LineSet":
        rep = lambda a: np.concatenate([a] * times)
        return LineSet(
            self.pose, self.K, self.scale, rep(self.points), rep(self.centers), rep(self.normals),
            rep(self.nbar), self.r, rep(self.pf), rep(self.pb), self.n_invalid * times,
            colors=None if self.colors is None else rep(self.colors),
            conf=None if self.conf is None else rep(self.conf),
        )


def _segment_posteriors(pf_px: np.ndarray, pb_px: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized product of pixel posteriors over each run of ``s`` samples."""
    if s == 1:
        return pf_px, pb_px
    n, m = pf_px.shape
    lf = np.log(np.maximum(pf_px, LOG_FLOOR)).reshape(n, m // s, s).sum(axis=-1)
    lb = np.log(np.maximum(pb_px, LOG_FLOOR)).reshape(n, m // s, s).sum(axis=-1)
    pf = 1.0 / (1.0 + np.exp(np.clip(lb - lf, -700, 700)))
    return pf, 1.0 - pf


def build_lines(
    pose: Pose,
    svm: SparseViewpointModel,
    image: np.ndarray,
    K: CameraIntrinsics,
    scale: int,
    line_segments: int,
    hist: ColorHistograms | None,
    confidence: ConfidenceMap | None,
    min_continuous: float = 0.0,
) -> LineSet:
    """Project the nearest view's contour points and sample the image along their normals.

    Lines whose center lies behind the camera, whose samples leave the image
    whose mesh edge is no silhouette edge at ``pose`` or whose point is hidden
    behind another part are dropped and counted, as are lines whose silhouette stays
    continuous for fewer than ``min_continuous`` segments on either side
    (thin parts seen edge-on). With ``hist`` None the posteriors are left
    uniform (the caller fills them after a histogram update).
    """
    view = svm.nearest_view(pose)
    q = svm.points[view]
    cam = q @ pose.rotation.T + pose.translation
    n3 = svm.normals[view] @ pose.rotation.T
    z = cam[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    c = np.stack([K.fx * cam[:, 0] / zs + K.cx, K.fy * cam[:, 1] / zs + K.cy], axis=1)
    n2 = n3[:, :2]
    nlen = np.linalg.norm(n2, axis=1)
    ok = front & (nlen > 1e-9) & svm.on_silhouette(view, pose)
    ok[ok] &= svm.unoccluded(q[ok], pose)
    n2 = n2 / np.maximum(nlen, 1e-12)[:, None]
    nbar = np.maximum(np.abs(n2[:, 0]), np.abs(n2[:, 1]))
    # continuous silhouette runs, in steps
    to_steps = K.fx * nbar / zs
    fg_run = svm.fg_dist[view] * to_steps
    bg_run = svm.bg_dist[view] * to_steps
    if min_continuous > 0:
        ok &= np.minimum(fg_run, bg_run) >= min_continuous * scale

    # shift centers along the normal so samples land on pixel centers of the
    # dominant axis; the projected point then sits at a sub-step offset
    major = np.argmax(np.abs(n2), axis=1)
    rows = np.arange(len(c))
    c_major = c[rows, major]
    shift = (np.floor(c_major) + 0.5 - c_major) * np.sign(n2[rows, major])
    c = c + (shift / np.maximum(nbar, 1e-12))[:, None] * n2

    L = line_segments
    k = np.arange(-L * scale, L * scale, dtype=float) + 0.5  # step coordinates of samples
    pos = c[:, None, :] + (k[None, :, None] / np.maximum(nbar, 1e-12)[:, None, None]) * n2[:, None, :]
    ix = np.rint(pos[..., 0]).astype(np.int64)
    iy = np.rint(pos[..., 1]).astype(np.int64)
    h, w = image.shape[:2]
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    ok &= inside.all(axis=1)
    n_invalid = int((~ok).sum())

    idx = np.flatnonzero(ok)
    pos, ix, iy = pos[idx], ix[idx], iy[idx]
    colors = image[iy, ix]
    r = (np.arange(-L, L, dtype=float) + 0.5)
    lines = LineSet(
        pose=pose, K=K, scale=scale, points=q[idx], centers=c[idx], normals=n2[idx], nbar=nbar[idx], r=r,
        pf=np.full((len(idx), 2 * L), 0.5), pb=np.full((len(idx), 2 * L), 0.5), n_invalid=n_invalid,
        fg_colors=colors[(k[None, :] < 0) & (-k[None, :] < fg_run[idx, None])],
        bg_colors=colors[(k[None, :] > 0) & (k[None, :] < bg_run[idx, None])],
        colors=colors, conf=None if confidence is None else confidence.sample(pos),
    )
    if hist is not None:
        set_posteriors(lines, hist)
    return lines


def set_posteriors(lines: LineSet, hist: ColorHistograms) -> None:
    lf, lb = hist.likelihoods(lines.colors)
    color_fg, _ = pixel_posterior(lf, lb)
    conf = np.full(color_fg.shape, 0.5) if lines.conf is None else lines.conf
    pf_px, pb_px = fused_posterior(color_fg, conf)
    lines.pf, lines.pb = _segment_posteriors(pf_px, pb_px, lines.scale)


# ---------------------------------------------------------------- distances and probability


def contour_distance(theta, lines: LineSet) -> tuple[np.ndarray, np.ndarray]:
    """Contour offset of every line at the perturbed pose, in segments, and
    its Jacobian with respect to ``theta`` (shape (N, 6))."""
    theta = np.asarray(theta, dtype=float).reshape(6)
    R0, t0 = lines.pose.rotation, lines.pose.translation
    Rw = R0 @ exp_so3(theta[:3])
    X = lines.points @ Rw.T + t0 + theta[3:]
    z = X[:, 2]
    K = lines.K
    if np.any(z <= 1e-12):
        raise NonPositiveDepth("line point behind the camera")
    p = np.stack([K.fx * X[:, 0] / z + K.cx, K.fy * X[:, 1] / z + K.cy], axis=1)
    f = lines.nbar / lines.scale
    d = f * np.einsum("ij,ij->i", lines.normals, p - lines.centers)

    # d/dX of the projection, contracted with the normal
    gx = lines.normals[:, 0] * K.fx / z
    gy = lines.normals[:, 1] * K.fy / z
    gz = -(gx * X[:, 0] + gy * X[:, 1]) / z
    g = np.stack([gx, gy, gz], axis=1) * f[:, None]  # (N, 3)
    Jr = right_jacobian_so3(theta[:3])
    # dX/domega = -Rw [q]x Jr, so g^T dX/domega = (q x Rw^T g)^T Jr
    J_w = np.cross(lines.points, g @ Rw) @ Jr
    J = np.concatenate([J_w, g], axis=1)
    return d, J


def _line_loglik(d: np.ndarray, lines: LineSet, slope: float) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized log likelihood at continuous ``d`` (N,) and its derivative."""
    x = (lines.r[None, :] - d[:, None]) / (2.0 * slope)
    hf = 0.5 - 0.5 * np.tanh(x)
    diff = lines.pf - lines.pb
    term = hf * diff + lines.pb
    term = np.maximum(term, LOG_FLOOR)
    dhf = (0.25 / slope) / np.cosh(np.clip(x, -350, 350)) ** 2
    return np.log(term).sum(axis=1), (dhf * diff / term).sum(axis=1)


def _log_normalizer(lines: LineSet, slope: float) -> tuple[np.ndarray, np.ndarray]:
    """log of the normalizer over candidate offsets and the normalized distribution."""
    cand = lines.candidates()
    x = (lines.r[None, None, :] - cand[None, :, None]) / (2.0 * slope)
    hf = 0.5 - 0.5 * np.tanh(x)
    term = hf * (lines.pf - lines.pb)[:, None, :] + lines.pb[:, None, :]
    ll = np.log(np.maximum(term, LOG_FLOOR)).sum(axis=-1)  # (N, C)
    logz = logsumexp(ll, axis=1)
    return logz, np.exp(ll - logz[:, None])


def line_distributions(lines: LineSet, slope: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized distribution over candidate offsets plus its mean and variance."""
    _, prob = _log_normalizer(lines, slope)
    cand = lines.candidates()
    mean = prob @ cand
    var = prob @ cand**2 - mean**2
    return prob, mean, var


def pose_probability(theta, lines: LineSet, sigma_r: float, slope: float) -> tuple[float, np.ndarray]:
    """Weighted sum of normalized per-line log likelihoods at ``theta``, with gradient."""
    if len(lines) == 0:
        raise NoValidLines("no valid correspondence line")
    d, J = contour_distance(theta, lines)
    ll, dll = _line_loglik(d, lines, slope)
    logz, _ = _log_normalizer(lines, slope)
    w = lines.weights(sigma_r, slope)
    value = float(np.sum(w * (ll - logz)))
    grad = (w * dll) @ J
    return value, grad


def mean_log_probability(lines: LineSet, sigma_r: float, slope: float) -> float:
    """Per-line mean of the weighted log probability at the current pose."""
    value, _ = pose_probability(np.zeros(6), lines, sigma_r, slope)
    return value / len(lines)


# ---------------------------------------------------------------- refinement


@dataclass
class RefineResult:
    pose: Pose
    probability: float
    n_lines: int
    n_invalid: int
    histograms: ColorHistograms


def newton_step(lines: LineSet, sigma_r: float, cfg: RefinerConfig) -> np.ndarray:
    """Regularized Newton update from a Gaussian fit to each line distribution.

    Lines whose mean sits within one segment of the end of their domain found
    no contour inside the line and are left out of the step.
    """
    _, mean, var = line_distributions(lines, cfg.slope)
    var = np.maximum(var, cfg.min_variance)
    d0, J = contour_distance(np.zeros(6), lines)
    inside = np.abs(mean) < lines.candidates()[-1] - 1.0
    w = np.where(inside, lines.weights(sigma_r, cfg.slope) / var, 0.0)
    g = (w * (mean - d0)) @ J
    H = (J * w[:, None]).T @ J
    T = np.diag([cfg.tikhonov_rotation] * 3 + [cfg.tikhonov_translation] * 3)
    return np.linalg.solve(H + T, g)



def _check_pose(pose: Pose, K: CameraIntrinsics, svm: SparseViewpointModel) -> None:
    c = pose.rotation @ svm.center + pose.translation
    if c[2] <= 1e-6:
        raise DivergedPose("object center behind the camera")
    u = K.fx * c[0] / c[2] + K.cx
    v = K.fy * c[1] / c[2] + K.cy
    if not (-K.width <= u <= 2 * K.width and -K.height <= v <= 2 * K.height):
        raise DivergedPose("object left the frame")


def refine(
    pose: Pose,
    image: np.ndarray,
    K: CameraIntrinsics,
    svm: SparseViewpointModel,
    cfg: RefinerConfig = RefinerConfig(),
    confidence: ConfidenceMap | None = None,
    histograms: ColorHistograms | None = None,
) -> RefineResult:
    """Coarse-to-fine refinement over ``cfg.scales``.

    ``confidence`` None behaves exactly like a confidence of 0.5 everywhere.
    ``histograms`` are copied, never modified; without them the first set of
    lines initializes fresh histograms.
    """
    _check_pose(pose, K, svm)
    hist = None if histograms is None else histograms.copy()
    for scale, sigma in zip(cfg.scales, cfg.sigma_r):
        for _ in range(cfg.iterations):
            lines = build_lines(
                pose, svm, image, K, scale, cfg.line_segments, None, confidence, cfg.min_continuous
            )
            if len(lines) == 0:
                raise NoValidLines("no valid correspondence line")
            if hist is None:
                hist = ColorHistograms.from_samples(
                    lines.fg_colors, lines.bg_colors, cfg.hist_bins, cfg.hist_learning_rate
                )
            else:
                hist.update(lines.fg_colors, lines.bg_colors)
            set_posteriors(lines, hist)
            delta = newton_step(lines, sigma, cfg)
            pose = perturb(pose, delta)
            _check_pose(pose, K, svm)

    scale, sigma = cfg.scales[-1], cfg.sigma_r[-1]
    lines = build_lines(pose, svm, image, K, scale, cfg.line_segments, hist, confidence, cfg.min_continuous)
    if len(lines) == 0:
        raise NoValidLines("no valid correspondence line at the final pose")
    prob = float(np.exp(mean_log_probability(lines, sigma, cfg.slope)))
    return RefineResult(pose=pose, probability=prob, n_lines=len(lines), n_invalid=lines.n_invalid, histograms=hist)
