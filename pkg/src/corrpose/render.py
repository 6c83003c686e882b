"""CPU z-buffer rasterizer.

Triangles are filled with edge functions evaluated at pixel centers (integer
coordinates); no anti-aliasing. Vertex attributes are interpolated with
perspective-correct barycentrics, which makes an interpolated model
coordinate equal to the exact ray/triangle intersection at that pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, transform
from .mesh import TriMesh

NEAR_PLANE = 1e-6
CHUNK = 1 << 21  # candidate pixels per batch
BIG_TRIANGLE = 2048  # bbox pixels above which a triangle gets its own grid


@dataclass
class RenderBuffers:
    depth: np.ndarray  # (h, w), 0 on background
    face: np.ndarray  # (h, w) int, -1 on background
    attr: np.ndarray  # (h, w, c) interpolated vertex attributes

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0


def rasterize_mesh(
    mesh: TriMesh,
    pose: Pose,
    K: CameraIntrinsics,
    size: tuple[int, int] | None = None,
    vertex_attr: np.ndarray | None = None,
) -> RenderBuffers:
    """Render depth, face ids and interpolated attributes.

    ``vertex_attr`` defaults to the model-frame vertex positions. ``size`` is
    (h, w) and defaults to the intrinsics' image size. Triangles with a vertex
    behind the near plane are dropped rather than clipped.
    """
    h, w = size if size is not None else K.size
    attr_src = mesh.vertices if vertex_attr is None else np.asarray(vertex_attr, dtype=float)
    n_attr = attr_src.shape[1]

    cam = transform(pose, mesh.vertices)
    z = cam[:, 2]
    zs = np.where(z > NEAR_PLANE, z, 1.0)
    px = K.fx * cam[:, 0] / zs + K.cx
    py = K.fy * cam[:, 1] / zs + K.cy

    zbuf = np.full((h, w), np.inf)
    face = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))

    tris = mesh.triangles
    front = np.all(z[tris] > NEAR_PLANE, axis=1)
    tx, ty = px[tris], py[tris]
    x0 = np.maximum(np.ceil(tx.min(axis=1)), 0).astype(np.int64)
    x1 = np.minimum(np.floor(tx.max(axis=1)), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(ty.min(axis=1)), 0).astype(np.int64)
    y1 = np.minimum(np.floor(ty.max(axis=1)), h - 1).astype(np.int64)
    area = (tx[:, 1] - tx[:, 0]) * (ty[:, 2] - ty[:, 0]) - (tx[:, 2] - tx[:, 0]) * (ty[:, 1] - ty[:, 0])
    todo = np.nonzero(front & (x1 >= x0) & (y1 >= y0) & (np.abs(area) > 1e-12))[0]

    def covered(f, gx, gy):
        """Pixels of the candidate grid inside triangle(s) ``f``, with
        perspective weights and depth."""
        ax, bx, cx = np.moveaxis(tx[f], -1, 0)
        ay, by, cy = np.moveaxis(ty[f], -1, 0)
        inv_area = 1.0 / area[f]
        l0 = ((bx - gx) * (cy - gy) - (cx - gx) * (by - gy)) * inv_area
        l1 = ((cx - gx) * (ay - gy) - (ax - gx) * (cy - gy)) * inv_area
        l2 = 1.0 - l0 - l1
        keep = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        gx, gy = np.broadcast_to(gx, keep.shape)[keep], np.broadcast_to(gy, keep.shape)[keep]
        f = np.broadcast_to(f, keep.shape)[keep]
        za, zb, zc = np.moveaxis(z[tris[f]], -1, 0)
        p = np.stack([l0[keep] / za, l1[keep] / zb, l2[keep] / zc], axis=-1)
        depth = 1.0 / (p[:, 0] + p[:, 1] + p[:, 2])
        return gy.astype(np.int64) * w + gx.astype(np.int64), depth, f, p

    wd = x1[todo] - x0[todo] + 1
    counts = wd * (y1[todo] - y0[todo] + 1)
    big = counts > BIG_TRIANGLE
    hits = [
        covered(f, np.arange(x0[f], x1[f] + 1, dtype=float)[None, :], np.arange(y0[f], y1[f] + 1, dtype=float)[:, None])
        for f in todo[big]
    ]
    # small triangles: every (triangle, bbox pixel) pair at once, in chunks
    small, wd, counts = todo[~big], wd[~big], counts[~big]
    bounds = np.searchsorted(np.cumsum(counts), np.arange(0, counts.sum(), CHUNK), side="right")
    bounds = np.unique(np.concatenate([[0], bounds, [len(small)]]))
    for a, b in zip(bounds[:-1], bounds[1:]):
        f = np.repeat(small[a:b], counts[a:b])
        off = np.arange(len(f)) - np.repeat(np.cumsum(counts[a:b]) - counts[a:b], counts[a:b])
        w_f = np.repeat(wd[a:b], counts[a:b])
        hits.append(covered(f, (x0[f] + off % w_f).astype(float), (y0[f] + off // w_f).astype(float)))

    if hits:
        pix, depth, f, p = (np.concatenate(c) for c in zip(*hits))
        # nearest surface wins; equal depths go to the lower face index
        zmin = np.full(h * w, np.inf)
        np.minimum.at(zmin, pix, depth)
        near = depth == zmin[pix]
        fmin = np.full(h * w, len(tris))
        np.minimum.at(fmin, pix[near], f[near])
        first = np.flatnonzero(near & (f == fmin[pix]))
        rows, cols = np.divmod(pix[first], w)
        zbuf[rows, cols] = depth[first]
        face[rows, cols] = f[first]
        bary[rows, cols] = p[first] * depth[first][:, None]

    mask = face >= 0
    attr = np.zeros((h, w, n_attr))
    if mask.any():
        fid = face[mask]
        corner = attr_src[tris[fid]]  # (m, 3, c)
        attr[mask] = np.einsum("mk,mkc->mc", bary[mask], corner)
    depth = np.where(mask, zbuf, 0.0)
    return RenderBuffers(depth=depth, face=face, attr=attr)
