"""Synthetic scenes: random poses, simple RGB renders and ground-truth RoIs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .geometry import CameraIntrinsics, Pose, exp_so3, random_rotation
from .mesh import TriMesh
from .render import rasterize_mesh
from .roi import RoI

FG_COLOR = np.array([210, 170, 40])
BG_COLOR = np.array([30, 60, 140])
PALETTE = np.array(
    [[210, 170, 40], [180, 180, 190], [60, 60, 70], [200, 90, 50], [120, 160, 200], [90, 140, 60]]
)


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=800.0, fy=800.0, cx=319.5, cy=239.5, width=640, height=480)


def random_pose(
    rng: np.random.Generator,
    mesh: TriMesh,
    K: CameraIntrinsics,
    depth: tuple[float, float] = (1.2, 2.0),
    margin: float = 0.3,
) -> Pose:
    """Uniform random rotation with the object center projected into the
    central part of the image (``margin`` of each side left free)."""
    R = random_rotation(rng)
    z = rng.uniform(*depth)
    u = rng.uniform(margin * K.width, (1 - margin) * K.width)
    v = rng.uniform(margin * K.height, (1 - margin) * K.height)
    center_cam = np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
    return Pose(R, center_cam - R @ mesh.center)


def offset_pose(pose: Pose, rng: np.random.Generator, angle: float, rel_translation: float) -> Pose:
    """Rotate by ``angle`` about a random axis (body frame) and shift the
    translation by ``rel_translation * |t|`` in a random direction."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift *= rel_translation * np.linalg.norm(pose.translation) / np.linalg.norm(shift)
    return Pose(pose.rotation @ exp_so3(axis * angle), pose.translation + shift)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8 RGB
    pose: Pose
    K: CameraIntrinsics
    mask: np.ndarray  # (H, W) bool
    roi: RoI


def render_image(
    mesh: TriMesh,
    pose: Pose,
    K: CameraIntrinsics,
    rng: np.random.Generator,
    style: Literal["two-color", "clutter"] = "two-color",
    noise: float = 4.0,
    face_colors: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Render an RGB image and the object mask.

    ``two-color`` paints a flat object on a flat background. ``clutter``
    shades object faces from a palette and fills the background with random
    rectangles drawn from the same palette, so color alone is ambiguous.
    """
    buf = rasterize_mesh(mesh, pose, K)
    mask = buf.mask
    h, w = K.size
    if style == "two-color":
        img = np.empty((h, w, 3))
        img[:] = BG_COLOR
        img[mask] = FG_COLOR
    else:
        img = np.empty((h, w, 3))
        img[:] = PALETTE[rng.integers(len(PALETTE))] * 0.6
        for _ in range(40):
            x0, y0 = rng.integers(0, w), rng.integers(0, h)
            bw, bh = rng.integers(8, 60), rng.integers(8, 60)
            img[y0 : y0 + bh, x0 : x0 + bw] = PALETTE[rng.integers(len(PALETTE))]
        if face_colors is None:
            face_colors = PALETTE[np.arange(len(mesh.triangles)) % len(PALETTE)]
        # simple Lambert shading against a headlight
        n_cam = mesh.face_normals() @ pose.rotation.T
        shade = 0.55 + 0.45 * np.abs(n_cam[:, 2])
        fid = buf.face[mask]
        img[mask] = face_colors[fid] * shade[fid, None]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def make_scene(
    mesh: TriMesh,
    rng: np.random.Generator,
    K: CameraIntrinsics | None = None,
    style: Literal["two-color", "clutter"] = "two-color",
    roi_pad: float = 0.1,
) -> Scene:
    K = default_camera() if K is None else K
    while True:
        pose = random_pose(rng, mesh, K)
        image, mask = render_image(mesh, pose, K, rng, style)
        if mask.sum() >= 50:
            break
    return Scene(image=image, pose=pose, K=K, mask=mask, roi=RoI.from_mask(mask, roi_pad))
