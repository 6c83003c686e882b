"""Rigid-body math and the pinhole camera model.

Conventions: a :class:`Pose` maps model-frame points to the camera frame,
``x_cam = R @ x_model + t``. Pixel centers sit at integer coordinates. The
6-vector pose variation ``theta = (wx, wy, wz, vx, vy, vz)`` rotates in the
model (body) frame through the exponential map and translates additively in
the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, NotARotation

ORTHO_TOL = 1e-9
MIN_DEPTH = 1e-12


def skew(v):
    """Cross-product matrix ``[v]x`` so that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(omega) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=float)
    angle = float(np.linalg.norm(omega))
    K = skew(omega)
    if angle < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (np.sin(angle) / angle) * K
        + ((1.0 - np.cos(angle)) / angle**2) * K @ K
    )


def log_so3(R) -> np.ndarray:
    """Inverse of :func:`exp_so3`; returns an axis-angle vector with norm in [0, pi]."""
    q = quat_of(R)
    w = q.w
    v = np.array([q.x, q.y, q.z])
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v
    angle = 2.0 * np.arctan2(s, w)
    return v * (angle / s)


def right_jacobian_so3(omega) -> np.ndarray:
    """Right Jacobian of SO(3): ``exp(w + dw) ~= exp(w) exp(Jr(w) dw)``."""
    omega = np.asarray(omega, dtype=float)
    angle = float(np.linalg.norm(omega))
    K = skew(omega)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    a2 = angle * angle
    return np.eye(3) - ((1.0 - np.cos(angle)) / a2) * K + ((angle - np.sin(angle)) / (a2 * angle)) * K @ K


def _check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NotARotation("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R @ R.T - np.eye(3))) > tol:
        raise NotARotation("matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise NotARotation("determinant is not +1")


def orthonormalize(R) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class UnitQuaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} is not 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @classmethod
    def from_array(cls, a) -> "UnitQuaternion":
        a = np.asarray(a, dtype=float)
        a = a / np.linalg.norm(a)
        if a[0] < 0:
            a = -a
        return cls(*(float(v) for v in a))


def quat_of(R) -> UnitQuaternion:
    """Rotation matrix to unit quaternion (w, x, y, z) with ``w >= 0``.

    Uses Shepperd's branch selection on the largest diagonal term so the
    square root is always well conditioned.
    """
    R = np.asarray(R, dtype=float)
    _check_rotation(R)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    cands = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(cands))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return UnitQuaternion.from_array(q)


def rotation_of(q) -> np.ndarray:
    """Unit quaternion (or a 4-array in w, x, y, z order) to rotation matrix."""
    a = q.as_array() if isinstance(q, UnitQuaternion) else np.asarray(q, dtype=float)
    w, x, y, z = a / np.linalg.norm(a)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from model frame to camera frame (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        _check_rotation(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, q, t) -> "Pose":
        return cls(rotation_of(q), t)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def quat(self) -> UnitQuaternion:
        return quat_of(self.rotation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        q = self.quat().as_array()
        return f"Pose(q={np.round(q, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def transform(pose: Pose, points) -> np.ndarray:
    """Model-frame point(s) to camera frame. Accepts a 3-vector or an (N, 3) array."""
    p = np.asarray(points, dtype=float)
    return p @ pose.rotation.T + pose.translation


def perturb(pose: Pose, theta) -> Pose:
    """Apply a local 6-vector update (body-frame rotation, camera-frame translation)."""
    theta = np.asarray(theta, dtype=float).reshape(6)
    if not theta.any():
        return pose
    R = pose.rotation @ exp_so3(theta[:3])
    if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-12:
        R = orthonormalize(R)
    return Pose(R, pose.translation + theta[3:])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (via a normalized Gaussian quaternion)."""
    q = rng.normal(size=4)
    return rotation_of(q / np.linalg.norm(q))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def size(self) -> tuple[int, int]:
        """(height, width)."""
        return (self.height, self.width)

    def crop(self, x_left: float, y_top: float, side: float, out_size: int) -> "CameraIntrinsics":
        """Intrinsics of a square crop resampled to ``out_size`` pixels.

        ``x_left``/``y_top`` are continuous edge coordinates (pixel ``i`` covers
        ``[i - 0.5, i + 0.5]``). The principal point may fall outside the crop,
        so the bounds check is bypassed.
        """
        s = out_size / side
        return CameraIntrinsics._unchecked(
            fx=self.fx * s,
            fy=self.fy * s,
            cx=(self.cx - x_left) * s - 0.5,
            cy=(self.cy - y_top) * s - 0.5,
            width=out_size,
            height=out_size,
        )

    @classmethod
    def _unchecked(cls, **fields) -> "CameraIntrinsics":
        k = object.__new__(cls)
        for name, val in fields.items():
            object.__setattr__(k, name, val)
        return k


def project(point, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) to pixels."""
    p = np.asarray(point, dtype=float)
    z = p[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth("point at or behind the camera plane")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def project_unchecked(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection without the depth check (caller masks invalid rows)."""
    z = np.where(np.abs(points[..., 2]) < MIN_DEPTH, MIN_DEPTH, points[..., 2])
    return np.stack(
        [K.fx * points[..., 0] / z + K.cx, K.fy * points[..., 1] / z + K.cy], axis=-1
    )
