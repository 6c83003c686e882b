import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrpose.errors import NonPositiveDepth, NotARotation
from corrpose.geometry import (
    CameraIntrinsics,
    Pose,
    exp_so3,
    log_so3,
    perturb,
    project,
    quat_of,
    random_rotation,
    rotation_of,
    transform,
)
from corrpose.metrics import rotation_error

K100 = CameraIntrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)

unit = st.floats(-1.0, 1.0, allow_nan=False)
axis_angle = st.tuples(unit, unit, unit, st.floats(0.0, np.pi, allow_nan=False))


def _aa_rotation(a):
    axis = np.array(a[:3])
    n = np.linalg.norm(axis)
    if n < 1e-6:
        return np.eye(3)
    return exp_so3(axis / n * a[3])


def test_project_examples():
    assert np.allclose(project([0, 0, 1], K100), [320, 240])
    assert np.allclose(project([0.1, 0, 1], K100), [330, 240])
    with pytest.raises(NonPositiveDepth):
        project([0, 0, -1], K100)
    with pytest.raises(NonPositiveDepth):
        project([0, 0, 1e-13], K100)


def test_transform_examples(rng):
    assert np.allclose(transform(Pose.identity(), [1, 2, 3]), [1, 2, 3])
    assert np.allclose(transform(Pose(np.eye(3), [0, 0, 2]), [0, 0, 0]), [0, 0, 2])
    P = Pose(random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=(20, 3))
    assert np.allclose(transform(P.compose(P.inverse()), x), x, atol=1e-9)


def test_quat_examples():
    assert np.allclose(quat_of(np.eye(3)).as_array(), [1, 0, 0, 0])
    Rz = np.diag([-1.0, -1.0, 1.0])
    assert np.allclose(quat_of(Rz).as_array(), [0, 0, 0, 1], atol=1e-12)
    with pytest.raises(NotARotation):
        quat_of(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(NotARotation):
        quat_of(np.eye(3) * 1.01)


def test_quat_roundtrip_bulk():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(100_000, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    worst = 0.0
    for qi in q:
        R = rotation_of(qi)
        worst = max(worst, np.abs(rotation_of(quat_of(R)) - R).max())
    assert worst < 1e-9


@settings(max_examples=200, deadline=None)
@given(axis_angle)
def test_quat_roundtrip_property(a):
    R = _aa_rotation(a)
    q = quat_of(R)
    assert q.w >= 0
    assert np.abs(rotation_of(q) - R).max() < 1e-9
    # a and -a describe the same rotation
    assert np.abs(rotation_of(-q.as_array()) - R).max() < 1e-9


def test_perturb_examples():
    P = Pose.identity()
    assert perturb(P, np.zeros(6)) == P
    Q = perturb(P, [0, 0, np.pi, 0, 0, 0])
    assert np.allclose(Q.rotation, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


@pytest.mark.parametrize("delta", [1e-4, 1e-2, 0.05, 0.1])
def test_perturb_matches_rotation_error(delta, rng):
    P = Pose(random_rotation(rng), [0.1, -0.2, 1.5])
    assert abs(rotation_error(perturb(P, [delta, 0, 0, 0, 0, 0]).rotation, P.rotation) - delta) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e-3, 1e-3, allow_nan=False), min_size=12, max_size=12), axis_angle)
def test_perturb_is_local_chart(vals, a):
    P = Pose(_aa_rotation(a), [0.0, 0.1, 2.0])
    t1, t2 = np.array(vals[:6]), np.array(vals[6:])
    A = perturb(P, t1 + t2)
    B = perturb(perturb(P, t1), t2)
    assert np.abs(A.rotation - B.rotation).max() < 1e-5
    assert np.abs(A.translation - B.translation).max() < 1e-5


@settings(max_examples=100, deadline=None)
@given(
    st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 5)),
    st.floats(0.1, 10.0),
)
def test_projection_scale_consistency(p, s):
    p = np.array(p)
    K = CameraIntrinsics(500.0, 450.0, 320.0, 240.0, 640, 480)
    Ks = CameraIntrinsics(500.0 * s, 450.0 * s, 320.0, 240.0, 640, 480)
    scaled = np.array([p[0], p[1], p[2] * s])
    assert np.allclose(project(p, K), project(scaled, Ks), atol=1e-9)


def test_log_exp_inverse(rng):
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
        assert np.allclose(log_so3(exp_so3(w)), w, atol=1e-9)


def test_pose_is_immutable():
    P = Pose.identity()
    with pytest.raises(ValueError):
        P.rotation[0, 0] = 2.0


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)
