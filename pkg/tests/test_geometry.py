import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from ddgs.geometry import (
    EPS_LOWPASS, BehindCameraError, CameraView, Intrinsics, Pose, even_angles, load_views, orbit_pose,
    orbit_views, perspective_jacobian, perturb_pose, project_covariance, project_point, quat_to_rotmat,
    quat_to_rotmat_vjp, random_angles, ray_angles, rotation_angle_deg, save_views,
)

IDENTITY = Pose()
unit3 = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3)


def _view(pose=IDENTITY, f=100.0, w=64, h=48):
    return CameraView(pose, Intrinsics(f, w, h))


def test_project_axis_point():
    view = _view()
    uv, depth = project_point(view, [0, 0, 50.0])
    assert np.allclose(uv, view.intrinsics.principal)
    assert depth == 50.0


def test_project_45_degrees():
    view = _view(f=80.0)
    uv, _ = project_point(view, [30.0, 0, 30.0])
    assert np.allclose(uv, np.asarray(view.intrinsics.principal) + [80.0, 0.0])


def test_project_behind():
    with pytest.raises(BehindCameraError, match="behind camera"):
        project_point(_view(), [1.0, 1.0, 0.0])


def test_covariance_isotropic_axis():
    view = _view(f=100.0)
    s, z = 2.0, 40.0
    cov = project_covariance(view, [0, 0, z], s * s * np.eye(3))
    assert np.allclose(cov, ((100.0 / z) ** 2 * s * s + EPS_LOWPASS) * np.eye(2))


def test_covariance_zero():
    view = _view(Pose(Rotation.random(random_state=1).as_quat(scalar_first=True), [0, 0, 100]))
    assert np.allclose(project_covariance(view, [1, 2, 3], np.zeros((3, 3))), EPS_LOWPASS * np.eye(2))


def test_covariance_matches_numerical_jacobian():
    rng = np.random.default_rng(3)
    for _ in range(10):
        pose = Pose(rng.normal(size=4), rng.normal(0, 5, 3) + [0, 0, 120])
        view = _view(pose)
        mu = rng.normal(0, 10, 3)
        a = rng.normal(size=(3, 3))
        sigma = a @ a.T
        # numerical Jacobian of the pixel projection with respect to the world point
        h = 1e-5
        jn = np.zeros((2, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            jn[:, i] = (project_point(view, mu + e)[0] - project_point(view, mu - e)[0]) / (2 * h)
        expected = jn @ sigma @ jn.T + EPS_LOWPASS * np.eye(2)
        got = project_covariance(view, mu, sigma)
        assert np.allclose(got, expected, rtol=1e-6, atol=1e-9)
        assert np.allclose(got, got.T)
        assert np.linalg.eigvalsh(got).min() >= EPS_LOWPASS - 1e-12


def test_perspective_jacobian_batched():
    x = np.array([[1.0, 2.0, 10.0], [0.0, 0.0, 5.0]])
    j = perspective_jacobian(x, 50.0)
    assert j.shape == (2, 2, 3)
    assert np.allclose(j[1], [[10.0, 0, 0], [0, 10.0, 0]])


@pytest.mark.parametrize("d,angles", [((0, 0, 1), (0.0, 0.0)), ((1, 0, 0), (np.pi / 2, 0.0)),
                                      ((0, 1, 0), (np.pi / 2, np.pi / 2))])
def test_ray_angles_conventions(d, angles):
    # identity pose puts the camera center at the world origin
    assert np.allclose(ray_angles(_view(), np.asarray(d, float) * 7.0), angles)


def test_ray_angles_zero_length():
    with pytest.raises(ValueError):
        ray_angles(_view(), [0.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(unit3, st.floats(0.1, 10.0))
def test_ray_angles_scale_invariant(d, s):
    view = _view(orbit_pose(30.0, 200.0))
    c = view.pose.camera_center
    mu = c + np.asarray(d)
    assert np.allclose(ray_angles(view, mu), ray_angles(view, c + s * (mu - c)), atol=1e-9)


def test_perturb_identity_and_inverse():
    base = Pose([0.9, 0.1, -0.2, 0.3], [1.0, 2.0, 3.0])
    same = perturb_pose(base, np.zeros(6))
    assert np.allclose(same.matrix, base.matrix) and np.allclose(same.translation, base.translation)
    delta = np.array([0.1, -0.2, 0.3, 4.0, -5.0, 6.0])
    there = perturb_pose(base, delta)
    # the group inverse of a left delta (w, v) is (-w, -R(-w) v)
    back = perturb_pose(there, np.concatenate([-delta[:3], -Rotation.from_rotvec(-delta[:3]).apply(delta[3:])]))
    assert np.allclose(back.matrix, base.matrix, atol=1e-9)
    assert np.allclose(back.translation, base.translation, atol=1e-9)


def test_perturb_rotation_about_z():
    p = perturb_pose(IDENTITY, [0, 0, np.pi / 2, 0, 0, 0])
    assert np.allclose(p.matrix, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(unit3, st.floats(0.0, 3.0))
def test_perturb_angle_equals_magnitude(axis, alpha):
    axis = np.asarray(axis) / np.linalg.norm(axis)
    base = orbit_pose(12.0, 300.0)
    p = perturb_pose(base, np.concatenate([alpha * axis, [1.0, 2.0, 3.0]]))
    assert rotation_angle_deg(p, base) == pytest.approx(np.degrees(alpha), abs=1e-7)


def test_projection_commutes_with_rigid_motion():
    rng = np.random.default_rng(5)
    view = _view(orbit_pose(40.0, 250.0))
    motion = Pose(rng.normal(size=4), rng.normal(0, 3, 3))
    x = rng.normal(0, 10, 3)
    composed = view.with_pose(view.pose.compose(motion))
    assert np.allclose(project_point(view, motion.apply(x))[0], project_point(composed, x)[0])


def test_quaternion_vjp():
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    g = rng.normal(size=(3, 3))
    an = quat_to_rotmat_vjp(q, g)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = np.sum((quat_to_rotmat(q + e) - quat_to_rotmat(q - e)) * g) / (2 * h)
        assert an[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_pose_helpers():
    p = Pose([2.0, 0, 0, 0], [0, 0, 10])
    assert np.linalg.norm(p.rotation) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(p.camera_center, [0, 0, -10])
    inv = p.inverse()
    assert np.allclose(inv.compose(p).matrix, np.eye(3))
    with pytest.raises(ValueError):
        Pose([0, 0, 0, 0])
    with pytest.raises(ValueError):
        Intrinsics(0.0, 4, 4)


def test_orbit_geometry():
    for a in (-90.0, 0.0, 33.0):
        p = orbit_pose(a, 400.0)
        assert np.linalg.norm(p.camera_center) == pytest.approx(400.0)
        assert abs(p.camera_center[2]) < 1e-9
        # the isocenter lies on the optical axis
        assert np.allclose(p.apply(np.zeros(3)), [0, 0, 400.0])


def test_pixel_rays_hit_projection():
    view = _view(orbit_pose(25.0, 300.0), f=90.0, w=9, h=7)
    rays = view.pixel_rays()
    pt = view.pose.camera_center + 250.0 * rays[5, 2]
    uv, _ = project_point(view, pt)
    assert np.allclose(uv, [2, 5])


def test_views_round_trip(tmp_path):
    views = orbit_views(even_angles(4), 400.0, Intrinsics(320.0, 16, 12, (7.0, 5.5)))
    save_views(views, tmp_path / "v.json")
    back = load_views(tmp_path / "v.json")
    assert len(back) == len(views)
    for a, b in zip(views, back):
        assert np.array_equal(a.pose.rotation, b.pose.rotation)
        assert np.array_equal(a.pose.translation, b.pose.translation)
        assert a.intrinsics == b.intrinsics


def test_angle_sampling():
    assert np.allclose(even_angles(3), [-90, 0, 90])
    assert np.array_equal(random_angles(5, 7), random_angles(5, 7))
    assert np.all(np.abs(random_angles(100, 1, (-10, 10))) <= 10)
