import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splat4d import geometry as geo
from splat4d.errors import AngleNearPi

RNG = np.random.default_rng(7)


def se3_generators():
    """Basis of se(3) as 4x4 matrices: indices 0-2 translation, 3-5 rotation."""
    E = np.zeros((6, 4, 4))
    for j in range(3):
        E[j, j, 3] = 1.0
    E[3, 1, 2], E[3, 2, 1] = -1.0, 1.0
    E[4, 0, 2], E[4, 2, 0] = 1.0, -1.0
    E[5, 0, 1], E[5, 1, 0] = -1.0, 1.0
    return E


def matrix_exp_series(A, terms=20):
    out = np.eye(4)
    term = np.eye(4)
    for k in range(1, terms + 1):
        term = term @ A / k
        out = out + term
    return out


class TestSkew:
    def test_zero(self):
        assert np.array_equal(geo.skew(np.zeros(3)), np.zeros((3, 3)))

    def test_unit_z(self):
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)
        assert np.array_equal(geo.skew([0, 0, 1]), expected)

    def test_matches_cross_product(self):
        for _ in range(50):
            v, w = RNG.normal(size=3), RNG.normal(size=3)
            np.testing.assert_allclose(geo.skew(v) @ w, np.cross(v, w), atol=1e-14)


class TestSE3Exp:
    def test_zero_tangent_is_identity(self):
        T = geo.se3_exp(np.zeros(6))
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(T.translation, np.zeros(3), atol=1e-15)

    def test_quarter_turn_about_z(self):
        tau = np.array([0, 0, 0, 0, 0, np.pi / 2])
        T = geo.se3_exp(tau)
        np.testing.assert_allclose(T.rotation @ [1, 0, 0], [0, 1, 0], atol=1e-9)

    def test_matches_matrix_exponential_series(self):
        E = se3_generators()
        for _ in range(25):
            tau = RNG.normal(size=6)
            theta = tau[3:]
            n = np.linalg.norm(theta)
            if n > 2.0:
                tau[3:] = theta / n * 2.0
            T_series = matrix_exp_series(np.einsum("j,jab->ab", tau, E))
            T = geo.se3_exp(tau).as_matrix()
            np.testing.assert_allclose(T, T_series, atol=1e-8)

    def test_rotation_invariants(self):
        for _ in range(20):
            T = geo.se3_exp(RNG.normal(size=6))
            R = T.rotation
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_compose_inverse_is_identity(self):
        for _ in range(20):
            T = geo.se3_exp(RNG.normal(size=6))
            I = T.compose(T.inverse())
            np.testing.assert_allclose(I.rotation, np.eye(3), atol=1e-9)
            np.testing.assert_allclose(I.translation, np.zeros(3), atol=1e-9)


class TestSE3Log:
    def test_identity_gives_zero(self):
        assert np.allclose(geo.se3_log(geo.SE3Pose.identity()), 0.0)

    def test_small_tangent_round_trip(self):
        tau = np.array([1e-3, -2e-3, 3e-3, 1e-4, -1e-4, 2e-4])
        np.testing.assert_allclose(geo.se3_log(geo.se3_exp(tau)), tau, atol=1e-9)

    def test_round_trip_residual(self):
        for _ in range(50):
            tau = RNG.normal(size=6)
            theta = tau[3:]
            n = np.linalg.norm(theta)
            if n > np.pi - 1e-3:
                tau[3:] = theta / n * (np.pi - 1e-2)
            T = geo.se3_exp(tau)
            T2 = geo.se3_exp(geo.se3_log(T))
            np.testing.assert_allclose(T2.as_matrix(), T.as_matrix(), atol=1e-8)

    def test_angle_near_pi_raises(self):
        T = geo.se3_exp(np.array([0, 0, 0, np.pi - 1e-8, 0, 0]))
        with pytest.raises(AngleNearPi):
            geo.se3_log(T)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6))
    def test_exp_log_property(self, vals):
        tau = np.array(vals)
        if np.linalg.norm(tau[3:]) >= np.pi - 1e-3:
            return
        np.testing.assert_allclose(geo.se3_log(geo.se3_exp(tau)), tau, atol=1e-8)


class TestTransformPoint:
    def test_identity(self):
        p = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(geo.transform_point(geo.SE3Pose.identity(), p), p)

    def test_pure_translation(self):
        t = np.array([0.5, -1.0, 2.0])
        T = geo.SE3Pose(np.eye(3), t)
        np.testing.assert_array_equal(geo.transform_point(T, np.zeros(3)), t)

    def test_matches_homogeneous_multiply(self):
        for _ in range(30):
            T = geo.se3_exp(RNG.normal(size=6))
            p = RNG.normal(size=3)
            hom = (T.as_matrix() @ np.append(p, 1.0))[:3]
            np.testing.assert_allclose(geo.transform_point(T, p), hom, atol=1e-12)

    def test_compose_associativity(self):
        for _ in range(20):
            A = geo.se3_exp(RNG.normal(size=6))
            B = geo.se3_exp(RNG.normal(size=6))
            p = RNG.normal(size=3)
            lhs = geo.transform_point(A.compose(B), p)
            rhs = geo.transform_point(A, geo.transform_point(B, p))
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_batched_matches_single(self):
        T = geo.se3_exp(RNG.normal(size=6))
        pts = RNG.normal(size=(17, 3))
        batched = geo.transform_point(T, pts)
        for i in range(len(pts)):
            np.testing.assert_allclose(batched[i], geo.transform_point(T, pts[i]), atol=1e-14)


class TestPinholeCamera:
    def test_validation(self):
        with pytest.raises(ValueError):
            geo.PinholeCamera(fx=100, fy=100, cx=32, cy=32, width=64, height=64, near=2.0, far=1.0)
        with pytest.raises(ValueError):
            geo.PinholeCamera(fx=-1, fy=100, cx=32, cy=32, width=64, height=64)

    def test_projection_at_near_inside_image_iff_formula_says_so(self):
        cam = geo.PinholeCamera(fx=80, fy=70, cx=30, cy=35, width=64, height=64, near=0.1)
        for _ in range(200):
            p = RNG.normal(size=3)
            p[2] = cam.near
            uv = cam.project(p)
            u_formula = cam.fx * p[0] / p[2] + cam.cx
            v_formula = cam.fy * p[1] / p[2] + cam.cy
            inside = (0 <= u_formula < cam.width) and (0 <= v_formula < cam.height)
            assert ((0 <= uv[0] < cam.width) and (0 <= uv[1] < cam.height)) == inside

    def test_backproject_project_round_trip(self):
        cam = geo.PinholeCamera(fx=80, fy=80, cx=32, cy=32, width=64, height=64)
        depth = np.full((64, 64), 2.0)
        pts = cam.backproject_grid(depth)
        uv = cam.project(pts.reshape(-1, 3)).reshape(64, 64, 2)
        gx, gy = np.meshgrid(np.arange(64) + 0.5, np.arange(64) + 0.5)
        np.testing.assert_allclose(uv[..., 0], gx, atol=1e-10)
        np.testing.assert_allclose(uv[..., 1], gy, atol=1e-10)

    def test_intrinsic4_matches_projection(self):
        cam = geo.PinholeCamera(fx=80, fy=70, cx=30, cy=35, width=64, height=64)
        p = np.array([0.3, -0.2, 1.7])
        hom = cam.intrinsic4() @ np.append(p, 1.0)
        np.testing.assert_allclose(hom[:2] / hom[2], cam.project(p), atol=1e-12)
        assert hom[3] == 1.0


class TestQuaternions:
    def test_round_trip(self):
        for _ in range(50):
            R = geo.so3_exp(RNG.normal(size=3))
            q = geo.rotation_to_quaternion(R)
            np.testing.assert_allclose(geo.quaternion_to_rotation(q), R, atol=1e-12)
            assert abs(np.linalg.norm(q) - 1.0) < 1e-12


class TestLookAt:
    def test_points_camera_at_target(self):
        eye = np.array([2.0, 1.0, -3.0])
        target = np.zeros(3)
        T_wc = geo.look_at(eye, target)
        fwd = T_wc.rotation[:, 2]
        np.testing.assert_allclose(fwd, (target - eye) / np.linalg.norm(target - eye), atol=1e-12)
        assert abs(np.linalg.det(T_wc.rotation) - 1.0) < 1e-12
        # Target projects to the camera axis: T_CW maps it to +z.
        p_cam = geo.transform_point(T_wc.inverse(), target)
        np.testing.assert_allclose(p_cam[:2], 0.0, atol=1e-12)
        assert p_cam[2] > 0


class TestJacobians:
    def test_right_jacobian_definition(self):
        for _ in range(20):
            theta = RNG.normal(size=3)
            d = RNG.normal(size=3) * 1e-6
            lhs = geo.so3_exp(theta + d)
            rhs = geo.so3_exp(theta) @ geo.so3_exp(geo.so3_right_jacobian(theta) @ d)
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_left_jacobian_inverse(self):
        for _ in range(20):
            theta = RNG.normal(size=3)
            V = geo.so3_left_jacobian(theta)
            Vinv = geo.so3_left_jacobian_inv(theta)
            np.testing.assert_allclose(V @ Vinv, np.eye(3), atol=1e-10)
