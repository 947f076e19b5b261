"""Core data types, activations, and quaternion/covariance math."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gblend.errors import ValidationError
from gblend.model import (
    ActivatedGaussianSet,
    BlendshapeModel,
    Camera,
    ExpressionCoeffs,
    GaussianSet,
    PoseParams,
    activate,
    covariance3d,
    inverse_sigmoid,
    matrix_to_quaternion,
    normalize_quaternions,
    quaternion_multiply,
    quaternion_to_matrix,
    sh_coeff_count,
    sigmoid,
)
from tests.conftest import random_gaussian_set, random_model

finite_floats = st.floats(min_value=-50.0, max_value=50.0,
                          allow_nan=False, allow_infinity=False)


def unit_quaternion(w, x, y, z):
    q = np.array([w, x, y, z], dtype=np.float64)
    n = np.linalg.norm(q)
    return q / n if n > 0 else np.array([1.0, 0.0, 0.0, 0.0])


class TestActivation:
    def test_zero_log_scale_gives_unit_scale(self, rng):
        g = random_gaussian_set(rng, 3)
        g.scales_raw[:] = 0.0
        act = activate(g)
        assert np.array_equal(act.scales, np.ones((3, 3)))

    def test_zero_logit_gives_half_opacity(self, rng):
        g = random_gaussian_set(rng, 3)
        g.opacities_raw[:] = 0.0
        act = activate(g)
        assert np.array_equal(act.opacities, np.full(3, 0.5))

    def test_quaternion_normalized(self, rng):
        g = random_gaussian_set(rng, 1)
        g.rotations_raw[0] = [2.0, 0.0, 0.0, 0.0]
        act = activate(g)
        assert np.array_equal(act.rotations[0], [1.0, 0.0, 0.0, 0.0])

    def test_zero_quaternion_error_names_index(self, rng):
        g = random_gaussian_set(rng, 5)
        g.rotations_raw[3] = 0.0
        with pytest.raises(ValidationError, match="3"):
            activate(g)

    def test_center_and_sh_untouched(self, rng):
        g = random_gaussian_set(rng, 4, sh_degree=1)
        act = activate(g)
        assert np.array_equal(act.centers, g.centers)
        assert np.array_equal(act.sh, g.sh)

    def test_idempotent_on_normalized_quaternions(self, rng):
        g = random_gaussian_set(rng, 6)
        g.rotations_raw = normalize_quaternions(g.rotations_raw)
        act = activate(g)
        again = normalize_quaternions(act.rotations)
        assert np.allclose(act.rotations, again, atol=1e-15)
        assert np.all(np.abs(np.linalg.norm(act.rotations, axis=1) - 1.0) < 1e-6)

    def test_sigmoid_overflow_safe(self):
        assert sigmoid(np.array(1000.0)) == 1.0
        assert sigmoid(np.array(-1000.0)) == 0.0

    def test_inverse_sigmoid_round_trip(self):
        y = np.array([0.01, 0.1, 0.5, 0.9, 0.99])
        assert np.allclose(sigmoid(inverse_sigmoid(y)), y, atol=1e-12)


class TestCovariance3d:
    def test_axis_aligned(self):
        scales = np.array([[1.0, 2.0, 3.0]])
        q = np.array([[1.0, 0.0, 0.0, 0.0]])
        cov = covariance3d(scales, q)
        assert np.allclose(cov[0], np.diag([1.0, 4.0, 9.0]), atol=1e-14)

    def test_z_rotation_90_degrees(self):
        # Oracle: compose R diag(s^2) R^T with an explicitly built matrix.
        angle = np.pi / 2
        rot = np.array([[np.cos(angle), -np.sin(angle), 0.0],
                        [np.sin(angle), np.cos(angle), 0.0],
                        [0.0, 0.0, 1.0]])
        expected = rot @ np.diag([1.0, 4.0, 1.0]) @ rot.T
        q = np.array([[np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)]])
        cov = covariance3d(np.array([[1.0, 2.0, 1.0]]), q)
        assert np.allclose(cov[0], expected, atol=1e-12)
        assert np.allclose(cov[0], np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_symmetry_exact(self, rng):
        g = random_gaussian_set(rng, 20)
        act = activate(g)
        cov = covariance3d(act.scales, act.rotations)
        assert np.array_equal(cov, np.transpose(cov, (0, 2, 1)))

    @given(w=finite_floats, x=finite_floats, y=finite_floats, z=finite_floats,
           s1=st.floats(0.01, 10.0), s2=st.floats(0.01, 10.0),
           s3=st.floats(0.01, 10.0))
    @settings(max_examples=60, deadline=None)
    def test_eigenvalues_match_squared_scales(self, w, x, y, z, s1, s2, s3):
        q = unit_quaternion(w, x, y, z)
        scales = np.array([[s1, s2, s3]])
        cov = covariance3d(scales, q[None])
        eig = np.sort(np.linalg.eigvalsh(cov[0]))
        assert np.all(eig >= -1e-12)
        assert np.allclose(eig, np.sort(scales[0] ** 2), rtol=1e-9, atol=1e-12)


class TestQuaternions:
    @given(w=finite_floats, x=finite_floats, y=finite_floats, z=finite_floats)
    @settings(max_examples=80, deadline=None)
    def test_matrix_round_trip(self, w, x, y, z):
        q = unit_quaternion(w, x, y, z)
        m = quaternion_to_matrix(q[None])[0]
        assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(m) > 0
        q2 = matrix_to_quaternion(m[None])[0]
        m2 = quaternion_to_matrix(q2[None])[0]
        assert np.allclose(m, m2, atol=1e-9)

    def test_multiply_composes_rotations(self, rng):
        a = normalize_quaternions(rng.normal(size=(5, 4)))
        b = normalize_quaternions(rng.normal(size=(5, 4)))
        ab = quaternion_multiply(a, b)
        lhs = quaternion_to_matrix(ab)
        rhs = np.einsum("nij,njk->nik",
                        quaternion_to_matrix(a), quaternion_to_matrix(b))
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_identity_multiply_exact(self):
        e = np.array([[1.0, 0.0, 0.0, 0.0]])
        q = np.array([[0.3, -0.5, 0.2, 0.7]])
        assert np.array_equal(quaternion_multiply(e, q), q)

    def test_matrix_to_quaternion_canonical_sign(self, rng):
        q = normalize_quaternions(rng.normal(size=(30, 4)))
        out = matrix_to_quaternion(quaternion_to_matrix(q))
        assert np.all(out[:, 0] >= 0.0)


class TestContainers:
    def test_gaussian_set_length_mismatch(self, rng):
        with pytest.raises(ValidationError):
            GaussianSet(centers=np.zeros((3, 3)), scales_raw=np.zeros((2, 3)),
                        rotations_raw=np.zeros((3, 4)),
                        opacities_raw=np.zeros(3), sh=np.zeros((3, 1, 3)))

    def test_sh_degree_property(self, rng):
        for degree in range(4):
            g = random_gaussian_set(rng, 2, sh_degree=degree)
            assert g.sh_degree == degree
            assert sh_coeff_count(degree) == (degree + 1) ** 2

    def test_sh_degree_rejects_non_square_count(self, rng):
        g = random_gaussian_set(rng, 2)
        g.sh = np.zeros((2, 3, 3))
        with pytest.raises(ValidationError):
            _ = g.sh_degree

    def test_copy_is_deep(self, rng):
        g = random_gaussian_set(rng, 3)
        c = g.copy()
        c.centers[0, 0] += 1.0
        assert g.centers[0, 0] != c.centers[0, 0]

    def test_concatenate_counts(self, rng):
        a = random_gaussian_set(rng, 3)
        b = random_gaussian_set(rng, 5)
        both = GaussianSet.concatenate([a, b])
        assert len(both) == 8
        assert np.array_equal(both.centers[:3], a.centers)
        assert np.array_equal(both.centers[3:], b.centers)

    def test_model_delta_count_mismatch(self, rng):
        with pytest.raises(ValidationError):
            BlendshapeModel(
                neutral=random_gaussian_set(rng, 4),
                deltas=[random_gaussian_set(rng, 5)],
                weights=np.ones((4, 1)),
                mouth=random_gaussian_set(rng, 2),
                mouth_joint=0)

    def test_model_mouth_joint_range(self, rng):
        with pytest.raises(ValidationError):
            BlendshapeModel(
                neutral=random_gaussian_set(rng, 4),
                deltas=[],
                weights=np.ones((4, 1)),
                mouth=random_gaussian_set(rng, 2),
                mouth_joint=1)

    def test_model_properties(self, rng):
        m = random_model(rng, n=6, n_mouth=3, n_expr=2, n_joints=2)
        assert m.num_expressions == 2
        assert m.num_joints == 2
        assert m.sh_degree == 0

    def test_expression_coeffs(self):
        assert np.array_equal(ExpressionCoeffs.zeros(3).psi, np.zeros(3))
        with pytest.raises(ValidationError):
            ExpressionCoeffs(np.zeros((2, 2)))

    def test_pose_params_identity(self):
        p = PoseParams.identity(3)
        assert p.num_joints == 3
        assert np.array_equal(p.joints[1, :, :3], np.eye(3))
        assert np.array_equal(p.joints[1, :, 3], np.zeros(3))


class TestCamera:
    def test_world_origin_inverts_extrinsics(self, rng):
        from tests.conftest import frontal_camera, rotation_y
        cam = frontal_camera(32, 32)
        o = cam.world_origin()
        assert np.allclose(cam.rotation @ o + cam.translation, 0.0, atol=1e-12)

    def test_to_camera_matches_manual(self, rng):
        from tests.conftest import frontal_camera
        cam = frontal_camera(32, 32)
        pts = rng.normal(size=(7, 3))
        expected = (cam.rotation @ pts.T).T + cam.translation
        assert np.allclose(cam.to_camera(pts), expected, atol=1e-12)

    def test_near_far_validation(self):
        with pytest.raises(ValidationError):
            Camera(fx=10.0, fy=10.0, cx=8.0, cy=8.0, width=16, height=16,
                   near=2.0, far=1.0)
        with pytest.raises(ValidationError):
            Camera(fx=-1.0, fy=10.0, cx=8.0, cy=8.0, width=16, height=16)


class TestActivatedContainer:
    def test_activate_returns_activated_type(self, rng):
        act = activate(random_gaussian_set(rng, 3))
        assert isinstance(act, ActivatedGaussianSet)
        assert len(act) == 3
        assert np.all(act.scales > 0)
        assert np.all((act.opacities > 0) & (act.opacities < 1))
