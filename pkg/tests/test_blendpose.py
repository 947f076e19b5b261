"""Expression blending and linear-blend-skinning behavior."""

import numpy as np
import pytest

from gblend.blendpose import blend_expression, lbs, merge, pose_model, pose_mouth
from gblend.errors import ValidationError
from gblend.model import (
    ExpressionCoeffs,
    GaussianSet,
    PoseParams,
    activate,
    covariance3d,
    normalize_quaternions,
    quaternion_multiply,
)
from tests.conftest import (
    random_delta_set,
    random_gaussian_set,
    random_model,
    rigid_pose,
    rotation_x,
    rotation_y,
)

FIELDS = ("centers", "scales_raw", "rotations_raw", "opacities_raw", "sh")


def assert_sets_equal(a, b, **kwargs):
    for f in FIELDS:
        np.testing.assert_allclose(getattr(a, f), getattr(b, f), **kwargs)


class TestBlendExpression:
    def test_zero_coefficients_identity_exact(self, rng):
        m = random_model(rng, n_expr=3)
        out = blend_expression(m, ExpressionCoeffs.zeros(3))
        for f in FIELDS:
            assert np.array_equal(getattr(out, f), getattr(m.neutral, f))

    def test_single_term_sum(self, rng):
        m = random_model(rng, n_expr=1)
        out = blend_expression(m, ExpressionCoeffs(np.array([1.0])))
        for f in FIELDS:
            expected = getattr(m.neutral, f) + getattr(m.deltas[0], f)
            assert np.allclose(getattr(out, f), expected, atol=1e-15)

    def test_linearity(self, rng):
        m = random_model(rng, n_expr=4)
        pa = rng.normal(0.0, 0.6, 4)
        pb = rng.normal(0.0, 0.6, 4)
        a = blend_expression(m, ExpressionCoeffs(pa))
        b = blend_expression(m, ExpressionCoeffs(pb))
        both = blend_expression(m, ExpressionCoeffs(pa + pb))
        for f in FIELDS:
            lhs = getattr(a, f) + getattr(b, f) - getattr(m.neutral, f)
            rhs = getattr(both, f)
            scale = np.maximum(np.abs(rhs), 1e-12)
            assert np.max(np.abs(lhs - rhs) / scale) < 1e-6

    def test_dimension_mismatch(self, rng):
        m = random_model(rng, n_expr=2)
        with pytest.raises(ValidationError):
            blend_expression(m, ExpressionCoeffs(np.zeros(3)))

    def test_result_independent_of_input_mutation(self, rng):
        m = random_model(rng, n_expr=1)
        out = blend_expression(m, ExpressionCoeffs.zeros(1))
        out.centers[0, 0] += 9.0
        assert m.neutral.centers[0, 0] != out.centers[0, 0]


class TestLBS:
    def test_identity_pose_noop_exact(self, rng):
        g = random_gaussian_set(rng, 6)
        weights = np.zeros((6, 2))
        weights[:3, 0] = 1.0
        weights[3:, :] = 0.5
        posed = lbs(g, weights, PoseParams.identity(2))
        act = activate(g)
        assert np.array_equal(posed.centers, act.centers)
        assert np.array_equal(posed.scales, act.scales)
        assert np.array_equal(posed.rotations, act.rotations)
        assert np.array_equal(posed.opacities, act.opacities)
        assert np.array_equal(posed.sh, act.sh)

    def test_single_joint_rotation_exact_on_centers(self, rng):
        g = random_gaussian_set(rng, 5)
        rot = rotation_y(0.7)
        t = np.array([0.1, -0.2, 0.3])
        pose = rigid_pose([rot], [t])
        posed = lbs(g, np.ones((5, 1)), pose)
        expected = g.centers @ rot.T + t
        assert np.allclose(posed.centers, expected, atol=1e-14)

    def test_single_joint_rotates_quaternions(self, rng):
        g = random_gaussian_set(rng, 4)
        rot = rotation_x(1.1)
        pose = rigid_pose([rot], [np.zeros(3)])
        posed = lbs(g, np.ones((4, 1)), pose)
        from gblend.model import matrix_to_quaternion
        q_rot = matrix_to_quaternion(rot[None])
        expected = quaternion_multiply(
            np.broadcast_to(q_rot, (4, 4)),
            normalize_quaternions(g.rotations_raw))
        # Quaternion double cover: compare rotation matrices.
        from gblend.model import quaternion_to_matrix
        assert np.allclose(quaternion_to_matrix(posed.rotations),
                           quaternion_to_matrix(expected), atol=1e-12)

    def test_covariance_equivariance_under_rotation(self, rng):
        g = random_gaussian_set(rng, 5)
        rot = rotation_y(0.4) @ rotation_x(-0.25)
        posed = lbs(g, np.ones((5, 1)), rigid_pose([rot], [np.zeros(3)]))
        act = activate(g)
        cov_before = covariance3d(act.scales, act.rotations)
        cov_after = covariance3d(posed.scales, posed.rotations)
        expected = np.einsum("ij,njk,lk->nil", rot, cov_before, rot)
        assert np.allclose(cov_after, expected, atol=1e-12)

    def test_blended_joints_polar_rotation(self, rng):
        # Two different rotations mixed 50/50: the polar factor of the
        # blended linear part must be the nearest rotation, checked against
        # an independent SVD in the test.
        g = random_gaussian_set(rng, 1)
        r1, r2 = rotation_y(0.8), rotation_x(-0.6)
        weights = np.array([[0.5, 0.5]])
        pose = rigid_pose([r1, r2], [np.zeros(3), np.zeros(3)])
        posed = lbs(g, weights, pose)
        blended = 0.5 * r1 + 0.5 * r2
        u, _, vt = np.linalg.svd(blended)
        nearest = u @ vt
        if np.linalg.det(nearest) < 0:
            u[:, -1] *= -1
            nearest = u @ vt
        from gblend.model import quaternion_to_matrix
        got = quaternion_to_matrix(posed.skin_quat)[0]
        assert np.allclose(got, nearest, atol=1e-10)
        # Centers still use the raw blended affine, not its polar factor.
        assert np.allclose(posed.centers[0], blended @ g.centers[0], atol=1e-14)

    def test_weight_row_sum_validation_names_row(self, rng):
        g = random_gaussian_set(rng, 3)
        weights = np.ones((3, 2)) * 0.5
        weights[2, 1] = 0.9
        with pytest.raises(ValidationError, match="2"):
            lbs(g, weights, PoseParams.identity(2))

    def test_weight_shape_validation(self, rng):
        g = random_gaussian_set(rng, 3)
        with pytest.raises(ValidationError):
            lbs(g, np.ones((4, 1)), PoseParams.identity(1))
        with pytest.raises(ValidationError):
            lbs(g, np.ones((3, 2)), PoseParams.identity(1))


class TestMouthAndMerge:
    def test_pose_mouth_rigid(self, rng):
        mouth = random_gaussian_set(rng, 4)
        rot = rotation_x(0.3)
        t = np.array([0.0, 0.05, -0.02])
        pose = rigid_pose([np.eye(3), rot], [np.zeros(3), t])
        posed = pose_mouth(mouth, pose, 1)
        assert np.allclose(posed.centers, mouth.centers @ rot.T + t, atol=1e-14)

    def test_pose_mouth_joint_out_of_range(self, rng):
        mouth = random_gaussian_set(rng, 2)
        with pytest.raises(ValidationError, match="joint"):
            pose_mouth(mouth, PoseParams.identity(1), 1)

    def test_merge_concatenates_in_order(self, rng):
        a = lbs(random_gaussian_set(rng, 3), np.ones((3, 1)), PoseParams.identity(1))
        b = lbs(random_gaussian_set(rng, 2), np.ones((2, 1)), PoseParams.identity(1))
        both = merge([a, b])
        assert len(both) == 5
        assert np.array_equal(both.centers[:3], a.centers)
        assert np.array_equal(both.centers[3:], b.centers)
        assert np.array_equal(both.skin_linear[:3], a.skin_linear)

    def test_mouth_psi_independence_bit_exact(self, rng):
        m = random_model(rng, n=6, n_mouth=4, n_expr=3, n_joints=2)
        pose = rigid_pose([rotation_y(0.2), rotation_x(0.15)],
                          [np.zeros(3), np.array([0.0, 0.02, 0.0])])
        out1 = pose_model(m, ExpressionCoeffs(np.array([0.9, -0.4, 0.2])), pose)
        out2 = pose_model(m, ExpressionCoeffs.zeros(3), pose)
        n = len(m.neutral)
        assert np.array_equal(out1.centers[n:], out2.centers[n:])
        assert np.array_equal(out1.rotations[n:], out2.rotations[n:])
        assert np.array_equal(out1.scales[n:], out2.scales[n:])
        assert np.array_equal(out1.opacities[n:], out2.opacities[n:])
        assert np.array_equal(out1.sh[n:], out2.sh[n:])

    def test_pose_model_head_first_layout(self, rng):
        m = random_model(rng, n=5, n_mouth=3)
        out = pose_model(m, ExpressionCoeffs.zeros(2), PoseParams.identity(2))
        assert len(out) == 8
        act = activate(m.neutral)
        assert np.array_equal(out.centers[:5], act.centers)

    def test_pose_model_mouth_follows_jaw(self, rng):
        m = random_model(rng, n=5, n_mouth=3, n_joints=2)
        rot = rotation_x(0.4)
        pose = rigid_pose([np.eye(3), rot], [np.zeros(3), np.zeros(3)])
        out = pose_model(m, ExpressionCoeffs.zeros(2), pose)
        assert np.allclose(out.centers[5:], m.mouth.centers @ rot.T, atol=1e-14)
