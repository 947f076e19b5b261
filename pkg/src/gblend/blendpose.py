"""Expression blending and linear blend skinning.

Blending happens in raw parameter space: the posed basis is
``B = B0 + sum_k psi_k * dB_k`` applied to centers, log-scales, raw
quaternions, logit opacities, and SH coefficients alike.  Activation happens
once, after blending, inside :func:`lbs`.

Skinning moves each Gaussian by the weight-blended joint transform
``A_i = sum_j w_ij T_j``.  Centers take the full affine; orientations are
premultiplied by the nearest rotation to the blended linear part (polar
decomposition); scales, opacities, and SH are untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import (
    BlendshapeModel,
    ExpressionCoeffs,
    GaussianSet,
    PoseParams,
    activate,
    matrix_to_quaternion,
    quaternion_multiply,
)

WEIGHT_ROW_SUM_TOL = 1e-4


@dataclass
class PosedGaussianSet:
    """Activated Gaussians after skinning, with the trace needed for backprop.

    The first five fields are what the rasterizer consumes.  The remaining
    fields record where each value came from so gradients with respect to the
    raw input parameters can be chained back through pose and activation.
    """

    centers: np.ndarray          # (N, 3) posed world centers
    scales: np.ndarray           # (N, 3) activated scales (pose-invariant)
    rotations: np.ndarray        # (N, 4) unit quaternions after skinning
    opacities: np.ndarray        # (N,) activated opacities
    sh: np.ndarray               # (N, K, 3)

    source: GaussianSet          # raw parameters that produced this set
    skin_linear: np.ndarray      # (N, 3, 3) linear part of the blended affine
    skin_quat: np.ndarray        # (N, 4) quaternion of the nearest rotation
    rotations_local: np.ndarray  # (N, 4) unit quaternions before skinning

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return self.source.sh_degree


def blend_expression(model: BlendshapeModel, coeffs: ExpressionCoeffs) -> GaussianSet:
    """Raw-space expression blend: neutral plus psi-weighted deltas.

    Args:
        model: blendshape rig providing B0 and the n delta sets.
        coeffs: psi, length must equal ``model.num_expressions``.

    Returns:
        A raw GaussianSet; psi = 0 returns a copy of the neutral basis.

    Raises:
        ValidationError: if psi length does not match the model.
    """
    psi = coeffs.psi
    if psi.shape[0] != model.num_expressions:
        raise ValidationError(
            f"psi has {psi.shape[0]} coefficients, model has {model.num_expressions} expressions")
    out = model.neutral.copy()
    for k in range(psi.shape[0]):
        w = psi[k]
        if w == 0.0:
            continue
        d = model.deltas[k]
        out.centers += w * d.centers
        out.scales_raw += w * d.scales_raw
        out.rotations_raw += w * d.rotations_raw
        out.opacities_raw += w * d.opacities_raw
        out.sh += w * d.sh
    return out


def _nearest_rotations(linear: np.ndarray) -> np.ndarray:
    """Project (N, 3, 3) matrices onto SO(3).

    Polar decomposition via batched SVD with a determinant sign fix; falls
    back to Gram-Schmidt orthonormalization if SVD fails to converge.
    """
    try:
        u, _, vt = np.linalg.svd(linear)
        det = np.linalg.det(u @ vt)
        u = u.copy()
        u[det < 0, :, 2] *= -1.0
        return u @ vt
    except np.linalg.LinAlgError:
        out = np.empty_like(linear)
        for i, m in enumerate(linear):
            a = m[:, 0] / np.linalg.norm(m[:, 0])
            b = m[:, 1] - np.dot(m[:, 1], a) * a
            b = b / np.linalg.norm(b)
            c = np.cross(a, b)
            out[i] = np.stack([a, b, c], axis=1)
        return out


def _skin(act, raw: GaussianSet, skin_affine: np.ndarray) -> PosedGaussianSet:
    """Apply per-Gaussian (N, 3, 4) affines to an activated set."""
    linear = skin_affine[:, :, :3]
    offset = skin_affine[:, :, 3]
    centers = np.einsum("nij,nj->ni", linear, act.centers) + offset
    rot = _nearest_rotations(linear)
    skin_quat = matrix_to_quaternion(rot)
    rotations = quaternion_multiply(skin_quat, act.rotations)
    return PosedGaussianSet(
        centers=centers,
        scales=act.scales,
        rotations=rotations,
        opacities=act.opacities,
        sh=act.sh,
        source=raw,
        skin_linear=linear,
        skin_quat=skin_quat,
        rotations_local=act.rotations,
    )


def lbs(gaussians: GaussianSet, weights: np.ndarray, pose: PoseParams) -> PosedGaussianSet:
    """Linear blend skinning of a raw Gaussian set.

    Activates the set, then moves each Gaussian by its weight-blended joint
    transform.  With all joints at identity the result equals
    ``activate(gaussians)`` exactly.

    Args:
        gaussians: raw parameters (typically the output of blend_expression).
        weights: (N, J) skinning weights; every row must sum to 1 within 1e-4.
        pose: J rigid joint transforms.

    Raises:
        ValidationError: on shape mismatch or a weight row whose sum deviates
            from 1 by more than 1e-4 (names the row).
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = len(gaussians)
    if weights.ndim != 2 or weights.shape[0] != n:
        raise ValidationError(f"weights must be ({n}, J), got {weights.shape}")
    if weights.shape[1] != pose.num_joints:
        raise ValidationError(
            f"weights bind {weights.shape[1]} joints, pose has {pose.num_joints}")
    sums = weights.sum(axis=1)
    bad = np.abs(sums - 1.0) > WEIGHT_ROW_SUM_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValidationError(
            f"skinning weight row {i} sums to {sums[i]:.6f}, expected 1 within {WEIGHT_ROW_SUM_TOL}")
    act = activate(gaussians)
    skin_affine = np.einsum("nj,jkl->nkl", weights, pose.joints)
    return _skin(act, gaussians, skin_affine)


def pose_mouth(mouth: GaussianSet, pose: PoseParams, joint: int) -> PosedGaussianSet:
    """Rigidly bind the mouth set to one joint.

    Equivalent to :func:`lbs` with weight 1.0 on ``joint``.

    Raises:
        ValidationError: if ``joint`` is out of range.
    """
    if not (0 <= joint < pose.num_joints):
        raise ValidationError(
            f"mouth joint {joint} out of range for {pose.num_joints} joints")
    act = activate(mouth)
    skin_affine = np.broadcast_to(pose.joints[joint], (len(mouth), 3, 4)).copy()
    return _skin(act, mouth, skin_affine)


def merge(sets: list) -> PosedGaussianSet:
    """Concatenate posed sets (head + mouth) into one renderable set."""
    if not sets:
        raise ValidationError("cannot merge zero posed sets")
    if len(sets) == 1:
        return sets[0]
    return PosedGaussianSet(
        centers=np.concatenate([s.centers for s in sets]),
        scales=np.concatenate([s.scales for s in sets]),
        rotations=np.concatenate([s.rotations for s in sets]),
        opacities=np.concatenate([s.opacities for s in sets]),
        sh=np.concatenate([s.sh for s in sets]),
        source=GaussianSet.concatenate([s.source for s in sets]),
        skin_linear=np.concatenate([s.skin_linear for s in sets]),
        skin_quat=np.concatenate([s.skin_quat for s in sets]),
        rotations_local=np.concatenate([s.rotations_local for s in sets]),
    )


def pose_model(model: BlendshapeModel, coeffs: ExpressionCoeffs,
               pose: PoseParams) -> PosedGaussianSet:
    """Blend, skin, and merge the full rig for one frame.

    Head Gaussians go through expression blending then weighted skinning;
    mouth Gaussians are expression-invariant and follow the mouth joint
    rigidly.  The merged set keeps head Gaussians first, mouth last.
    """
    blended = blend_expression(model, coeffs)
    head = lbs(blended, model.weights, pose)
    mouth = pose_mouth(model.mouth, pose, model.mouth_joint)
    return merge([head, mouth])
