"""Core data model: Gaussian sets, blendshape rigs, poses, and cameras.

Raw (unconstrained) parameters are what the optimizer touches and what the
file formats store.  Rendering-ready values come out of :func:`activate`:

* ``scales = exp(scales_raw)``          positive per-axis extents
* ``rotations = q / |q|``               unit quaternions, (w, x, y, z)
* ``opacities = sigmoid(opacities_raw)`` in (0, 1)

Centers and SH coefficients pass through unchanged.  All arrays are float64
in memory; serialization narrows to float32 (see :mod:`gblend.assets`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# Degree-0 spherical harmonics basis constant: band-0 color = 0.5 + C0 * sh0.
SH_C0 = 0.28209479177387814


def sh_coeff_count(degree: int) -> int:
    """Number of SH coefficients per color channel for a given degree."""
    return (degree + 1) ** 2


@dataclass
class GaussianSet:
    """Structure-of-arrays container for N Gaussians with raw parameters.

    Attributes:
        centers: (N, 3) positions.
        scales_raw: (N, 3) log-scales.
        rotations_raw: (N, 4) unnormalized quaternions, (w, x, y, z).
        opacities_raw: (N,) logit opacities.
        sh: (N, K, 3) spherical-harmonic color coefficients, K = (degree+1)^2.
    """

    centers: np.ndarray
    scales_raw: np.ndarray
    rotations_raw: np.ndarray
    opacities_raw: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.scales_raw = np.asarray(self.scales_raw, dtype=np.float64)
        self.rotations_raw = np.asarray(self.rotations_raw, dtype=np.float64)
        self.opacities_raw = np.asarray(self.opacities_raw, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        n = self.centers.shape[0]
        if self.centers.shape != (n, 3):
            raise ValidationError(f"centers must be (N, 3), got {self.centers.shape}")
        if self.scales_raw.shape != (n, 3):
            raise ValidationError(f"scales_raw must be ({n}, 3), got {self.scales_raw.shape}")
        if self.rotations_raw.shape != (n, 4):
            raise ValidationError(f"rotations_raw must be ({n}, 4), got {self.rotations_raw.shape}")
        if self.opacities_raw.shape != (n,):
            raise ValidationError(f"opacities_raw must be ({n},), got {self.opacities_raw.shape}")
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValidationError(f"sh must be ({n}, K, 3), got {self.sh.shape}")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        k = self.sh.shape[1]
        deg = int(round(np.sqrt(k))) - 1
        if sh_coeff_count(deg) != k:
            raise ValidationError(f"sh coefficient count {k} is not a square")
        return deg

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.centers.copy(), self.scales_raw.copy(), self.rotations_raw.copy(),
            self.opacities_raw.copy(), self.sh.copy(),
        )

    @staticmethod
    def concatenate(sets: "list[GaussianSet]") -> "GaussianSet":
        if not sets:
            raise ValidationError("cannot concatenate zero GaussianSets")
        k = {s.sh.shape[1] for s in sets}
        if len(k) != 1:
            raise ValidationError(f"sh coefficient counts differ across sets: {sorted(k)}")
        return GaussianSet(
            np.concatenate([s.centers for s in sets]),
            np.concatenate([s.scales_raw for s in sets]),
            np.concatenate([s.rotations_raw for s in sets]),
            np.concatenate([s.opacities_raw for s in sets]),
            np.concatenate([s.sh for s in sets]),
        )


@dataclass
class ActivatedGaussianSet:
    """Gaussians after activation: render-space parameter values.

    Same layout as :class:`GaussianSet` but scales are positive, rotations
    are unit quaternions, and opacities live in (0, 1).
    """

    centers: np.ndarray      # (N, 3)
    scales: np.ndarray       # (N, 3) positive
    rotations: np.ndarray    # (N, 4) unit quaternions (w, x, y, z)
    opacities: np.ndarray    # (N,) in (0, 1)
    sh: np.ndarray           # (N, K, 3)

    def __len__(self) -> int:
        return self.centers.shape[0]


@dataclass
class BlendshapeModel:
    """Neutral basis, expression deltas, skinning weights, and the mouth set.

    The expression count n and joint count J are data-defined: they are read
    from ``deltas`` and ``weights`` shapes, never assumed.

    Attributes:
        neutral: base Gaussians B0 (N of them).
        deltas: list of n per-expression offsets; each is a GaussianSet-shaped
            bundle of raw-parameter offsets (added to B0 before activation).
        weights: (N, J) skinning weights, rows sum to 1.
        mouth: expression-invariant Gaussians bound rigidly to one joint.
        mouth_joint: joint index the mouth set follows.
    """

    neutral: GaussianSet
    deltas: list
    weights: np.ndarray
    mouth: GaussianSet
    mouth_joint: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = len(self.neutral)
        if self.weights.ndim != 2 or self.weights.shape[0] != n:
            raise ValidationError(
                f"weights must be ({n}, J), got {self.weights.shape}")
        for k, d in enumerate(self.deltas):
            if len(d) != n:
                raise ValidationError(
                    f"delta {k} has {len(d)} Gaussians, neutral has {n}")
            if d.sh.shape != self.neutral.sh.shape:
                raise ValidationError(
                    f"delta {k} sh shape {d.sh.shape} != neutral {self.neutral.sh.shape}")
        if not (0 <= self.mouth_joint < self.weights.shape[1]):
            raise ValidationError(
                f"mouth_joint {self.mouth_joint} out of range for J={self.weights.shape[1]}")

    @property
    def num_expressions(self) -> int:
        return len(self.deltas)

    @property
    def num_joints(self) -> int:
        return self.weights.shape[1]

    @property
    def sh_degree(self) -> int:
        return self.neutral.sh_degree


@dataclass
class PoseParams:
    """Rigid per-joint transforms for one frame.

    Attributes:
        joints: (J, 3, 4) row-major rigid transforms [R | t] applied to
            homogeneous points.
    """

    joints: np.ndarray

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[1:] != (3, 4):
            raise ValidationError(f"joints must be (J, 3, 4), got {self.joints.shape}")

    @property
    def num_joints(self) -> int:
        return self.joints.shape[0]

    @staticmethod
    def identity(num_joints: int) -> "PoseParams":
        j = np.zeros((num_joints, 3, 4))
        j[:, :, :3] = np.eye(3)
        return PoseParams(j)


@dataclass
class ExpressionCoeffs:
    """Blend coefficients psi for one frame, shape (n,)."""

    psi: np.ndarray

    def __post_init__(self):
        self.psi = np.atleast_1d(np.asarray(self.psi, dtype=np.float64))
        if self.psi.ndim != 1:
            raise ValidationError(f"psi must be 1-D, got shape {self.psi.shape}")

    @staticmethod
    def zeros(n: int) -> "ExpressionCoeffs":
        return ExpressionCoeffs(np.zeros(n))


@dataclass
class Camera:
    """Pinhole camera: intrinsics plus a rigid world-to-camera transform.

    The camera looks down +z in its own frame; a point is visible when its
    camera-space depth lies in (near, far).  Pixel (row i, col j) has its
    center at continuous coordinates (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        if self.extrinsics.shape != (3, 4):
            raise ValidationError(f"extrinsics must be (3, 4), got {self.extrinsics.shape}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image size must be positive, got {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0.0 < self.near < self.far):
            raise ValidationError(f"need 0 < near < far, got near={self.near} far={self.far}")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:, 3]

    def world_origin(self) -> np.ndarray:
        """Camera center expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) world points into camera space."""
        return points @ self.rotation.T + self.translation


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form avoids overflow warnings for large |x|.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Normalize (..., 4) quaternions, raising on zero norm.

    Raises:
        ValidationError: naming the first offending index.
    """
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    bad = ~(norms > 0) | ~np.isfinite(norms)
    if np.any(bad):
        idx = int(np.argwhere(bad.reshape(-1))[0][0])
        raise ValidationError(f"quaternion at index {idx} has zero or non-finite norm")
    return q / norms[..., None]


def activate(gaussians: GaussianSet) -> ActivatedGaussianSet:
    """Map raw parameters to render-space values.

    exp on scales, sigmoid on opacities, quaternion normalization on
    rotations; centers and SH pass through.

    Raises:
        ValidationError: if any quaternion has zero norm (names the index).
    """
    return ActivatedGaussianSet(
        centers=gaussians.centers.copy(),
        scales=np.exp(gaussians.scales_raw),
        rotations=normalize_quaternions(gaussians.rotations_raw),
        opacities=sigmoid(gaussians.opacities_raw),
        sh=gaussians.sh.copy(),
    )


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quaternion(m: np.ndarray) -> np.ndarray:
    """Unit quaternions (w >= 0) for (..., 3, 3) rotation matrices.

    Shepperd's method: pick the largest of the four squared components to
    divide by, which is numerically safe for every rotation.
    """
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    mm = m.reshape(-1, 3, 3)
    t = np.einsum("nii->n", mm)
    q = np.empty((mm.shape[0], 4))

    # Candidate squared magnitudes (up to the same positive affine shift).
    cand = np.stack([
        1.0 + t,
        1.0 + 2.0 * mm[:, 0, 0] - t,
        1.0 + 2.0 * mm[:, 1, 1] - t,
        1.0 + 2.0 * mm[:, 2, 2] - t,
    ], axis=1)
    choice = np.argmax(cand, axis=1)

    for c in range(4):
        sel = choice == c
        if not np.any(sel):
            continue
        s = mm[sel]
        if c == 0:
            r = np.sqrt(cand[sel, 0])
            q[sel, 0] = 0.5 * r
            q[sel, 1] = (s[:, 2, 1] - s[:, 1, 2]) / (2.0 * r)
            q[sel, 2] = (s[:, 0, 2] - s[:, 2, 0]) / (2.0 * r)
            q[sel, 3] = (s[:, 1, 0] - s[:, 0, 1]) / (2.0 * r)
        elif c == 1:
            r = np.sqrt(cand[sel, 1])
            q[sel, 0] = (s[:, 2, 1] - s[:, 1, 2]) / (2.0 * r)
            q[sel, 1] = 0.5 * r
            q[sel, 2] = (s[:, 0, 1] + s[:, 1, 0]) / (2.0 * r)
            q[sel, 3] = (s[:, 0, 2] + s[:, 2, 0]) / (2.0 * r)
        elif c == 2:
            r = np.sqrt(cand[sel, 2])
            q[sel, 0] = (s[:, 0, 2] - s[:, 2, 0]) / (2.0 * r)
            q[sel, 1] = (s[:, 0, 1] + s[:, 1, 0]) / (2.0 * r)
            q[sel, 2] = 0.5 * r
            q[sel, 3] = (s[:, 1, 2] + s[:, 2, 1]) / (2.0 * r)
        else:
            r = np.sqrt(cand[sel, 3])
            q[sel, 0] = (s[:, 1, 0] - s[:, 0, 1]) / (2.0 * r)
            q[sel, 1] = (s[:, 0, 2] + s[:, 2, 0]) / (2.0 * r)
            q[sel, 2] = (s[:, 1, 2] + s[:, 2, 1]) / (2.0 * r)
            q[sel, 3] = 0.5 * r

    # Canonical sign: non-negative scalar part.
    flip = q[:, 0] < 0
    q[flip] = -q[flip]
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    q = q / norms
    return q.reshape(batch + (4,))


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b for (..., 4) quaternions (w, x, y, z)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def covariance3d(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """World-space covariances R diag(s^2) R^T for activated parameters.

    Args:
        scales: (..., 3) positive scales.
        rotations: (..., 4) unit quaternions.

    Returns:
        (..., 3, 3) symmetric positive semi-definite covariance matrices.
    """
    r = quaternion_to_matrix(rotations)
    m = r * np.asarray(scales, dtype=np.float64)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)
