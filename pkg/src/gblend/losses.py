"""Training objective: photometric, opacity, and mouth-volume terms.

The total objective is ``lambda1 * L_rgb + lambda2 * L_alpha + lambda3 *
L_reg`` where L_rgb mixes L1 with D-SSIM, L_alpha is the mean squared
difference between accumulated opacity and the head mask, and L_reg pushes
mouth-Gaussian centers back inside a fixed cylinder.  Every term comes with
its analytic gradient so the render backward pass can be driven directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _ssim
from .errors import ValidationError


@dataclass
class LossWeights:
    """Objective weights; all must be nonnegative."""

    lambda1: float = 1.0     # rgb term
    lambda2: float = 10.0    # alpha term
    lambda3: float = 100.0   # mouth volume term
    lambda_rgb: float = 0.2  # L1 share inside the rgb term

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_rgb"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")


@dataclass
class CylinderVolume:
    """Finite cylinder: center, unit axis, radius, and half height."""

    center: np.ndarray
    axis: np.ndarray
    radius: float
    half_height: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(self.axis)
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"cylinder axis norm {norm:.8f} must be 1 within 1e-6")
        if self.radius <= 0 or self.half_height <= 0:
            raise ValidationError("cylinder radius and half_height must be positive")


def _check_same_shape(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"{what} shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1(img, target) -> float:
    """Mean absolute difference over all pixels and channels."""
    a, b = _check_same_shape(img, target, "l1 image")
    return float(np.mean(np.abs(a - b)))


def l1_with_grad(img, target):
    a, b = _check_same_shape(img, target, "l1 image")
    diff = a - b
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def dssim(img, target) -> float:
    """Structural dissimilarity (1 - SSIM) / 2."""
    return (1.0 - _ssim.ssim(img, target)) / 2.0


def dssim_with_grad(img, target):
    value, grad = _ssim.ssim_with_grad(img, target)
    return (1.0 - value) / 2.0, -0.5 * grad


def rgb_loss(img, target, lambda_rgb: float = 0.2) -> float:
    """Photometric term: lambda_rgb * L1 + (1 - lambda_rgb) * D-SSIM."""
    return lambda_rgb * l1(img, target) + (1.0 - lambda_rgb) * dssim(img, target)


def rgb_loss_with_grad(img, target, lambda_rgb: float = 0.2):
    v1, g1 = l1_with_grad(img, target)
    v2, g2 = dssim_with_grad(img, target)
    return (lambda_rgb * v1 + (1.0 - lambda_rgb) * v2,
            lambda_rgb * g1 + (1.0 - lambda_rgb) * g2)


def alpha_loss(alpha_frames, mask_frames) -> float:
    """Mean over frames of the per-pixel MSE between opacity and mask."""
    if len(alpha_frames) != len(mask_frames):
        raise ValidationError(
            f"{len(alpha_frames)} opacity frames vs {len(mask_frames)} masks")
    if len(alpha_frames) == 0:
        raise ValidationError("alpha_loss needs at least one frame")
    total = 0.0
    for i, (a, m) in enumerate(zip(alpha_frames, mask_frames)):
        a, m = _check_same_shape(a, m, f"alpha frame {i}")
        total += float(np.mean((a - m) ** 2))
    return total / len(alpha_frames)


def alpha_loss_with_grad(alpha, mask):
    """Single-frame alpha loss and its gradient w.r.t. the opacity image."""
    a, m = _check_same_shape(alpha, mask, "alpha frame")
    diff = a - m
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def cylinder_sdf(x, volume: CylinderVolume):
    """Exact signed distance to a finite cylinder.

    Negative strictly inside, zero on the surface, positive outside.
    Accepts a single 3-vector or an (..., 3) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x) - volume.center
    axial = pts @ volume.axis
    radial_vec = pts - axial[..., None] * volume.axis
    radial = np.linalg.norm(radial_vec, axis=-1)
    d_r = radial - volume.radius
    d_a = np.abs(axial) - volume.half_height
    outside = np.sqrt(np.maximum(d_r, 0.0) ** 2 + np.maximum(d_a, 0.0) ** 2)
    inside = np.minimum(np.maximum(d_r, d_a), 0.0)
    sdf = inside + outside
    return float(sdf[0]) if single else sdf


def reg_loss(mouth_centers, volume: CylinderVolume) -> float:
    """Mean squared positive signed distance of mouth centers to V."""
    centers = np.asarray(mouth_centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise ValidationError(f"mouth centers must be (N, 3), got {centers.shape}")
    if centers.shape[0] == 0:
        return 0.0
    sdf = cylinder_sdf(centers, volume)
    return float(np.mean(np.maximum(sdf, 0.0) ** 2))


def reg_loss_with_grad(mouth_centers, volume: CylinderVolume):
    centers = np.asarray(mouth_centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise ValidationError(f"mouth centers must be (N, 3), got {centers.shape}")
    n = centers.shape[0]
    if n == 0:
        return 0.0, np.zeros((0, 3))
    pts = centers - volume.center
    axial = pts @ volume.axis
    radial_vec = pts - axial[:, None] * volume.axis
    radial = np.linalg.norm(radial_vec, axis=1)
    d_r = radial - volume.radius
    d_a = np.abs(axial) - volume.half_height
    pos_r = np.maximum(d_r, 0.0)
    pos_a = np.maximum(d_a, 0.0)
    outside = np.sqrt(pos_r ** 2 + pos_a ** 2)
    sdf = np.minimum(np.maximum(d_r, d_a), 0.0) + outside
    value = float(np.mean(np.maximum(sdf, 0.0) ** 2))

    # Gradient only flows where sdf > 0, where sdf equals the outside norm.
    grad = np.zeros_like(centers)
    out = sdf > 0.0
    if np.any(out):
        safe_r = np.where(radial > 0.0, radial, 1.0)
        safe_out = np.where(outside > 0.0, outside, 1.0)
        grad_r = radial_vec / safe_r[:, None]          # d radial / d x
        grad_a = np.sign(axial)[:, None] * volume.axis  # d |axial| / d x
        dsdf = (pos_r[:, None] * grad_r + pos_a[:, None] * grad_a) / safe_out[:, None]
        grad[out] = (2.0 / n) * sdf[out, None] * dsdf[out]
    return value, grad


def combine(l_rgb: float, l_alpha: float, l_reg: float,
            weights: LossWeights) -> float:
    """Weighted total: lambda1 * L_rgb + lambda2 * L_alpha + lambda3 * L_reg."""
    return (weights.lambda1 * l_rgb + weights.lambda2 * l_alpha
            + weights.lambda3 * l_reg)


@dataclass
class TotalLoss:
    """Total objective value, per-term breakdown, and input gradients."""

    value: float
    l_rgb: float
    l_alpha: float
    l_reg: float
    d_rgb: np.ndarray            # (H, W, 3) gradient w.r.t. rendered rgb
    d_alpha: np.ndarray          # (H, W) gradient w.r.t. accumulated opacity
    d_mouth_centers: np.ndarray  # (Nm, 3) gradient w.r.t. mouth centers


def total_loss(rgb, target, alpha, mask, mouth_centers=None,
               volume: Optional[CylinderVolume] = None,
               weights: Optional[LossWeights] = None) -> TotalLoss:
    """Full objective for one frame, with gradients for the backward chain.

    Args:
        rgb, target: (H, W, 3) rendered and reference images in [0, 1].
        alpha, mask: (H, W) accumulated opacity and binary head mask.
        mouth_centers: (Nm, 3) rest-space mouth centers, or None to skip the
            volume term.
        volume: cylinder for the mouth term; required when centers are given.
        weights: term weights, defaults LossWeights().

    Returns:
        TotalLoss; gradients are already scaled by the lambdas.
    """
    w = weights if weights is not None else LossWeights()
    v_rgb, g_rgb = rgb_loss_with_grad(rgb, target, w.lambda_rgb)
    v_alpha, g_alpha = alpha_loss_with_grad(alpha, mask)
    if mouth_centers is not None:
        if volume is None:
            raise ValidationError("mouth centers given without a cylinder volume")
        v_reg, g_reg = reg_loss_with_grad(mouth_centers, volume)
    else:
        v_reg, g_reg = 0.0, np.zeros((0, 3))
    return TotalLoss(
        value=combine(v_rgb, v_alpha, v_reg, w),
        l_rgb=v_rgb, l_alpha=v_alpha, l_reg=v_reg,
        d_rgb=w.lambda1 * g_rgb,
        d_alpha=w.lambda2 * g_alpha,
        d_mouth_centers=w.lambda3 * g_reg,
    )


def fit_mouth_cylinder(mouth_centers, axis=(0.0, 1.0, 0.0),
                       inflate: float = 0.1) -> CylinderVolume:
    """Fit the default mouth cylinder around initialized mouth centers.

    Axis defaults to jaw-local y; radius and half height come from the
    centers' bounding box along/around the axis, inflated by 10%.
    """
    centers = np.asarray(mouth_centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3 or centers.shape[0] == 0:
        raise ValidationError(f"mouth centers must be nonempty (N, 3), got {centers.shape}")
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    mid = 0.5 * (centers.max(axis=0) + centers.min(axis=0))
    rel = centers - mid
    axial = rel @ axis
    radial = np.linalg.norm(rel - axial[:, None] * axis, axis=1)
    center = mid + axis * 0.5 * (axial.max() + axial.min())
    half_height = 0.5 * (axial.max() - axial.min()) * (1.0 + inflate)
    radius = radial.max() * (1.0 + inflate)
    return CylinderVolume(center=center, axis=axis,
                          radius=max(radius, 1e-6),
                          half_height=max(half_height, 1e-6))
