"""Shared scene builders for the test suite.

`composite_oracle` is an intentionally naive per-pixel Python loop kept
independent from both rasterizer code paths; several tests compare all
three against each other.
"""

import math

import numpy as np
import pytest

from gblend.model import (
    BlendshapeModel,
    Camera,
    ExpressionCoeffs,
    GaussianSet,
    PoseParams,
)

ALPHA_CUTOFF = 1.0 / 255.0
ALPHA_CLAMP = 0.99
TERMINATION = 1e-4


def random_gaussian_set(rng, n, sh_degree=0, spread=0.2, scale=0.06):
    k = (sh_degree + 1) ** 2
    return GaussianSet(
        centers=rng.normal(0.0, spread, (n, 3)),
        scales_raw=np.log(scale) + rng.normal(0.0, 0.3, (n, 3)),
        rotations_raw=np.concatenate(
            [np.ones((n, 1)), rng.normal(0.0, 0.3, (n, 3))], axis=1),
        opacities_raw=rng.normal(0.8, 0.8, n),
        sh=rng.normal(0.0, 0.5, (n, k, 3)),
    )


def random_delta_set(rng, n, sh_degree=0):
    k = (sh_degree + 1) ** 2
    return GaussianSet(
        centers=rng.normal(0.0, 0.02, (n, 3)),
        scales_raw=rng.normal(0.0, 0.05, (n, 3)),
        rotations_raw=rng.normal(0.0, 0.02, (n, 4)),
        opacities_raw=rng.normal(0.0, 0.1, n),
        sh=rng.normal(0.0, 0.1, (n, k, 3)),
    )


def random_model(rng, n=8, n_mouth=4, n_expr=2, n_joints=2, sh_degree=0):
    weights = rng.uniform(0.1, 1.0, (n, n_joints))
    weights /= weights.sum(axis=1, keepdims=True)
    return BlendshapeModel(
        neutral=random_gaussian_set(rng, n, sh_degree),
        deltas=[random_delta_set(rng, n, sh_degree) for _ in range(n_expr)],
        weights=weights,
        mouth=random_gaussian_set(rng, n_mouth, sh_degree, spread=0.08),
        mouth_joint=n_joints - 1,
    )


def frontal_camera(width, height, distance=2.5, focal_px=None):
    """Camera on +z looking toward the origin down -z."""
    rot = np.diag([1.0, -1.0, -1.0])
    eye = np.array([0.0, 0.0, distance])
    t = -rot @ eye
    f = focal_px if focal_px is not None else distance * width * 0.8
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height,
                  extrinsics=np.hstack([rot, t[:, None]]),
                  near=0.1, far=10.0)


def rotation_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rigid_pose(rotations, translations):
    joints = [np.hstack([r, np.asarray(t, dtype=float)[:, None]])
              for r, t in zip(rotations, translations)]
    return PoseParams(np.stack(joints))


def composite_oracle(records, width, height, background,
                     termination=TERMINATION):
    """Scalar-math per-pixel compositing loop over projected splats.

    Walks the depth-sorted records exactly as the compositing contract
    states: quadratic form at the pixel center, opacity cutoff at 1/255,
    alpha clamp at 0.99, and front-to-back termination BEFORE the splat
    that would push transmittance below the threshold.
    """
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    order = list(range(len(records.depth)))
    for py in range(height):
        for px in range(width):
            t = 1.0
            acc = [0.0, 0.0, 0.0]
            for i in order:
                mx, my = records.mean2d[i]
                r = records.radius[i]
                if not (abs(px + 0.5 - mx) <= r and abs(py + 0.5 - my) <= r):
                    continue
                a_q, b_q, c_q = records.conic[i]
                dx = mx - (px + 0.5)
                dy = my - (py + 0.5)
                power = -0.5 * (a_q * dx * dx + c_q * dy * dy) - b_q * dx * dy
                if power > 0.0:
                    continue
                a = min(ALPHA_CLAMP, records.opacity[i] * math.exp(power))
                if a < ALPHA_CUTOFF:
                    continue
                if t * (1.0 - a) < termination:
                    break
                w = a * t
                for ch in range(3):
                    acc[ch] += records.color[i, ch] * w
                t *= 1.0 - a
            for ch in range(3):
                rgb[py, px, ch] = acc[ch] + t * bg[ch]
            alpha[py, px] = 1.0 - t
    return rgb, alpha


@pytest.fixture
def rng():
    return np.random.default_rng(0)
