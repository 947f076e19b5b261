"""Optimization loop: per-property-group Adam over all blendshape parameters.

Each training step renders one sampled frame, evaluates the total objective,
backpropagates through the rasterizer, and routes the per-Gaussian gradients
to the owning parameters: the blended head gradient flows to the neutral
basis with factor 1 and to each delta set with factor psi_k; the mouth
gradient flows to the mouth set directly, with the cylinder term added on
its centers.  Learning rates follow the five property groups.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import assets
from .blendpose import pose_model
from .errors import ValidationError
from .losses import CylinderVolume, LossWeights, fit_mouth_cylinder, total_loss
from .metrics import psnr, ssim
from .model import BlendshapeModel, GaussianSet, inverse_sigmoid
from .rasterizer import rasterize_backward, render

PROPERTIES = ("centers", "scales_raw", "rotations_raw", "opacities_raw", "sh")
PROPERTY_GROUP = {
    "centers": "center",
    "scales_raw": "scale",
    "rotations_raw": "rotation",
    "opacities_raw": "opacity",
    "sh": "sh",
}


@dataclass
class TrainConfig:
    """Optimizer hyperparameters and objective configuration.

    Default learning rates per property group: center 3.2e-7, opacity 5e-5,
    scale 5e-4, rotation 1e-4, SH 1.25e-3; Adam beta1 0.9, beta2 0.999,
    eps 1e-8.  ``lr_decay`` is an optional per-iteration exponential factor
    (1.0 = constant rates); ``scene_extent`` multiplies the center rate.
    """

    lr_center: float = 3.2e-7
    lr_opacity: float = 5e-5
    lr_scale: float = 5e-4
    lr_rotation: float = 1e-4
    lr_sh: float = 1.25e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 500
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    volume: Optional[CylinderVolume] = None
    neutral_count: int = 50000
    mouth_count: int = 14000
    scene_extent: float = 1.0
    lr_decay: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    threads: Optional[int] = None

    def __post_init__(self):
        for name in ("lr_center", "lr_opacity", "lr_scale", "lr_rotation", "lr_sh"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValidationError("Adam eps must be positive")
        if self.neutral_count <= 0 or self.mouth_count <= 0:
            raise ValidationError("Gaussian counts must be positive")
        if self.iterations < 0:
            raise ValidationError("iteration count must be nonnegative")
        if self.lr_decay <= 0 or self.lr_decay > 1.0:
            raise ValidationError("lr_decay must lie in (0, 1]")

    def group_rate(self, group: str) -> float:
        rate = {
            "center": self.lr_center * self.scene_extent,
            "opacity": self.lr_opacity,
            "scale": self.lr_scale,
            "rotation": self.lr_rotation,
            "sh": self.lr_sh,
        }[group]
        return rate


def parameter_items(model: BlendshapeModel) -> list:
    """Canonical (key, array) list of every optimized parameter array.

    Order: neutral block, delta blocks, mouth block; properties in the
    model-file order within each block.  Skinning weights are fixed inputs
    and do not appear.
    """
    items = []
    for prop in PROPERTIES:
        items.append((("neutral", prop), getattr(model.neutral, prop)))
    for k, d in enumerate(model.deltas):
        for prop in PROPERTIES:
            items.append((("delta", k, prop), getattr(d, prop)))
    for prop in PROPERTIES:
        items.append((("mouth", prop), getattr(model.mouth, prop)))
    return items


@dataclass
class TrainState:
    """Model plus Adam moment buffers, step counter, and sampling seed."""

    model: BlendshapeModel
    m: dict
    v: dict
    iteration: int = 0
    seed: int = 0

    @staticmethod
    def create(model: BlendshapeModel, seed: int = 0) -> "TrainState":
        m = {key: np.zeros_like(arr) for key, arr in parameter_items(model)}
        v = {key: np.zeros_like(arr) for key, arr in parameter_items(model)}
        return TrainState(model=model, m=m, v=v, iteration=0, seed=seed)


def _group_of(key) -> str:
    return PROPERTY_GROUP[key[-1]]


def adam_step(state: TrainState, grads: dict, config: TrainConfig) -> TrainState:
    """One bias-corrected Adam update over every parameter array, in place.

    Args:
        state: current train state; moments and model are updated in place.
        grads: mapping from parameter key to gradient array (missing keys are
            treated as zero gradient).
        config: provides per-group rates and Adam constants.

    Raises:
        ValidationError: non-finite gradient (names parameter group and the
            first offending flat index) or shape mismatch.
    """
    t = state.iteration + 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    decay = config.lr_decay ** state.iteration if config.lr_decay != 1.0 else 1.0
    for key, param in parameter_items(state.model):
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(param)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != param.shape:
            raise ValidationError(
                f"gradient for {'.'.join(map(str, key))} has shape {g.shape}, "
                f"parameter has {param.shape}")
        finite = np.isfinite(g)
        if not finite.all():
            idx = int(np.argmin(finite.reshape(-1)))
            raise ValidationError(
                f"non-finite gradient in group '{_group_of(key)}' "
                f"({'.'.join(map(str, key))}) at index {idx}")
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        rate = config.group_rate(_group_of(key)) * decay
        param -= rate * (m / bias1) / (np.sqrt(v / bias2) + config.eps)
    state.iteration = t
    return state


def train_step(state: TrainState, frame: assets.FrameData,
               config: TrainConfig) -> tuple:
    """One optimization step against a single target frame.

    Pipeline: blend -> skin -> pose mouth -> merge -> render -> loss ->
    render backward -> route gradients (neutral x1, delta k x psi_k, mouth
    plus the cylinder term on centers) -> adam step.

    Returns:
        (state, breakdown) where breakdown holds total and per-term losses.
    """
    if frame.image is None or frame.mask is None:
        raise ValidationError(f"frame {frame.index} has no target image/mask")
    model = state.model
    posed = pose_model(model, frame.coeffs, frame.pose)
    out = render(posed, frame.camera, config.background, threads=config.threads)
    tl = total_loss(out.rgb, frame.image, out.alpha, frame.mask,
                    mouth_centers=model.mouth.centers,
                    volume=config.volume, weights=config.weights)
    gset = rasterize_backward(out, tl.d_rgb, tl.d_alpha, threads=config.threads)

    n_head = len(model.neutral)
    head = gset.slice(0, n_head)
    mouth = gset.slice(n_head, n_head + len(model.mouth))
    grads = {
        ("neutral", "centers"): head.d_centers,
        ("neutral", "scales_raw"): head.d_scales_raw,
        ("neutral", "rotations_raw"): head.d_rotations_raw,
        ("neutral", "opacities_raw"): head.d_opacities_raw,
        ("neutral", "sh"): head.d_sh,
        ("mouth", "centers"): mouth.d_centers + tl.d_mouth_centers,
        ("mouth", "scales_raw"): mouth.d_scales_raw,
        ("mouth", "rotations_raw"): mouth.d_rotations_raw,
        ("mouth", "opacities_raw"): mouth.d_opacities_raw,
        ("mouth", "sh"): mouth.d_sh,
    }
    psi = frame.coeffs.psi
    for k in range(model.num_expressions):
        w = psi[k]
        grads[("delta", k, "centers")] = w * head.d_centers
        grads[("delta", k, "scales_raw")] = w * head.d_scales_raw
        grads[("delta", k, "rotations_raw")] = w * head.d_rotations_raw
        grads[("delta", k, "opacities_raw")] = w * head.d_opacities_raw
        grads[("delta", k, "sh")] = w * head.d_sh

    state = adam_step(state, grads, config)
    breakdown = {
        "loss": tl.value, "l_rgb": tl.l_rgb,
        "l_alpha": tl.l_alpha, "l_reg": tl.l_reg,
    }
    return state, breakdown


@dataclass
class InitSpec:
    """Geometry hints for model initialization.

    Neutral centers come from ``surface_points`` when provided, otherwise
    uniform samples inside the ellipsoid.  Mouth centers are sampled inside
    ``volume``.  ``joint_positions`` drive the nearest-joint skinning weight
    heuristic; without them every Gaussian binds to joint 0.
    """

    n_expressions: int
    n_joints: int
    volume: CylinderVolume
    mouth_joint: int = 0
    seed: int = 0
    ellipsoid_center: tuple = (0.0, 0.0, 0.0)
    ellipsoid_radii: tuple = (0.3, 0.3, 0.3)
    surface_points: Optional[np.ndarray] = None
    joint_positions: Optional[np.ndarray] = None
    sh_degree: int = 0


def _nn_scale(centers: np.ndarray) -> float:
    from scipy.spatial import cKDTree
    if centers.shape[0] < 2:
        return np.log(0.05)
    tree = cKDTree(centers)
    dist, _ = tree.query(centers, k=2)
    return float(np.log(max(np.mean(dist[:, 1]), 1e-6)))


def _init_gaussians(centers: np.ndarray, sh_degree: int) -> GaussianSet:
    n = centers.shape[0]
    k = (sh_degree + 1) ** 2
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianSet(
        centers=centers,
        scales_raw=np.full((n, 3), _nn_scale(centers)),
        rotations_raw=rotations,
        opacities_raw=np.full(n, float(inverse_sigmoid(np.asarray(0.1)))),
        sh=np.zeros((n, k, 3)),
    )


def initialize_model(config: TrainConfig, init: InitSpec) -> BlendshapeModel:
    """Fresh model: sampled neutral and mouth sets, zero deltas.

    Opacities start at sigmoid^-1(0.1) and scales at the log of the mean
    nearest-neighbor distance of the sampled centers.  Deterministic per
    ``init.seed``.
    """
    if config.neutral_count <= 0 or config.mouth_count <= 0:
        raise ValidationError("Gaussian counts must be positive")
    if init.n_expressions < 0 or init.n_joints <= 0:
        raise ValidationError("need n_expressions >= 0 and n_joints >= 1")
    if not (0 <= init.mouth_joint < init.n_joints):
        raise ValidationError(
            f"mouth joint {init.mouth_joint} out of range for {init.n_joints} joints")
    rng = np.random.default_rng(init.seed)

    if init.surface_points is not None:
        pts = np.asarray(init.surface_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValidationError(f"surface points must be nonempty (P, 3), got {pts.shape}")
        pick = rng.choice(pts.shape[0], size=config.neutral_count,
                          replace=pts.shape[0] < config.neutral_count)
        centers = pts[np.sort(pick)]
    else:
        centers = assets._sample_ball(rng, config.neutral_count, init.ellipsoid_radii)
        centers = centers + np.asarray(init.ellipsoid_center)
    neutral = _init_gaussians(centers, init.sh_degree)

    k = (init.sh_degree + 1) ** 2
    deltas = []
    for _ in range(init.n_expressions):
        deltas.append(GaussianSet(
            centers=np.zeros((config.neutral_count, 3)),
            scales_raw=np.zeros((config.neutral_count, 3)),
            rotations_raw=np.zeros((config.neutral_count, 4)),
            opacities_raw=np.zeros(config.neutral_count),
            sh=np.zeros((config.neutral_count, k, 3)),
        ))

    if init.joint_positions is not None:
        jp = np.asarray(init.joint_positions, dtype=np.float64)
        if jp.shape != (init.n_joints, 3):
            raise ValidationError(
                f"joint positions must be ({init.n_joints}, 3), got {jp.shape}")
        d2 = np.sum((centers[:, None, :] - jp[None, :, :]) ** 2, axis=2)
        nearest = np.argmin(d2, axis=1)
        weights = np.zeros((config.neutral_count, init.n_joints))
        weights[np.arange(config.neutral_count), nearest] = 1.0
    else:
        weights = np.zeros((config.neutral_count, init.n_joints))
        weights[:, 0] = 1.0

    mouth_centers = assets._sample_cylinder(
        rng, config.mouth_count, init.volume.center, init.volume.axis,
        init.volume.radius, init.volume.half_height)
    mouth = _init_gaussians(mouth_centers, init.sh_degree)
    return BlendshapeModel(neutral=neutral, deltas=deltas, weights=weights,
                           mouth=mouth, mouth_joint=init.mouth_joint)


def evaluate(model: BlendshapeModel, frames: list, *,
             background=(0.0, 0.0, 0.0), threads: Optional[int] = None) -> dict:
    """Render each held-out frame and score it against its target image.

    Returns a report with per-frame PSNR/SSIM lists and their means.

    Raises:
        ValidationError: on an empty frame list or frames without targets.
    """
    if not frames:
        raise ValidationError("evaluate needs at least one frame")
    psnrs, ssims = [], []
    for f in frames:
        if f.image is None:
            raise ValidationError(f"frame {f.index} has no target image")
        posed = pose_model(model, f.coeffs, f.pose)
        out = render(posed, f.camera, background, threads=threads)
        psnrs.append(psnr(out.rgb, f.image))
        ssims.append(ssim(out.rgb, f.image))
    return {
        "frames": len(frames),
        "psnr_db": [float(v) for v in psnrs],
        "ssim": [float(v) for v in ssims],
        "mean_psnr_db": float(np.mean(psnrs)),
        "mean_ssim": float(np.mean(ssims)),
    }


def checkpoint_arrays(state: TrainState) -> list:
    """Flatten Adam moments in canonical order for serialization."""
    arrays = []
    for key, _ in parameter_items(state.model):
        arrays.append(state.m[key])
        arrays.append(state.v[key])
    return arrays


def restore_checkpoint_arrays(state: TrainState, arrays: list) -> None:
    items = parameter_items(state.model)
    if len(arrays) != 2 * len(items):
        raise ValidationError(
            f"checkpoint holds {len(arrays)} moment arrays, model needs {2 * len(items)}")
    for i, (key, param) in enumerate(items):
        m = np.asarray(arrays[2 * i], dtype=np.float64)
        v = np.asarray(arrays[2 * i + 1], dtype=np.float64)
        if m.size != param.size or v.size != param.size:
            raise ValidationError(
                f"checkpoint moment size mismatch for {'.'.join(map(str, key))}")
        state.m[key] = m.reshape(param.shape)
        state.v[key] = v.reshape(param.shape)


def sample_frame_index(seed: int, iteration: int, count: int) -> int:
    """Uniform-with-replacement frame index, stateless per (seed, iteration)."""
    rng = np.random.default_rng([seed, iteration])
    return int(rng.integers(0, count))


def train(model: BlendshapeModel, frames: list, config: TrainConfig, *,
          log_file=None, checkpoint_every: int = 0,
          checkpoint_dir=None) -> tuple:
    """Run the full optimization loop.

    Frames are sampled uniformly with replacement per step (seeded).  When
    ``config.volume`` is None, the mouth cylinder is fitted to the initial
    mouth centers (bounding box inflated 10%, jaw-local y axis).

    Returns:
        (state, history) where history is one breakdown dict per step with
        iteration and wall-clock milliseconds added.
    """
    if not frames:
        raise ValidationError("training needs at least one frame")
    if config.volume is None:
        config = replace(config, volume=fit_mouth_cylinder(model.mouth.centers))
    state = TrainState.create(model, seed=config.seed)
    history = []
    for _ in range(config.iterations):
        start = time.perf_counter()
        idx = sample_frame_index(config.seed, state.iteration, len(frames))
        state, breakdown = train_step(state, frames[idx], config)
        breakdown = {"iter": state.iteration, **breakdown,
                     "wall_ms": (time.perf_counter() - start) * 1000.0}
        history.append(breakdown)
        if log_file is not None:
            import json
            log_file.write(json.dumps(breakdown) + "\n")
        if checkpoint_every > 0 and checkpoint_dir is not None \
                and state.iteration % checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"checkpoint_{state.iteration:06d}.gbck"
            assets.save_checkpoint(path, state.model, checkpoint_arrays(state),
                                   state.iteration, state.seed)
    return state, history


def perturb_model(model: BlendshapeModel, seed: int, *,
                  sigma_center: float = 1e-4, sigma_opacity: float = 0.02,
                  sigma_scale: float = 0.1, sigma_rotation: float = 0.02,
                  sigma_sh: float = 0.25) -> BlendshapeModel:
    """Additive Gaussian noise on every raw parameter, for recovery tests."""
    rng = np.random.default_rng(seed)

    def noisy(s: GaussianSet) -> GaussianSet:
        return GaussianSet(
            centers=s.centers + rng.normal(0.0, sigma_center, s.centers.shape),
            scales_raw=s.scales_raw + rng.normal(0.0, sigma_scale, s.scales_raw.shape),
            rotations_raw=s.rotations_raw + rng.normal(0.0, sigma_rotation, s.rotations_raw.shape),
            opacities_raw=s.opacities_raw + rng.normal(0.0, sigma_opacity, s.opacities_raw.shape),
            sh=s.sh + rng.normal(0.0, sigma_sh, s.sh.shape),
        )

    return BlendshapeModel(
        neutral=noisy(model.neutral),
        deltas=[noisy(d) for d in model.deltas],
        weights=model.weights.copy(),
        mouth=noisy(model.mouth),
        mouth_joint=model.mouth_joint,
    )
