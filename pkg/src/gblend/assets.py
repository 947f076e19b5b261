"""File formats and dataset generation.

Three on-disk formats make up the data contract:

* Model files (``.gbav``): binary, little-endian.  Layout:

  ========  =====  ==========================================
  offset    size   field
  ========  =====  ==========================================
  0         4      magic ``GBAV``
  4         4      format version, u32 (currently 1)
  8         4      N, neutral Gaussian count, u32
  12        4      n, expression count, u32
  16        4      J, joint count, u32
  20        4      mouth Gaussian count, u32
  24        4      sh_degree, u32
  28        4      mouth joint index, u32
  32        ...    float32 arrays, order below
  ========  =====  ==========================================

  Array order (all little-endian float32, row-major): neutral block
  (centers Nx3, scales_raw Nx3, rotations_raw Nx4, opacities_raw N,
  sh NxKx3 with K = (sh_degree+1)^2), then n delta blocks with the same
  five arrays, then skinning weights NxJ, then the mouth block (same five
  arrays with the mouth count).  In-memory parameters are float64; files
  narrow to float32, so load-save round-trips are byte-exact while
  save-load recovers the float32-rounded values.

* Checkpoint files (``.gbck``): magic ``GBCK``, u32 version, u32 iteration,
  u64 seed, an embedded model block (the full ``.gbav`` byte string,
  u64-length-prefixed), then u32 array count followed by u64-length-prefixed
  float32 optimizer arrays in the trainer's canonical parameter order.

* Frame parameters: one JSON document per sequence (``params.json``) with
  per-frame expression coefficients, row-major 3x4 joint transforms, and the
  camera; target images ``frame_%05d.png`` and masks ``mask_%05d.png`` sit
  next to it and are discovered by frame index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .blendpose import pose_model
from .errors import (
    BadMagicError,
    CountMismatchError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)
from .model import (
    BlendshapeModel,
    Camera,
    ExpressionCoeffs,
    GaussianSet,
    PoseParams,
    inverse_sigmoid,
    sh_coeff_count,
)

MODEL_MAGIC = b"GBAV"
MODEL_VERSION = 1
CHECKPOINT_MAGIC = b"GBCK"
CHECKPOINT_VERSION = 1
FRAMES_FORMAT = "gblend-frames"
FRAMES_VERSION = 1
FRAME_IMAGE_PATTERN = "frame_{:05d}.png"
FRAME_MASK_PATTERN = "mask_{:05d}.png"
PARAMS_NAME = "params.json"
GT_MODEL_NAME = "gt_model.gbav"


# ---------------------------------------------------------------------------
# Model files


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, nbytes: int, what: str) -> bytes:
        if self.off + nbytes > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: truncated while reading {what} "
                f"(need {nbytes} bytes at offset {self.off}, have {len(self.data) - self.off})")
        out = self.data[self.off:self.off + nbytes]
        self.off += nbytes
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f32_array(self, count: int, shape, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def _gaussian_block_bytes(s: GaussianSet) -> bytes:
    parts = [
        s.centers.astype("<f4").tobytes(),
        s.scales_raw.astype("<f4").tobytes(),
        s.rotations_raw.astype("<f4").tobytes(),
        s.opacities_raw.astype("<f4").tobytes(),
        s.sh.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def _read_gaussian_block(r: _Reader, n: int, k: int, what: str) -> GaussianSet:
    return GaussianSet(
        centers=r.f32_array(n * 3, (n, 3), f"{what} centers"),
        scales_raw=r.f32_array(n * 3, (n, 3), f"{what} scales"),
        rotations_raw=r.f32_array(n * 4, (n, 4), f"{what} rotations"),
        opacities_raw=r.f32_array(n, (n,), f"{what} opacities"),
        sh=r.f32_array(n * k * 3, (n, k, 3), f"{what} sh"),
    )


def model_to_bytes(model: BlendshapeModel) -> bytes:
    n = len(model.neutral)
    header = MODEL_MAGIC + struct.pack(
        "<IIIIII", MODEL_VERSION, n, model.num_expressions, model.num_joints,
        len(model.mouth), model.sh_degree) + struct.pack("<I", model.mouth_joint)
    parts = [header, _gaussian_block_bytes(model.neutral)]
    for d in model.deltas:
        parts.append(_gaussian_block_bytes(d))
    parts.append(model.weights.astype("<f4").tobytes())
    parts.append(_gaussian_block_bytes(model.mouth))
    return b"".join(parts)


def model_from_bytes(data: bytes, path: str = "<bytes>") -> BlendshapeModel:
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    version = r.u32("version")
    if version != MODEL_VERSION:
        raise VersionError(f"{path}: unsupported model version {version}")
    n = r.u32("N")
    n_expr = r.u32("n")
    n_joints = r.u32("J")
    n_mouth = r.u32("mouth N")
    sh_degree = r.u32("sh_degree")
    mouth_joint = r.u32("mouth joint")
    if sh_degree > 3:
        raise CountMismatchError(f"{path}: sh_degree {sh_degree} out of supported range 0..3")
    if n_joints == 0:
        raise CountMismatchError(f"{path}: joint count must be >= 1")
    if mouth_joint >= n_joints:
        raise CountMismatchError(
            f"{path}: mouth joint {mouth_joint} out of range for J={n_joints}")
    k = sh_coeff_count(sh_degree)
    neutral = _read_gaussian_block(r, n, k, "neutral")
    deltas = [_read_gaussian_block(r, n, k, f"delta {i}") for i in range(n_expr)]
    weights = r.f32_array(n * n_joints, (n, n_joints), "weights")
    mouth = _read_gaussian_block(r, n_mouth, k, "mouth")
    if r.off != len(data):
        raise CountMismatchError(
            f"{path}: {len(data) - r.off} trailing bytes beyond declared counts")
    return BlendshapeModel(neutral=neutral, deltas=deltas, weights=weights,
                           mouth=mouth, mouth_joint=mouth_joint)


def save_model(path, model: BlendshapeModel) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> BlendshapeModel:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"model file not found: {p}")
    return model_from_bytes(p.read_bytes(), str(p))


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_to_bytes(model: BlendshapeModel, arrays, iteration: int,
                        seed: int) -> bytes:
    model_bytes = model_to_bytes(model)
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, iteration),
        struct.pack("<Q", seed),
        struct.pack("<Q", len(model_bytes)),
        model_bytes,
        struct.pack("<I", len(arrays)),
    ]
    for arr in arrays:
        flat = np.asarray(arr).astype("<f4").reshape(-1)
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes, path: str = "<bytes>"):
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    iteration = r.u32("iteration")
    seed = r.u64("seed")
    model_len = r.u64("model length")
    model = model_from_bytes(r.take(model_len, "model block"), path)
    count = r.u32("array count")
    arrays = []
    for i in range(count):
        size = r.u64(f"array {i} length")
        arrays.append(r.f32_array(size, (size,), f"array {i}"))
    if r.off != len(data):
        raise CountMismatchError(
            f"{path}: {len(data) - r.off} trailing bytes beyond declared counts")
    return model, arrays, iteration, seed


def save_checkpoint(path, model: BlendshapeModel, arrays, iteration: int,
                    seed: int) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model, arrays, iteration, seed))


def load_checkpoint(path):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"checkpoint file not found: {p}")
    return checkpoint_from_bytes(p.read_bytes(), str(p))


# ---------------------------------------------------------------------------
# Images


def load_image(path) -> np.ndarray:
    """Decode a PNG or PPM image to (H, W, 3) floats in [0, 1]."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"image file not found: {p}")
    with Image.open(p) as img:
        arr = np.asarray(img.convert("RGB"))
    return arr.astype(np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    """Decode a mask image to a binary (H, W) float array (threshold 0.5)."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"mask file not found: {p}")
    with Image.open(p) as img:
        arr = np.asarray(img.convert("L")).astype(np.float64) / 255.0
    return (arr >= 0.5).astype(np.float64)


def save_image(path, array: np.ndarray) -> None:
    """Encode a [0, 1] float image (rgb or grayscale) as 8-bit PNG/PPM."""
    arr = np.asarray(array, dtype=np.float64)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(Path(path))


# ---------------------------------------------------------------------------
# Frame parameters and sequences


@dataclass
class FrameData:
    """One frame: expression, pose, camera, and (optionally) target images."""

    index: int
    coeffs: ExpressionCoeffs
    pose: PoseParams
    camera: Camera
    image: Optional[np.ndarray] = None   # (H, W, 3) in [0, 1]
    mask: Optional[np.ndarray] = None    # (H, W) binary


def _camera_to_json(camera: Camera) -> dict:
    return {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "width": camera.width, "height": camera.height,
        "near": camera.near, "far": camera.far,
        "extrinsics": [float(v) for v in camera.extrinsics.reshape(-1)],
    }


def _camera_from_json(obj: dict, where: str) -> Camera:
    try:
        ext = np.asarray(obj["extrinsics"], dtype=np.float64)
        if ext.size != 12:
            raise ValidationError(f"{where}: camera extrinsics need 12 values, got {ext.size}")
        return Camera(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
            extrinsics=ext.reshape(3, 4),
            near=float(obj.get("near", 0.01)), far=float(obj.get("far", 100.0)),
        )
    except KeyError as e:
        raise ValidationError(f"{where}: camera is missing field {e.args[0]!r}")


def save_frame_params(path, frames: list, n_expressions: int, n_joints: int,
                      fps: Optional[float] = None) -> None:
    """Write the per-sequence JSON parameter document."""
    records = []
    for f in frames:
        if f.coeffs.psi.shape[0] != n_expressions:
            raise ValidationError(
                f"frame {f.index}: psi length {f.coeffs.psi.shape[0]} != n {n_expressions}")
        if f.pose.num_joints != n_joints:
            raise ValidationError(
                f"frame {f.index}: {f.pose.num_joints} joints != J {n_joints}")
        records.append({
            "index": f.index,
            "psi": [float(v) for v in f.coeffs.psi],
            "joints": [[float(v) for v in j.reshape(-1)] for j in f.pose.joints],
            "camera": _camera_to_json(f.camera),
        })
    doc = {
        "format": FRAMES_FORMAT,
        "version": FRAMES_VERSION,
        "n_expressions": n_expressions,
        "n_joints": n_joints,
        "frames": records,
    }
    if fps is not None:
        doc["fps"] = fps
    Path(path).write_text(json.dumps(doc, indent=1))


def load_frame_params(path) -> tuple:
    """Load and validate a frame-parameter document.

    Accepts either the JSON file itself or a directory containing
    ``params.json``.  Returns (frames, n_expressions, n_joints, fps) with
    frames sorted by their (strictly increasing) indices; images are not
    loaded here.
    """
    p = Path(path)
    if p.is_dir():
        p = p / PARAMS_NAME
    if not p.exists():
        raise ValidationError(f"frame parameter file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{p}: invalid JSON ({e})")
    if doc.get("format") != FRAMES_FORMAT:
        raise BadMagicError(f"{p}: format {doc.get('format')!r}, expected {FRAMES_FORMAT!r}")
    if doc.get("version") != FRAMES_VERSION:
        raise VersionError(f"{p}: unsupported frames version {doc.get('version')}")
    n_expr = int(doc["n_expressions"])
    n_joints = int(doc["n_joints"])
    fps = doc.get("fps")
    frames = []
    last_index = None
    for rec in doc["frames"]:
        where = f"{p} frame {rec.get('index')}"
        index = int(rec["index"])
        if last_index is not None and index <= last_index:
            raise ValidationError(
                f"{p}: frame indices must be strictly increasing, got {index} after {last_index}")
        last_index = index
        psi = np.asarray(rec["psi"], dtype=np.float64)
        if psi.shape != (n_expr,):
            raise CountMismatchError(
                f"{where}: psi has {psi.size} coefficients, document declares {n_expr}")
        joints = np.asarray(rec["joints"], dtype=np.float64)
        if joints.shape != (n_joints, 12):
            raise CountMismatchError(
                f"{where}: expected {n_joints} joint transforms of 12 values, got shape {joints.shape}")
        frames.append(FrameData(
            index=index,
            coeffs=ExpressionCoeffs(psi),
            pose=PoseParams(joints.reshape(n_joints, 3, 4)),
            camera=_camera_from_json(rec["camera"], where),
        ))
    return frames, n_expr, n_joints, fps


def load_sequence(directory) -> tuple:
    """Load a full training sequence: parameters plus image/mask pairs.

    Every frame record must have both its target image and mask on disk;
    all images must share one resolution.

    Returns:
        (frames, n_expressions, n_joints, fps) with images attached.

    Raises:
        ValidationError: missing image/mask (names the frame) or dimension
            mismatch across frames.
    """
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"sequence directory not found: {d}")
    frames, n_expr, n_joints, fps = load_frame_params(d)
    if not frames:
        raise ValidationError(f"{d}: sequence contains no frames")
    dims = None
    for f in frames:
        img_path = d / FRAME_IMAGE_PATTERN.format(f.index)
        mask_path = d / FRAME_MASK_PATTERN.format(f.index)
        if not img_path.exists():
            raise ValidationError(f"missing image for frame {f.index}: {img_path}")
        if not mask_path.exists():
            raise ValidationError(f"missing mask for frame {f.index}: {mask_path}")
        f.image = load_image(img_path)
        f.mask = load_mask(mask_path)
        if f.mask.shape != f.image.shape[:2]:
            raise ValidationError(
                f"frame {f.index}: mask {f.mask.shape} does not match image {f.image.shape[:2]}")
        if dims is None:
            dims = f.image.shape
        elif f.image.shape != dims:
            raise ValidationError(
                f"frame {f.index}: image shape {f.image.shape} differs from first frame {dims}")
    return frames, n_expr, n_joints, fps


def load_video_frames(directory, *, fps: float = 25.0):
    """Stack every frame image in a directory into a VideoSequence.

    Prefers the ``frame_*.png`` naming convention; falls back to all PNG/PPM
    files.  Files are taken in sorted name order.  Masks are ignored.

    Raises:
        ValidationError: empty directory or mixed resolutions.
    """
    from .metrics import VideoSequence
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"video directory not found: {d}")
    paths = sorted(d.glob("frame_*.png"))
    if not paths:
        paths = sorted(p for p in d.iterdir()
                       if p.suffix.lower() in (".png", ".ppm") and p.is_file())
    if not paths:
        raise ValidationError(f"{d}: no frame images found")
    images = []
    for p in paths:
        img = load_image(p)
        if images and img.shape != images[0].shape:
            raise ValidationError(
                f"{p.name}: shape {img.shape} differs from first frame {images[0].shape}")
        images.append(img)
    return VideoSequence(frames=np.stack(images), fps=fps)


# ---------------------------------------------------------------------------
# Synthetic dataset


@dataclass
class SynthConfig:
    """Knobs for the synthetic head dataset generator."""

    gaussians: int = 500
    blendshapes: int = 4
    frames: int = 20
    width: int = 128
    height: int = 128
    mouth_gaussians: int = 0      # 0 = derive from gaussians (28%)
    fps: float = 25.0

    def __post_init__(self):
        if self.gaussians <= 0 or self.frames <= 0:
            raise ValidationError("synth gaussian and frame counts must be positive")
        if self.blendshapes < 0 or self.mouth_gaussians < 0:
            raise ValidationError("synth blendshape and mouth counts must be nonnegative")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("synth image size must be positive")


def _sample_ball(rng, count: int, radii) -> np.ndarray:
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, count) ** (1.0 / 3.0)
    return v * r[:, None] * np.asarray(radii)


def _sample_cylinder(rng, count: int, center, axis, radius, half_height) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(axis, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(axis, b1)
    ang = rng.uniform(0.0, 2.0 * np.pi, count)
    rad = radius * np.sqrt(rng.uniform(0.0, 1.0, count))
    axial = rng.uniform(-half_height, half_height, count)
    return (np.asarray(center) + axial[:, None] * axis
            + (rad * np.cos(ang))[:, None] * b1 + (rad * np.sin(ang))[:, None] * b2)


def _mean_nn_distance(points: np.ndarray) -> float:
    from scipy.spatial import cKDTree
    if points.shape[0] < 2:
        return 0.05
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=2)
    return float(np.mean(dist[:, 1]))


def _rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rigid_about(rotation: np.ndarray, pivot: np.ndarray) -> np.ndarray:
    """3x4 transform rotating about a pivot point."""
    t = pivot - rotation @ pivot
    return np.hstack([rotation, t[:, None]])


JAW_PIVOT = np.array([0.0, -0.12, 0.0])
MOUTH_CENTER = np.array([0.0, -0.16, 0.14])
MOUTH_AXIS = np.array([0.0, 1.0, 0.0])
MOUTH_RADIUS = 0.09
MOUTH_HALF_HEIGHT = 0.05


def make_synth_model(config: SynthConfig, rng) -> BlendshapeModel:
    """Random ground-truth head: ellipsoid shell of Gaussians plus a mouth."""
    n = config.gaussians
    n_mouth = config.mouth_gaussians or max(8, (n * 28) // 100)

    # Small, mostly opaque splats keep the silhouette crisp so the
    # accumulated-opacity image stays close to its own thresholded mask;
    # colors stay away from [0, 1] saturation so they remain optimizable.
    centers = _sample_ball(rng, n, (0.26, 0.33, 0.28))
    base_scale = np.log(max(_mean_nn_distance(centers), 1e-3) * 0.65)
    scales = base_scale + rng.normal(0.0, 0.2, (n, 3))
    rotations = rng.normal(0.0, 1.0, (n, 4))
    opacities = inverse_sigmoid(rng.uniform(0.85, 0.99, n))
    sh = (rng.uniform(0.25, 0.75, (n, 1, 3)) - 0.5) / 0.28209479177387814
    neutral = GaussianSet(centers, scales, rotations, opacities, sh)

    deltas = []
    for _ in range(config.blendshapes):
        deltas.append(GaussianSet(
            centers=rng.normal(0.0, 0.012, (n, 3)),
            scales_raw=rng.normal(0.0, 0.06, (n, 3)),
            rotations_raw=rng.normal(0.0, 0.05, (n, 4)),
            opacities_raw=rng.normal(0.0, 0.12, n),
            sh=rng.normal(0.0, 0.10, (n, 1, 3)),
        ))

    # Lower-face Gaussians partially follow the jaw joint.
    jaw_w = np.clip((JAW_PIVOT[1] + 0.04 - centers[:, 1]) / 0.3, 0.0, 0.8)
    weights = np.stack([1.0 - jaw_w, jaw_w], axis=1)

    m_centers = _sample_cylinder(rng, n_mouth, MOUTH_CENTER, MOUTH_AXIS,
                                 MOUTH_RADIUS * 0.9, MOUTH_HALF_HEIGHT * 0.9)
    m_scales = np.full((n_mouth, 3), np.log(0.014)) + rng.normal(0.0, 0.2, (n_mouth, 3))
    mouth = GaussianSet(
        centers=m_centers,
        scales_raw=m_scales,
        rotations_raw=rng.normal(0.0, 1.0, (n_mouth, 4)),
        opacities_raw=inverse_sigmoid(rng.uniform(0.8, 0.97, n_mouth)),
        sh=(rng.uniform(0.25, 0.45, (n_mouth, 1, 3)) - 0.5) / 0.28209479177387814,
    )
    return BlendshapeModel(neutral=neutral, deltas=deltas, weights=weights,
                           mouth=mouth, mouth_joint=1)


def make_synth_camera(width: int, height: int) -> Camera:
    rot = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    eye = np.array([0.0, 0.0, 2.5])
    ext = np.hstack([rot, (-rot @ eye)[:, None]])
    f = 2.5 * width
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, extrinsics=ext,
                  near=0.1, far=10.0)


def make_synth_trajectory(config: SynthConfig, rng) -> list:
    """Smooth random expression/pose curves for each frame."""
    n, f = config.blendshapes, config.frames
    camera = make_synth_camera(config.width, config.height)
    amp = rng.uniform(0.3, 0.9, n)
    freq = rng.uniform(0.5, 1.6, n)
    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    head_amp = rng.uniform(0.05, 0.12)
    head_phase = rng.uniform(0.0, 2.0 * np.pi)
    jaw_amp = rng.uniform(0.08, 0.2)
    jaw_phase = rng.uniform(0.0, 2.0 * np.pi)

    frames = []
    for t in range(f):
        u = t / max(f - 1, 1)
        psi = amp * 0.5 * (1.0 + np.sin(2.0 * np.pi * freq * u + phase))
        head_angle = head_amp * np.sin(2.0 * np.pi * u + head_phase)
        jaw_angle = jaw_amp * 0.5 * (1.0 + np.sin(2.0 * np.pi * u + jaw_phase))
        head = _rigid_about(_rot_y(head_angle), np.zeros(3))
        jaw = _rigid_about(_rot_y(head_angle) @ _rot_x(jaw_angle), JAW_PIVOT)
        frames.append(FrameData(
            index=t,
            coeffs=ExpressionCoeffs(psi),
            pose=PoseParams(np.stack([head, jaw])),
            camera=camera,
        ))
    return frames


def synth_dataset(config: SynthConfig, seed: int, out_dir, *,
                  threads: Optional[int] = None) -> Path:
    """Generate a ground-truth model, trajectories, renders, and masks.

    Deterministic per seed: the same seed writes byte-identical files.
    Masks are the render's accumulated opacity thresholded at 0.5.
    """
    from .rasterizer import render

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    model = make_synth_model(config, rng)
    frames = make_synth_trajectory(config, rng)

    for f in frames:
        posed = pose_model(model, f.coeffs, f.pose)
        result = render(posed, f.camera, (0.0, 0.0, 0.0), threads=threads)
        save_image(out / FRAME_IMAGE_PATTERN.format(f.index), result.rgb)
        save_image(out / FRAME_MASK_PATTERN.format(f.index),
                   (result.alpha >= 0.5).astype(np.float64))
    save_frame_params(out / PARAMS_NAME, frames, config.blendshapes, 2,
                      fps=config.fps)
    save_model(out / GT_MODEL_NAME, model)
    return out
