"""Differentiable tile-based rasterization of 3D Gaussians on the CPU.

The render path is split in two stages:

* :func:`project` turns a posed Gaussian set into screen-space splat records:
  2D means, inverse-covariance conics, view-dependent colors, depths, and
  binning radii, globally sorted front to back.
* :func:`rasterize` composites the sorted records per 16x16 pixel tile with
  front-to-back alpha blending.  :func:`rasterize_reference` produces the
  same image by brute force (every record against every pixel, no tile
  culling) and exists purely as an oracle for the tiled path.

Compositing semantics, shared by both routes and by the backward pass:
``alpha = min(0.99, opacity * exp(power))`` with ``power`` the negative
half quadratic form of the conic; contributions with ``power > 0`` or
``alpha < 1/255`` are skipped; blending stops in front of the first splat
whose inclusion would drop transmittance below the termination threshold.
The final pixel is ``sum_i c_i alpha_i T_i + T_final * background`` and the
accumulated alpha channel is ``1 - T_final``.

:func:`rasterize_backward` replays the composited tiles in closed form and
chains gradients through projection, activation, and skinning back to the
raw parameters of the posed set's source Gaussians.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .blendpose import PosedGaussianSet
from .errors import ValidationError
from .model import Camera, covariance3d, quaternion_to_matrix

TILE = 16
ALPHA_CUTOFF = 1.0 / 255.0
ALPHA_CLAMP = 0.99
TERMINATION = 1e-4
COV2D_DILATION = 0.3

# Spherical harmonics basis constants, bands 0..3.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)


def resolve_threads(threads: Optional[int] = None) -> int:
    """Thread count: explicit argument, else GBLEND_THREADS env, else 1."""
    if threads is not None:
        if threads < 1:
            raise ValidationError(f"thread count must be >= 1, got {threads}")
        return int(threads)
    env = os.environ.get("GBLEND_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"GBLEND_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ValidationError(f"GBLEND_THREADS must be >= 1, got {n}")
        return n
    return 1


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """SH basis values Y (M, K) for unit directions, bands 0..degree."""
    if not 0 <= degree <= 3:
        raise ValidationError(f"sh degree must be in [0, 3], got {degree}")
    m = dirs.shape[0]
    k = (degree + 1) ** 2
    y = np.empty((m, k))
    y[:, 0] = _SH_C0
    if degree >= 1:
        x, yy, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        y[:, 1] = -_SH_C1 * yy
        y[:, 2] = _SH_C1 * z
        y[:, 3] = -_SH_C1 * x
    if degree >= 2:
        xx, yy2, zz = x * x, yy * yy, z * z
        y[:, 4] = _SH_C2[0] * x * yy
        y[:, 5] = _SH_C2[1] * yy * z
        y[:, 6] = _SH_C2[2] * (2.0 * zz - xx - yy2)
        y[:, 7] = _SH_C2[3] * x * z
        y[:, 8] = _SH_C2[4] * (xx - yy2)
    if degree >= 3:
        y[:, 9] = _SH_C3[0] * yy * (3.0 * xx - yy2)
        y[:, 10] = _SH_C3[1] * x * yy * z
        y[:, 11] = _SH_C3[2] * yy * (4.0 * zz - xx - yy2)
        y[:, 12] = _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy2)
        y[:, 13] = _SH_C3[4] * x * (4.0 * zz - xx - yy2)
        y[:, 14] = _SH_C3[5] * z * (xx - yy2)
        y[:, 15] = _SH_C3[6] * x * (xx - 3.0 * yy2)
    return y


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d Y_k / d dir, shape (M, K, 3), for unit directions."""
    m = dirs.shape[0]
    k = (degree + 1) ** 2
    g = np.zeros((m, k, 3))
    if degree >= 1:
        x, yy, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        g[:, 1, 1] = -_SH_C1
        g[:, 2, 2] = _SH_C1
        g[:, 3, 0] = -_SH_C1
    if degree >= 2:
        g[:, 4, 0] = _SH_C2[0] * yy
        g[:, 4, 1] = _SH_C2[0] * x
        g[:, 5, 1] = _SH_C2[1] * z
        g[:, 5, 2] = _SH_C2[1] * yy
        g[:, 6, 0] = _SH_C2[2] * (-2.0 * x)
        g[:, 6, 1] = _SH_C2[2] * (-2.0 * yy)
        g[:, 6, 2] = _SH_C2[2] * (4.0 * z)
        g[:, 7, 0] = _SH_C2[3] * z
        g[:, 7, 2] = _SH_C2[3] * x
        g[:, 8, 0] = _SH_C2[4] * (2.0 * x)
        g[:, 8, 1] = _SH_C2[4] * (-2.0 * yy)
    if degree >= 3:
        xx, yy2, zz = x * x, yy * yy, z * z
        g[:, 9, 0] = _SH_C3[0] * 6.0 * x * yy
        g[:, 9, 1] = _SH_C3[0] * (3.0 * xx - 3.0 * yy2)
        g[:, 10, 0] = _SH_C3[1] * yy * z
        g[:, 10, 1] = _SH_C3[1] * x * z
        g[:, 10, 2] = _SH_C3[1] * x * yy
        g[:, 11, 0] = _SH_C3[2] * (-2.0 * x * yy)
        g[:, 11, 1] = _SH_C3[2] * (4.0 * zz - xx - 3.0 * yy2)
        g[:, 11, 2] = _SH_C3[2] * (8.0 * yy * z)
        g[:, 12, 0] = _SH_C3[3] * (-6.0 * x * z)
        g[:, 12, 1] = _SH_C3[3] * (-6.0 * yy * z)
        g[:, 12, 2] = _SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy2)
        g[:, 13, 0] = _SH_C3[4] * (4.0 * zz - 3.0 * xx - yy2)
        g[:, 13, 1] = _SH_C3[4] * (-2.0 * x * yy)
        g[:, 13, 2] = _SH_C3[4] * (8.0 * x * z)
        g[:, 14, 0] = _SH_C3[5] * (2.0 * x * z)
        g[:, 14, 1] = _SH_C3[5] * (-2.0 * yy * z)
        g[:, 14, 2] = _SH_C3[5] * (xx - yy2)
        g[:, 15, 0] = _SH_C3[6] * (3.0 * xx - 3.0 * yy2)
        g[:, 15, 1] = _SH_C3[6] * (-6.0 * x * yy)
    return g


@dataclass
class SplatRecords:
    """Screen-space splat records after projection, sorted front to back.

    One record per surviving Gaussian; ``source_index`` maps a record back
    into the posed set it came from.  ``cov2d`` keeps the dilated covariance
    entries (a, b, c) alongside the conic so the backward pass can replay
    projection without re-inverting.
    """

    mean2d: np.ndarray        # (M, 2) splat centers, pixel units
    conic: np.ndarray         # (M, 3) inverse covariance entries (A, B, C)
    cov2d: np.ndarray         # (M, 3) dilated covariance entries (a, b, c)
    depth: np.ndarray         # (M,) camera-space z
    color: np.ndarray         # (M, 3) view-dependent rgb, clipped to [0, 1]
    color_pre: np.ndarray     # (M, 3) rgb before the [0, 1] clip
    opacity: np.ndarray       # (M,) activated opacity
    radius: np.ndarray        # (M,) binning radius, pixels
    t_cam: np.ndarray         # (M, 3) camera-space centers
    source_index: np.ndarray  # (M,) int indices into the source set
    camera: Camera
    source_set: object        # the projected set (PosedGaussianSet for backprop)

    def __len__(self) -> int:
        return self.mean2d.shape[0]


@dataclass
class RenderTrace:
    """Everything needed to replay compositing for the backward pass."""

    records: SplatRecords
    width: int
    height: int
    background: np.ndarray    # (3,)
    termination: float


@dataclass
class RenderOutput:
    """Forward render result plus the trace consumed by rasterize_backward."""

    rgb: np.ndarray           # (H, W, 3) in [0, 1]
    alpha: np.ndarray         # (H, W) accumulated opacity in [0, 1]
    trace: RenderTrace


@dataclass
class GradientSet:
    """Partials of a scalar loss w.r.t. every raw parameter of a Gaussian set.

    Rows for culled, skipped, or terminated Gaussians are zero.
    """

    d_centers: np.ndarray        # (N, 3)
    d_scales_raw: np.ndarray     # (N, 3)
    d_rotations_raw: np.ndarray  # (N, 4)
    d_opacities_raw: np.ndarray  # (N,)
    d_sh: np.ndarray             # (N, K, 3)

    @staticmethod
    def zeros(n: int, sh_coeffs: int) -> "GradientSet":
        return GradientSet(
            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
            np.zeros(n), np.zeros((n, sh_coeffs, 3)),
        )

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(
            self.d_centers * factor, self.d_scales_raw * factor,
            self.d_rotations_raw * factor, self.d_opacities_raw * factor,
            self.d_sh * factor,
        )

    def slice(self, start: int, stop: int) -> "GradientSet":
        return GradientSet(
            self.d_centers[start:stop], self.d_scales_raw[start:stop],
            self.d_rotations_raw[start:stop], self.d_opacities_raw[start:stop],
            self.d_sh[start:stop],
        )


def _empty_records(camera: Camera, source_set) -> SplatRecords:
    z3 = np.zeros((0, 3))
    return SplatRecords(
        mean2d=np.zeros((0, 2)), conic=z3.copy(), cov2d=z3.copy(),
        depth=np.zeros(0), color=z3.copy(), color_pre=z3.copy(),
        opacity=np.zeros(0), radius=np.zeros(0), t_cam=z3.copy(),
        source_index=np.zeros(0, dtype=np.int64), camera=camera,
        source_set=source_set,
    )


def _pixel_box(mean2d: np.ndarray, radius: np.ndarray, width: int, height: int):
    """Integer pixel index ranges [x0, x1) x [y0, y1) covered by each splat.

    A pixel belongs to the box when its center (j + 0.5, i + 0.5) lies within
    ``radius`` of the splat mean along both axes.
    """
    x0 = np.maximum(np.ceil(mean2d[:, 0] - radius - 0.5).astype(np.int64), 0)
    x1 = np.minimum(np.floor(mean2d[:, 0] + radius - 0.5).astype(np.int64) + 1, width)
    y0 = np.maximum(np.ceil(mean2d[:, 1] - radius - 0.5).astype(np.int64), 0)
    y1 = np.minimum(np.floor(mean2d[:, 1] + radius - 0.5).astype(np.int64) + 1, height)
    return x0, x1, y0, y1


def _ewa_jacobian(t_cam: np.ndarray, camera: Camera):
    """Clamped EWA projection Jacobians (M, 2, 3) plus the clamp trace."""
    fx, fy = camera.fx, camera.fy
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    lim_x = 1.3 * (0.5 * camera.width / fx)
    lim_y = 1.3 * (0.5 * camera.height / fy)
    ux = tx / tz
    uy = ty / tz
    ucx = np.clip(ux, -lim_x, lim_x)
    ucy = np.clip(uy, -lim_y, lim_y)
    txc = ucx * tz
    tyc = ucy * tz
    m = t_cam.shape[0]
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * txc / (tz * tz)
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * tyc / (tz * tz)
    clamp = {
        "ux": ux, "uy": uy, "ucx": ucx, "ucy": ucy,
        "mx": np.abs(ux) < lim_x, "my": np.abs(uy) < lim_y,
        "txc": txc, "tyc": tyc,
    }
    return jac, clamp


def project(gaussians, camera: Camera) -> SplatRecords:
    """Project an activated (optionally posed) Gaussian set to splat records.

    Culls Gaussians behind the near plane or beyond the far plane, Gaussians
    whose peak opacity cannot reach the 1/255 compositing cutoff, and
    Gaussians whose footprint misses the image entirely.  Survivors are
    sorted by depth (stable, so equal depths keep source order).

    Args:
        gaussians: any set exposing activated centers/scales/rotations/
            opacities/sh arrays, e.g. a PosedGaussianSet.
        camera: pinhole camera; its width/height bound the footprint cull.

    Returns:
        SplatRecords sorted front to back.
    """
    centers = np.asarray(gaussians.centers, dtype=np.float64)
    t_all = camera.to_camera(centers)
    keep = (t_all[:, 2] > camera.near) & (t_all[:, 2] < camera.far)
    keep &= gaussians.opacities > ALPHA_CUTOFF
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return _empty_records(camera, gaussians)

    t_cam = t_all[idx]
    scales = gaussians.scales[idx]
    rotations = gaussians.rotations[idx]
    opacities = gaussians.opacities[idx]
    sh = gaussians.sh[idx]

    cov3d = covariance3d(scales, rotations)
    jac, _ = _ewa_jacobian(t_cam, camera)
    mproj = jac @ camera.rotation  # (M, 2, 3)
    cov2d_full = np.einsum("mij,mjk,mlk->mil", mproj, cov3d, mproj)
    a = cov2d_full[:, 0, 0] + COV2D_DILATION
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + COV2D_DILATION
    det = a * c - b * b

    tz = t_cam[:, 2]
    mean2d = np.stack([
        camera.fx * t_cam[:, 0] / tz + camera.cx,
        camera.fy * t_cam[:, 1] / tz + camera.cy,
    ], axis=1)

    # Binning radius: exact bound of the alpha >= 1/255 support along the
    # dominant eigendirection, plus one pixel of slack so box-edge pixels are
    # strictly below the cutoff and contribute exactly zero.
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.sqrt(2.0 * np.log(255.0 * opacities) * lam_max) + 1.0

    x0, x1, y0, y1 = _pixel_box(mean2d, radius, camera.width, camera.height)
    visible = (det > 0) & (x0 < x1) & (y0 < y1)
    if not np.any(visible):
        return _empty_records(camera, gaussians)
    v = np.nonzero(visible)[0]

    idx, t_cam, mean2d, opacities, sh = idx[v], t_cam[v], mean2d[v], opacities[v], sh[v]
    a, b, c, det = a[v], b[v], c[v], det[v]
    radius = radius[v]
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    cov2d = np.stack([a, b, c], axis=1)

    degree = gaussians.sh.shape[1]
    degree = int(round(np.sqrt(degree))) - 1
    cam_pos = camera.world_origin()
    vecs = centers[idx] - cam_pos
    dirs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    basis = sh_basis(degree, dirs)
    color_pre = np.einsum("mk,mkc->mc", basis, sh) + 0.5
    color = np.clip(color_pre, 0.0, 1.0)

    order = np.argsort(t_cam[:, 2], kind="stable")
    return SplatRecords(
        mean2d=mean2d[order], conic=conic[order], cov2d=cov2d[order],
        depth=t_cam[order, 2], color=color[order], color_pre=color_pre[order],
        opacity=opacities[order], radius=radius[order], t_cam=t_cam[order],
        source_index=idx[order], camera=camera, source_set=gaussians,
    )


def _validate_records(records: SplatRecords):
    fields = np.concatenate([
        records.mean2d, records.conic, records.color,
        records.opacity[:, None], records.depth[:, None],
    ], axis=1)
    finite = np.isfinite(fields).all(axis=1)
    if not finite.all():
        bad = int(records.source_index[int(np.argmin(finite))])
        raise ValidationError(f"record for Gaussian {bad} contains non-finite values")


def _check_background(background) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 0:
        bg = np.full(3, float(bg))
    if bg.shape != (3,):
        raise ValidationError(f"background must be a scalar or 3-vector, got shape {bg.shape}")
    return bg


def _composite_tile(records: SplatRecords, idx: np.ndarray, xs: np.ndarray,
                    ys: np.ndarray, termination: float):
    """Per-tile compositing quantities over pixels (P) x records (R).

    Returns a dict with the intermediate arrays shared between the forward
    accumulation and the backward replay.  Row-major pixel order: y outer,
    x inner.
    """
    px = np.tile(xs + 0.5, ys.size)
    py = np.repeat(ys + 0.5, xs.size)
    mean = records.mean2d[idx]
    con = records.conic[idx]
    op = records.opacity[idx]

    dx = mean[None, :, 0] - px[:, None]
    dy = mean[None, :, 1] - py[:, None]
    power = (-0.5 * (con[None, :, 0] * dx * dx + con[None, :, 2] * dy * dy)
             - con[None, :, 1] * dx * dy)
    g = np.exp(np.minimum(power, 0.0))
    a_raw = op[None, :] * g
    a_eff = np.where((power <= 0.0) & (a_raw >= ALPHA_CUTOFF),
                     np.minimum(a_raw, ALPHA_CLAMP), 0.0)
    one_minus = 1.0 - a_eff
    t_after = np.cumprod(one_minus, axis=1)
    t_before = np.empty_like(t_after)
    t_before[:, 0] = 1.0
    t_before[:, 1:] = t_after[:, :-1]
    if termination > 0.0:
        kept = t_after >= termination
    else:
        kept = np.ones_like(t_after, dtype=bool)
    w = np.where(kept, a_eff * t_before, 0.0)
    t_final = np.prod(np.where(kept, one_minus, 1.0), axis=1)
    return {
        "px": px, "py": py, "dx": dx, "dy": dy, "g": g,
        "a_eff": a_eff, "t_before": t_before, "t_final": t_final,
        "w": w, "active": w > 0.0, "a_raw": a_raw,
    }


def _forward_tile(records, idx, xs, ys, bg, termination):
    q = _composite_tile(records, idx, xs, ys, termination)
    col = records.color[idx]
    rgb = q["w"] @ col + q["t_final"][:, None] * bg[None, :]
    alpha = 1.0 - q["t_final"]
    return rgb.reshape(ys.size, xs.size, 3), alpha.reshape(ys.size, xs.size)


def _tile_grid(records: SplatRecords, width: int, height: int):
    """Assign each record to the tiles its pixel box overlaps.

    Returns (tiles, lists) where tiles enumerates (ty, tx, ys, xs) in
    row-major order and lists[i] is the depth-ordered record index array for
    tiles[i].
    """
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    x0, x1, y0, y1 = _pixel_box(records.mean2d, records.radius, width, height)
    lists = [[] for _ in range(ntx * nty)]
    for m in range(len(records)):
        if x0[m] >= x1[m] or y0[m] >= y1[m]:
            continue
        for ty in range(y0[m] // TILE, (y1[m] - 1) // TILE + 1):
            base = ty * ntx
            for tx in range(x0[m] // TILE, (x1[m] - 1) // TILE + 1):
                lists[base + tx].append(m)
    tiles = []
    arrays = []
    for ty in range(nty):
        ys = np.arange(ty * TILE, min((ty + 1) * TILE, height))
        for tx in range(ntx):
            tid = ty * ntx + tx
            if not lists[tid]:
                continue
            xs = np.arange(tx * TILE, min((tx + 1) * TILE, width))
            tiles.append((ys, xs))
            arrays.append(np.asarray(lists[tid], dtype=np.int64))
    return tiles, arrays


def rasterize(records: SplatRecords, width: int, height: int, background,
              *, threads: Optional[int] = None,
              termination: float = TERMINATION) -> RenderOutput:
    """Composite sorted splat records into an image, tile by tile.

    Args:
        records: depth-sorted output of :func:`project`.
        width, height: output image size in pixels.
        background: scalar or rgb triple blended behind the splats.
        threads: worker threads for tile processing (None = GBLEND_THREADS
            env or 1).  Results are identical for any thread count.
        termination: transmittance threshold that stops blending; 0 disables.

    Returns:
        RenderOutput with rgb in [0, 1], accumulated alpha, and the replay
        trace for :func:`rasterize_backward`.

    Raises:
        ValidationError: on non-finite record fields (names the Gaussian) or
            invalid image/background arguments.
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"image size must be positive, got {width}x{height}")
    bg = _check_background(background)
    _validate_records(records)

    rgb = np.empty((height, width, 3))
    rgb[:] = bg
    alpha = np.zeros((height, width))
    trace = RenderTrace(records, width, height, bg, termination)
    if len(records) == 0:
        return RenderOutput(rgb, alpha, trace)

    tiles, lists = _tile_grid(records, width, height)
    nworkers = resolve_threads(threads)

    def run(i):
        ys, xs = tiles[i]
        return _forward_tile(records, lists[i], xs, ys, bg, termination)

    if nworkers == 1 or len(tiles) <= 1:
        results = [run(i) for i in range(len(tiles))]
    else:
        with ThreadPoolExecutor(max_workers=nworkers) as pool:
            results = list(pool.map(run, range(len(tiles))))
    for (ys, xs), (tile_rgb, tile_alpha) in zip(tiles, results):
        rgb[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = tile_rgb
        alpha[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = tile_alpha
    return RenderOutput(rgb, alpha, trace)


def rasterize_reference(records: SplatRecords, width: int, height: int,
                        background, *,
                        termination: float = TERMINATION) -> RenderOutput:
    """Brute-force compositing oracle: every record against every pixel.

    Implements the same blending semantics as :func:`rasterize` with no tile
    culling and no footprint binning; kept deliberately independent of the
    tiled code path.
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"image size must be positive, got {width}x{height}")
    bg = _check_background(background)
    _validate_records(records)
    trace = RenderTrace(records, width, height, bg, termination)

    rgb = np.empty((height, width, 3))
    rgb[:] = bg
    alpha = np.zeros((height, width))
    m = len(records)
    if m == 0:
        return RenderOutput(rgb, alpha, trace)

    px_all = np.tile(np.arange(width) + 0.5, height)
    py_all = np.repeat(np.arange(height) + 0.5, width)
    rgb_flat = rgb.reshape(-1, 3)
    alpha_flat = alpha.reshape(-1)
    con = records.conic
    op = records.opacity
    col = records.color

    chunk = max(1, int(4_000_000 // max(m, 1)))
    for start in range(0, px_all.size, chunk):
        sl = slice(start, min(start + chunk, px_all.size))
        dx = records.mean2d[None, :, 0] - px_all[sl][:, None]
        dy = records.mean2d[None, :, 1] - py_all[sl][:, None]
        power = (-0.5 * (con[None, :, 0] * dx * dx + con[None, :, 2] * dy * dy)
                 - con[None, :, 1] * dx * dy)
        a_raw = op[None, :] * np.exp(np.minimum(power, 0.0))
        a_eff = np.where((power <= 0.0) & (a_raw >= ALPHA_CUTOFF),
                         np.minimum(a_raw, ALPHA_CLAMP), 0.0)
        one_minus = 1.0 - a_eff
        t_after = np.cumprod(one_minus, axis=1)
        t_before = np.empty_like(t_after)
        t_before[:, 0] = 1.0
        t_before[:, 1:] = t_after[:, :-1]
        if termination > 0.0:
            kept = t_after >= termination
        else:
            kept = np.ones_like(t_after, dtype=bool)
        w = np.where(kept, a_eff * t_before, 0.0)
        t_final = np.prod(np.where(kept, one_minus, 1.0), axis=1)
        rgb_flat[sl] = w @ col + t_final[:, None] * bg[None, :]
        alpha_flat[sl] = 1.0 - t_final
    return RenderOutput(rgb, alpha, trace)


def _backward_tile(records, idx, xs, ys, bg, termination, d_rgb, d_alpha):
    """Per-tile gradients w.r.t. record color, opacity, mean2d, and conic."""
    q = _composite_tile(records, idx, xs, ys, termination)
    col = records.color[idx]
    y0, x0 = ys[0], xs[0]
    dl_dc = d_rgb[y0:ys[-1] + 1, x0:xs[-1] + 1].reshape(-1, 3)
    dl_da = d_alpha[y0:ys[-1] + 1, x0:xs[-1] + 1].reshape(-1)

    w, active = q["w"], q["active"]
    t_before, t_final = q["t_before"], q["t_final"]
    a_eff = q["a_eff"]

    d_color = np.einsum("pr,pc->rc", w, dl_dc)

    # dL/d alpha_i: own contribution plus the transmittance hit on everything
    # composited behind it (suffix sum) and on the background / alpha output.
    contrib = w[:, :, None] * col[None, :, :]
    suffix = np.cumsum(contrib[:, ::-1, :], axis=1)[:, ::-1, :] - contrib
    cdot = dl_dc @ col.T
    udot = np.einsum("prc,pc->pr", suffix, dl_dc)
    bgdot = dl_dc @ bg
    inv_one_minus = 1.0 / (1.0 - a_eff)
    tf = t_final[:, None]
    g_alpha = np.where(
        active,
        cdot * t_before
        - (udot + bgdot[:, None] * tf) * inv_one_minus
        + dl_da[:, None] * tf * inv_one_minus,
        0.0,
    )

    unclamped = q["a_raw"] < ALPHA_CLAMP
    d_opacity = np.einsum("pr,pr->r", g_alpha, np.where(unclamped, q["g"], 0.0))
    d_power = np.where(unclamped, g_alpha * a_eff, 0.0)

    con = records.conic[idx]
    dx, dy = q["dx"], q["dy"]
    gx = -(con[None, :, 0] * dx + con[None, :, 1] * dy)
    gy = -(con[None, :, 1] * dx + con[None, :, 2] * dy)
    d_mean = np.stack([
        np.einsum("pr,pr->r", d_power, gx),
        np.einsum("pr,pr->r", d_power, gy),
    ], axis=1)
    d_conic = np.stack([
        np.einsum("pr,pr->r", d_power, -0.5 * dx * dx),
        np.einsum("pr,pr->r", d_power, -dx * dy),
        np.einsum("pr,pr->r", d_power, -0.5 * dy * dy),
    ], axis=1)
    return d_color, d_opacity, d_mean, d_conic


def _quat_rotation_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR through the unit-quaternion rotation formula to dL/dq."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_rot
    dw = 2.0 * (z * (g[:, 1, 0] - g[:, 0, 1])
                + y * (g[:, 0, 2] - g[:, 2, 0])
                + x * (g[:, 2, 1] - g[:, 1, 2]))
    dx = 2.0 * (y * (g[:, 0, 1] + g[:, 1, 0])
                + z * (g[:, 0, 2] + g[:, 2, 0])
                + w * (g[:, 2, 1] - g[:, 1, 2])
                - 2.0 * x * (g[:, 1, 1] + g[:, 2, 2]))
    dy = 2.0 * (x * (g[:, 0, 1] + g[:, 1, 0])
                + w * (g[:, 0, 2] - g[:, 2, 0])
                + z * (g[:, 1, 2] + g[:, 2, 1])
                - 2.0 * y * (g[:, 0, 0] + g[:, 2, 2]))
    dz = 2.0 * (w * (g[:, 1, 0] - g[:, 0, 1])
                + x * (g[:, 0, 2] + g[:, 2, 0])
                + y * (g[:, 1, 2] + g[:, 2, 1])
                - 2.0 * z * (g[:, 0, 0] + g[:, 1, 1]))
    return np.stack([dw, dx, dy, dz], axis=1)


def _quat_left_multiply_transpose(a: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Given q' = a (x) b, map dL/dq' to dL/db."""
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    gw, gx, gy, gz = d_out[:, 0], d_out[:, 1], d_out[:, 2], d_out[:, 3]
    return np.stack([
        aw * gw + ax * gx + ay * gy + az * gz,
        -ax * gw + aw * gx + az * gy - ay * gz,
        -ay * gw - az * gx + aw * gy + ax * gz,
        -az * gw + ay * gx - ax * gy + aw * gz,
    ], axis=1)


def _normalize_backward(raw: np.ndarray, unit: np.ndarray,
                        d_unit: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    dot = np.sum(unit * d_unit, axis=1, keepdims=True)
    return (d_unit - unit * dot) / norms


def rasterize_backward(output: RenderOutput, d_rgb: np.ndarray,
                       d_alpha: np.ndarray, *,
                       threads: Optional[int] = None) -> GradientSet:
    """Analytic gradients of a scalar loss through the full render.

    Replays the composited tiles in reverse-closed form, then chains through
    conic inversion, EWA projection, spherical harmonics, activation, and the
    skinning transforms recorded in the posed set.

    Args:
        output: the RenderOutput produced by :func:`rasterize` (its trace is
            replayed; reference outputs work too since semantics match).
        d_rgb: (H, W, 3) upstream gradient w.r.t. the rgb image.
        d_alpha: (H, W) upstream gradient w.r.t. the accumulated alpha.

    Returns:
        GradientSet over the raw parameters of the posed set's source
        Gaussians; culled or terminated Gaussians get zero rows.

    Raises:
        ValidationError: if gradient shapes do not match the trace, or the
            projected set carries no skinning trace.
    """
    trace = output.trace
    records = trace.records
    d_rgb = np.asarray(d_rgb, dtype=np.float64)
    d_alpha = np.asarray(d_alpha, dtype=np.float64)
    if d_rgb.shape != (trace.height, trace.width, 3):
        raise ValidationError(
            f"d_rgb shape {d_rgb.shape} does not match render {trace.height}x{trace.width}")
    if d_alpha.shape != (trace.height, trace.width):
        raise ValidationError(
            f"d_alpha shape {d_alpha.shape} does not match render {trace.height}x{trace.width}")
    posed = records.source_set
    if not isinstance(posed, PosedGaussianSet):
        raise ValidationError("rasterize_backward needs records projected from a PosedGaussianSet")

    n = len(posed.source)
    kdim = posed.sh.shape[1]
    grads = GradientSet.zeros(n, kdim)
    m = len(records)
    if m == 0:
        return grads

    # Stage 1: per-tile compositing gradients, reduced in fixed tile order.
    d_color = np.zeros((m, 3))
    d_opacity_act = np.zeros(m)
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    tiles, lists = _tile_grid(records, trace.width, trace.height)
    nworkers = resolve_threads(threads)

    def run(i):
        ys, xs = tiles[i]
        return _backward_tile(records, lists[i], xs, ys, trace.background,
                              trace.termination, d_rgb, d_alpha)

    if nworkers == 1 or len(tiles) <= 1:
        results = [run(i) for i in range(len(tiles))]
    else:
        with ThreadPoolExecutor(max_workers=nworkers) as pool:
            results = list(pool.map(run, range(len(tiles))))
    for idx, (dc, do, dm, dk) in zip(lists, results):
        d_color[idx] += dc
        d_opacity_act[idx] += do
        d_mean2d[idx] += dm
        d_conic[idx] += dk

    # Stage 2: record-level chains back to raw parameters, fully vectorized.
    cam = records.camera
    src = records.source_index
    scales = posed.scales[src]
    q_posed = posed.rotations[src]
    opac = posed.opacities[src]

    # Color clip and spherical harmonics.
    clip_open = (records.color_pre > 0.0) & (records.color_pre < 1.0)
    d_pre = np.where(clip_open, d_color, 0.0)
    degree = posed.sh_degree
    cam_pos = cam.world_origin()
    vecs = posed.centers[src] - cam_pos
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    dirs = vecs / norms
    basis = sh_basis(degree, dirs)
    d_sh = basis[:, :, None] * d_pre[:, None, :]
    d_center_posed = np.zeros((m, 3))
    if degree >= 1:
        sh_vals = posed.sh[src]
        dbasis = sh_basis_grad(degree, dirs)
        per_k = np.einsum("mkc,mc->mk", sh_vals, d_pre)
        d_dirs = np.einsum("mk,mkd->md", per_k, dbasis)
        dot = np.sum(dirs * d_dirs, axis=1, keepdims=True)
        d_center_posed += (d_dirs - dirs * dot) / norms

    # Conic (A, B, C) -> dilated covariance entries (a, b, c).
    a, b, c = records.cov2d[:, 0], records.cov2d[:, 1], records.cov2d[:, 2]
    det = a * c - b * b
    det2 = det * det
    ga, gb, gc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    d_a = (-ga * c * c + gb * b * c - gc * b * b) / det2
    d_b = (2.0 * ga * b * c - gb * (det + 2.0 * b * b) + 2.0 * gc * a * b) / det2
    d_c = (-ga * b * b + gb * a * b - gc * a * a) / det2

    # cov2d = M cov3d M^T (+ dilation); symmetric gradients as full matrices.
    g2 = np.empty((m, 2, 2))
    g2[:, 0, 0] = d_a
    g2[:, 0, 1] = 0.5 * d_b
    g2[:, 1, 0] = 0.5 * d_b
    g2[:, 1, 1] = d_c
    jac, clamp = _ewa_jacobian(records.t_cam, cam)
    mproj = jac @ cam.rotation
    cov3d = covariance3d(scales, q_posed)
    d_cov3d = np.einsum("mji,mjk,mkl->mil", mproj, g2, mproj)
    d_mproj = 2.0 * np.einsum("mij,mjk,mkl->mil", g2, mproj, cov3d)
    d_jac = d_mproj @ cam.rotation.T

    # cov3d = (R diag(s)) (R diag(s))^T.
    rot = quaternion_to_matrix(q_posed)
    m3 = rot * scales[:, None, :]
    d_m3 = 2.0 * (d_cov3d @ m3)
    d_scales_act = np.einsum("mik,mik->mk", rot, d_m3)
    d_rot = d_m3 * scales[:, None, :]
    d_q_posed = _quat_rotation_backward(q_posed, d_rot)

    # EWA Jacobian entries -> camera-space position.
    fx, fy = cam.fx, cam.fy
    tx, ty, tz = records.t_cam[:, 0], records.t_cam[:, 1], records.t_cam[:, 2]
    iz = 1.0 / tz
    iz2 = iz * iz
    d_txc = d_jac[:, 0, 2] * (-fx * iz2)
    d_tyc = d_jac[:, 1, 2] * (-fy * iz2)
    d_t = np.zeros((m, 3))
    d_t[:, 0] = d_txc * clamp["mx"]
    d_t[:, 1] = d_tyc * clamp["my"]
    d_t[:, 2] = (d_jac[:, 0, 0] * (-fx * iz2)
                 + d_jac[:, 1, 1] * (-fy * iz2)
                 + d_jac[:, 0, 2] * (2.0 * fx * clamp["txc"] * iz2 * iz)
                 + d_jac[:, 1, 2] * (2.0 * fy * clamp["tyc"] * iz2 * iz)
                 + d_txc * (clamp["ucx"] - clamp["mx"] * clamp["ux"])
                 + d_tyc * (clamp["ucy"] - clamp["my"] * clamp["uy"]))

    # Projected mean -> camera-space position (unclamped path).
    d_t[:, 0] += d_mean2d[:, 0] * fx * iz
    d_t[:, 1] += d_mean2d[:, 1] * fy * iz
    d_t[:, 2] += -(d_mean2d[:, 0] * fx * tx + d_mean2d[:, 1] * fy * ty) * iz2

    # Camera transform and skinning back to raw parameters.
    d_center_posed += d_t @ cam.rotation
    d_center_raw = np.einsum("nji,nj->ni", posed.skin_linear[src], d_center_posed)
    d_q_local = _quat_left_multiply_transpose(posed.skin_quat[src], d_q_posed)
    d_q_raw = _normalize_backward(posed.source.rotations_raw[src],
                                  posed.rotations_local[src], d_q_local)
    d_scales_raw = d_scales_act * scales
    d_opac_raw = d_opacity_act * opac * (1.0 - opac)

    np.add.at(grads.d_centers, src, d_center_raw)
    np.add.at(grads.d_scales_raw, src, d_scales_raw)
    np.add.at(grads.d_rotations_raw, src, d_q_raw)
    np.add.at(grads.d_opacities_raw, src, d_opac_raw)
    np.add.at(grads.d_sh, src, d_sh)
    return grads


def render(posed: PosedGaussianSet, camera: Camera, background, *,
           threads: Optional[int] = None,
           termination: float = TERMINATION) -> RenderOutput:
    """Convenience: project then rasterize at the camera's resolution."""
    records = project(posed, camera)
    return rasterize(records, camera.width, camera.height, background,
                     threads=threads, termination=termination)
