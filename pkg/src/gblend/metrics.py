"""Image quality and temporal stability metrics.

PSNR and SSIM compare single frames; ITF and ISI are their means over
adjacent frame pairs of a video and grow when a clip is temporally stable.
``inject_jitter`` synthesizes the instability used to sanity-check that
ordering: per-frame random integer translations with edge replication.
All metrics operate on RGB directly, no luma conversion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _ssim
from .errors import ValidationError

PSNR_CAP_DB = 100.0


@dataclass
class VideoSequence:
    """Ordered frames, shape (F, H, W, 3), values in [0, 1]."""

    frames: np.ndarray
    fps: Optional[float] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValidationError(
                f"frames must be (F, H, W, 3), got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


def psnr(img, target) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images.

    Zero MSE (identical images) is reported as the 100 dB cap rather than
    infinity so sequence averages stay finite.
    """
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def ssim(img, target) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), in [-1, 1]."""
    return _ssim.ssim(img, target)


def _check_video(video: VideoSequence, what: str) -> np.ndarray:
    if not isinstance(video, VideoSequence):
        video = VideoSequence(np.asarray(video))
    if len(video) < 2:
        raise ValidationError(f"{what} needs at least 2 frames, got {len(video)}")
    return video.frames


def itf(video: VideoSequence) -> float:
    """Inter-frame PSNR: mean psnr over adjacent frame pairs, in dB."""
    frames = _check_video(video, "itf")
    return float(np.mean([psnr(frames[i], frames[i + 1])
                          for i in range(len(frames) - 1)]))


def isi(video: VideoSequence) -> float:
    """Inter-frame SSIM: mean ssim over adjacent frame pairs."""
    frames = _check_video(video, "isi")
    return float(np.mean([ssim(frames[i], frames[i + 1])
                          for i in range(len(frames) - 1)]))


def inject_jitter(video: VideoSequence, max_shift_px: int, seed: int) -> VideoSequence:
    """Translate each frame by an independent uniform integer offset.

    Offsets are drawn from [-max_shift, +max_shift]^2 per frame; exposed
    border pixels are edge-replicated.  Deterministic per seed.
    """
    if max_shift_px < 0:
        raise ValidationError(f"max_shift_px must be >= 0, got {max_shift_px}")
    frames = video.frames if isinstance(video, VideoSequence) else np.asarray(video)
    if max_shift_px == 0:
        return VideoSequence(frames.copy(), getattr(video, "fps", None))
    k = int(max_shift_px)
    rng = np.random.default_rng(seed)
    out = np.empty_like(frames)
    h, w = frames.shape[1], frames.shape[2]
    for i in range(frames.shape[0]):
        sy, sx = rng.integers(-k, k + 1, size=2)
        padded = np.pad(frames[i], ((k, k), (k, k), (0, 0)), mode="edge")
        out[i] = padded[k - sy:k - sy + h, k - sx:k - sx + w]
    return VideoSequence(out, getattr(video, "fps", None))


def stability_report(video: VideoSequence, jitter_px: int = 0,
                     seed: int = 0) -> dict:
    """ITF/ISI of a clip, optionally alongside a jitter-injected variant."""
    report = {"frames": len(video), "itf_db": itf(video), "isi": isi(video)}
    if jitter_px > 0:
        jittered = inject_jitter(video, jitter_px, seed)
        report["jitter_px"] = jitter_px
        report["jitter_seed"] = seed
        report["jittered_itf_db"] = itf(jittered)
        report["jittered_isi"] = isi(jittered)
        report["itf_drop_db"] = report["itf_db"] - report["jittered_itf_db"]
        report["isi_drop"] = report["isi"] - report["jittered_isi"]
    return report


def quality_report(renders, targets) -> dict:
    """Per-frame and mean PSNR/SSIM of renders against targets."""
    if len(renders) != len(targets):
        raise ValidationError(
            f"{len(renders)} renders vs {len(targets)} targets")
    if len(renders) == 0:
        raise ValidationError("quality report needs at least one frame pair")
    per_psnr = [psnr(r, t) for r, t in zip(renders, targets)]
    per_ssim = [ssim(r, t) for r, t in zip(renders, targets)]
    return {
        "frames": len(renders),
        "psnr_db": [float(v) for v in per_psnr],
        "ssim": [float(v) for v in per_ssim],
        "mean_psnr_db": float(np.mean(per_psnr)),
        "mean_ssim": float(np.mean(per_ssim)),
    }


def format_report(report: dict) -> str:
    """Plain-text rendering of a metric report, one `key: value` per line."""
    lines = []
    for key, value in report.items():
        if isinstance(value, float):
            lines.append(f"{key}: {value:.6f}")
        elif isinstance(value, list):
            lines.append(f"{key}: " + ", ".join(f"{v:.4f}" for v in value))
        else:
            lines.append(f"{key}: {value}")
    return "\n".join(lines)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
