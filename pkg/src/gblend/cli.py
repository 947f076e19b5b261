"""Command-line surface: render, animate, train, metrics, synth.

Every subcommand accepts ``--config FILE`` pointing at a JSON object whose
keys are the long flag names (hyphen or underscore form); explicit
command-line flags override config values, unknown keys are rejected.
Exit codes: 0 success, 1 expected input problem (bad file, bad flag value,
out-of-range index), 2 internal error.  Diagnostics are single lines on
stderr.  ``--threads`` falls back to the GBLEND_THREADS environment
variable, then to 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__, assets, metrics, trainer
from .blendpose import pose_model
from .errors import GBlendError, ValidationError
from .losses import CylinderVolume, LossWeights
from .model import Camera
from .rasterizer import render


class _Parser(argparse.ArgumentParser):
    """Parser whose usage errors are single-line diagnostics with exit 1."""

    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


class _Command:
    """Collects per-subcommand flag defaults so config files can fill them.

    Flags are registered with ``argparse.SUPPRESS`` defaults; the namespace
    then contains only flags the user actually typed, and merge order is
    defaults < config file < command line.
    """

    def __init__(self, parser):
        self.parser = parser
        self.defaults = {}
        self.required = []
        parser.add_argument("--config", default=argparse.SUPPRESS,
                            help="JSON file of flag values (flags typed on the "
                                 "command line take precedence)")

    def flag(self, name, *, default=None, required=False, type=str,
             help="", choices=None):
        dest = name.lstrip("-").replace("-", "_")
        self.parser.add_argument(name, dest=dest, default=argparse.SUPPRESS,
                                 type=type, help=help, choices=choices)
        self.defaults[dest] = default
        if required:
            self.required.append(dest)
        return self

    def merge(self, ns) -> dict:
        values = dict(self.defaults)
        explicit = {k: v for k, v in vars(ns).items()
                    if k not in ("command", "metric")}
        config_path = explicit.pop("config", None)
        if config_path is not None:
            for key, value in _load_config(config_path).items():
                dest = key.replace("-", "_")
                if dest not in self.defaults:
                    raise ValidationError(f"unknown config key: {key}")
                values[dest] = value
        values.update(explicit)
        for dest in self.required:
            if values.get(dest) is None:
                raise ValidationError(
                    f"missing required flag: --{dest.replace('_', '-')}")
        return values


def _load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {p} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ValidationError(f"config file {p} must hold a JSON object")
    return data


def _parse_background(value) -> tuple:
    if isinstance(value, (list, tuple)):
        vals = [float(v) for v in value]
    else:
        try:
            vals = [float(p) for p in str(value).split(",")]
        except ValueError:
            raise ValidationError(f"bad background value: {value!r}")
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ValidationError("background must be one gray value or r,g,b")
    if any(not (0.0 <= v <= 1.0) for v in vals):
        raise ValidationError("background values must lie in [0, 1]")
    return tuple(vals)


def _parse_vec3(value, what: str) -> tuple:
    if isinstance(value, (list, tuple)):
        vals = [float(v) for v in value]
    else:
        try:
            vals = [float(p) for p in str(value).split(",")]
        except ValueError:
            raise ValidationError(f"bad {what} value: {value!r}")
    if len(vals) != 3:
        raise ValidationError(f"{what} must be x,y,z")
    return tuple(vals)


def _resize_camera(cam: Camera, width, height) -> Camera:
    """Override render resolution, scaling intrinsics to keep the view."""
    if width is None and height is None:
        return cam
    w = int(width) if width is not None else cam.width
    h = int(height) if height is not None else cam.height
    if w <= 0 or h <= 0:
        raise ValidationError("width and height must be positive")
    sx, sy = w / cam.width, h / cam.height
    return Camera(fx=cam.fx * sx, fy=cam.fy * sy, cx=cam.cx * sx,
                  cy=cam.cy * sy, width=w, height=h,
                  extrinsics=cam.extrinsics, near=cam.near, far=cam.far)


def _check_frame_index(index: int, count: int) -> None:
    if not 0 <= index < count:
        raise ValidationError(
            f"frame index {index} out of range for {count} frames "
            f"(valid 0..{count - 1})")


def _emit_report(report: dict, json_path) -> None:
    print(metrics.format_report(report))
    if json_path is not None:
        Path(json_path).write_text(metrics.report_json(report) + "\n")


# ---------------------------------------------------------------------------
# Subcommands

def cmd_render(v: dict) -> int:
    model = assets.load_model(v["model"])
    frames, _, _, _ = assets.load_frame_params(v["frames"])
    _check_frame_index(v["frame_index"], len(frames))
    frame = frames[v["frame_index"]]
    camera = _resize_camera(frame.camera, v["width"], v["height"])
    background = _parse_background(v["background"])
    posed = pose_model(model, frame.coeffs, frame.pose)
    out = render(posed, camera, background, threads=v["threads"])
    assets.save_image(v["out"], out.rgb)
    print(f"wrote {v['out']}")
    return 0


def cmd_animate(v: dict) -> int:
    model = assets.load_model(v["model"])
    frames, _, _, _ = assets.load_frame_params(v["frames"])
    if not frames:
        raise ValidationError("sequence contains no frames")
    background = _parse_background(v["background"])
    out_dir = Path(v["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    for frame in frames:
        camera = _resize_camera(frame.camera, v["width"], v["height"])
        posed = pose_model(model, frame.coeffs, frame.pose)
        result = render(posed, camera, background, threads=v["threads"])
        assets.save_image(out_dir / assets.FRAME_IMAGE_PATTERN.format(frame.index),
                          result.rgb)
    elapsed = time.perf_counter() - start
    report = {"frames": len(frames), "elapsed_s": elapsed,
              "fps": len(frames) / elapsed}
    (out_dir / "report.json").write_text(metrics.report_json(report) + "\n")
    print(metrics.format_report(report))
    return 0


def cmd_train(v: dict) -> int:
    frames, n_expr, n_joints, _ = assets.load_sequence(v["data_dir"])
    holdout = v["holdout"]
    if holdout < 0 or holdout >= len(frames):
        raise ValidationError(
            f"holdout {holdout} must lie in 0..{len(frames) - 1} "
            f"for {len(frames)} frames")
    train_frames = frames[:len(frames) - holdout] if holdout else frames
    held_frames = frames[len(frames) - holdout:] if holdout else []

    background = _parse_background(v["background"])
    weights = LossWeights(lambda1=v["lambda1"], lambda2=v["lambda2"],
                          lambda3=v["lambda3"], lambda_rgb=v["lambda_rgb"])
    config = trainer.TrainConfig(
        lr_center=v["lr_center"], lr_opacity=v["lr_opacity"],
        lr_scale=v["lr_scale"], lr_rotation=v["lr_rotation"], lr_sh=v["lr_sh"],
        iterations=v["iters"], seed=v["seed"], weights=weights,
        neutral_count=v["neutral_count"], mouth_count=v["mouth_count"],
        scene_extent=v["scene_extent"], lr_decay=v["lr_decay"],
        background=background, threads=v["threads"])

    if v["init_model"] is not None:
        model = assets.load_model(v["init_model"])
        sigmas = (v["init_noise_center"], v["init_noise_opacity"],
                  v["init_noise_scale"], v["init_noise_rotation"],
                  v["init_noise_sh"])
        if any(s < 0 for s in sigmas):
            raise ValidationError("init noise sigmas must be nonnegative")
        if any(s > 0 for s in sigmas):
            model = trainer.perturb_model(
                model, v["seed"], sigma_center=sigmas[0],
                sigma_opacity=sigmas[1], sigma_scale=sigmas[2],
                sigma_rotation=sigmas[3], sigma_sh=sigmas[4])
    else:
        volume = CylinderVolume(
            center=_parse_vec3(v["mouth_center"], "mouth-center"),
            axis=(0.0, 1.0, 0.0), radius=v["mouth_radius"],
            half_height=v["mouth_half_height"])
        init = trainer.InitSpec(
            n_expressions=n_expr, n_joints=n_joints, volume=volume,
            mouth_joint=n_joints - 1, seed=v["seed"],
            sh_degree=v["sh_degree"])
        model = trainer.initialize_model(config, init)
        config = replace(config, volume=volume)

    out_path = Path(v["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(v["log"]) if v["log"] is not None else \
        out_path.with_name(out_path.stem + "_loss.jsonl")
    checkpoint_dir = None
    if v["checkpoint_every"] > 0:
        checkpoint_dir = Path(v["checkpoint_dir"]) if v["checkpoint_dir"] \
            else out_path.parent / "checkpoints"
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    with open(log_path, "w") as log_file:
        state, history = trainer.train(
            model, train_frames, config, log_file=log_file,
            checkpoint_every=v["checkpoint_every"],
            checkpoint_dir=checkpoint_dir)
    assets.save_model(out_path, state.model)

    first, last = history[0]["loss"], history[-1]["loss"]
    print(f"trained {len(history)} iterations: loss {first:.6f} -> {last:.6f} "
          f"({100.0 * last / first:.1f}% of initial)")
    print(f"wrote {out_path}")
    if held_frames:
        report = trainer.evaluate(state.model, held_frames,
                                  background=background, threads=v["threads"])
        eval_path = Path(v["eval_report"]) if v["eval_report"] is not None \
            else out_path.with_name(out_path.stem + "_eval.json")
        _emit_report(report, eval_path)
    return 0


def cmd_metrics_stability(v: dict) -> int:
    video = assets.load_video_frames(v["video_dir"])
    if len(video) < 2:
        raise ValidationError(
            f"stability metrics need at least 2 frames, found {len(video)}")
    report = metrics.stability_report(video, jitter_px=v["jitter"],
                                      seed=v["seed"])
    _emit_report(report, v["json"])
    return 0


def cmd_metrics_quality(v: dict) -> int:
    renders = assets.load_video_frames(v["render_dir"])
    targets = assets.load_video_frames(v["target_dir"])
    report = metrics.quality_report(list(renders.frames), list(targets.frames))
    _emit_report(report, v["json"])
    return 0


def cmd_synth(v: dict) -> int:
    config = assets.SynthConfig(
        gaussians=v["gaussians"], blendshapes=v["blendshapes"],
        frames=v["frames"], width=v["width"], height=v["height"],
        mouth_gaussians=v["mouth_gaussians"], fps=v["fps"])
    out_dir = assets.synth_dataset(config, v["seed"], v["out_dir"],
                                   threads=v["threads"])
    print(f"wrote {config.frames} frames to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Wiring

def _build_parser():
    parser = _Parser(prog="gblend",
                     description="Gaussian blendshape head avatars: render, "
                                 "animate, train, measure, synthesize.")
    parser.add_argument("--version", action="version",
                        version=f"gblend {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    commands = {}

    c = _Command(sub.add_parser(
        "render", help="render one frame of a sequence to a PNG"))
    c.flag("--model", required=True, help="model file (.gbav)")
    c.flag("--frames", required=True, help="frame parameter file or directory")
    c.flag("--frame-index", type=int, default=0, help="frame to render")
    c.flag("--out", required=True, help="output image path")
    c.flag("--width", type=int, help="override render width")
    c.flag("--height", type=int, help="override render height")
    c.flag("--background", default="0,0,0", help="gray value or r,g,b in [0,1]")
    c.flag("--threads", type=int, help="worker threads (env GBLEND_THREADS)")
    commands["render"] = (c, cmd_render)

    c = _Command(sub.add_parser(
        "animate", help="render every frame and report throughput"))
    c.flag("--model", required=True, help="model file (.gbav)")
    c.flag("--frames", required=True, help="frame parameter file or directory")
    c.flag("--out-dir", required=True, help="directory for rendered frames")
    c.flag("--width", type=int, help="override render width")
    c.flag("--height", type=int, help="override render height")
    c.flag("--background", default="0,0,0", help="gray value or r,g,b in [0,1]")
    c.flag("--threads", type=int, help="worker threads (env GBLEND_THREADS)")
    commands["animate"] = (c, cmd_animate)

    c = _Command(sub.add_parser(
        "train", help="optimize a model against a frame sequence"))
    c.flag("--data-dir", required=True, help="sequence directory "
           "(params.json + frame/mask images)")
    c.flag("--out", required=True, help="output model path (.gbav)")
    c.flag("--iters", type=int, default=500, help="optimization steps")
    c.flag("--seed", type=int, default=0, help="sampling and init seed")
    c.flag("--holdout", type=int, default=0,
           help="hold out the last N frames and evaluate on them")
    c.flag("--lr-center", type=float, default=3.2e-7)
    c.flag("--lr-opacity", type=float, default=5e-5)
    c.flag("--lr-scale", type=float, default=5e-4)
    c.flag("--lr-rotation", type=float, default=1e-4)
    c.flag("--lr-sh", type=float, default=1.25e-3)
    c.flag("--lambda1", type=float, default=1.0, help="rgb term weight")
    c.flag("--lambda2", type=float, default=10.0, help="alpha term weight")
    c.flag("--lambda3", type=float, default=100.0, help="mouth term weight")
    c.flag("--lambda-rgb", type=float, default=0.2,
           help="L1 share inside the rgb term")
    c.flag("--neutral-count", type=int, default=50000,
           help="head Gaussians at fresh init")
    c.flag("--mouth-count", type=int, default=14000,
           help="mouth Gaussians at fresh init")
    c.flag("--sh-degree", type=int, default=0, help="SH degree at fresh init")
    c.flag("--scene-extent", type=float, default=1.0,
           help="multiplier on the center learning rate")
    c.flag("--lr-decay", type=float, default=1.0,
           help="per-iteration exponential rate decay (1 = constant)")
    c.flag("--background", default="0,0,0", help="gray value or r,g,b in [0,1]")
    c.flag("--init-model", help="start from this model instead of sampling")
    c.flag("--init-noise-center", type=float, default=0.0,
           help="noise sigma added to centers of --init-model")
    c.flag("--init-noise-opacity", type=float, default=0.0)
    c.flag("--init-noise-scale", type=float, default=0.0)
    c.flag("--init-noise-rotation", type=float, default=0.0)
    c.flag("--init-noise-sh", type=float, default=0.0)
    c.flag("--mouth-center", default="0,-0.16,0.14",
           help="mouth cylinder center at fresh init (x,y,z)")
    c.flag("--mouth-radius", type=float, default=0.09)
    c.flag("--mouth-half-height", type=float, default=0.05)
    c.flag("--checkpoint-every", type=int, default=0,
           help="write a checkpoint every K iterations (0 = never)")
    c.flag("--checkpoint-dir", help="checkpoint directory "
           "(default: 'checkpoints' next to --out)")
    c.flag("--log", help="loss log path (JSONL; default <out>_loss.jsonl); "
           "each line holds exactly iter, loss, l_rgb, l_alpha, l_reg, wall_ms")
    c.flag("--eval-report", help="held-out evaluation JSON path")
    c.flag("--threads", type=int, help="worker threads (env GBLEND_THREADS)")
    commands["train"] = (c, cmd_train)

    m = sub.add_parser("metrics", help="temporal stability or render quality")
    msub = m.add_subparsers(dest="metric", required=True, metavar="kind")

    c = _Command(msub.add_parser(
        "stability", help="ITF/ISI of a frame directory"))
    c.flag("--video-dir", required=True, help="directory of frame images")
    c.flag("--jitter", type=int, default=0,
           help="also score a jitter-injected copy (max shift, px)")
    c.flag("--seed", type=int, default=0, help="jitter seed")
    c.flag("--json", help="also write the report as JSON here")
    commands[("metrics", "stability")] = (c, cmd_metrics_stability)

    c = _Command(msub.add_parser(
        "quality", help="PSNR/SSIM of renders against targets"))
    c.flag("--render-dir", required=True, help="directory of rendered frames")
    c.flag("--target-dir", required=True, help="directory of target frames")
    c.flag("--json", help="also write the report as JSON here")
    commands[("metrics", "quality")] = (c, cmd_metrics_quality)

    c = _Command(sub.add_parser(
        "synth", help="generate a synthetic training sequence"))
    c.flag("--out-dir", required=True, help="output dataset directory")
    c.flag("--gaussians", type=int, default=500, help="head Gaussian count")
    c.flag("--blendshapes", type=int, default=4, help="expression count")
    c.flag("--frames", type=int, default=20, help="frame count")
    c.flag("--width", type=int, default=128)
    c.flag("--height", type=int, default=128)
    c.flag("--mouth-gaussians", type=int, default=0,
           help="mouth Gaussian count (0 = derive from --gaussians)")
    c.flag("--fps", type=float, default=25.0)
    c.flag("--seed", type=int, default=0)
    c.flag("--threads", type=int, help="worker threads (env GBLEND_THREADS)")
    commands["synth"] = (c, cmd_synth)

    return parser, commands


def main(argv=None) -> int:
    parser, commands = _build_parser()
    try:
        ns = parser.parse_args(argv)
        key = ns.command if ns.command != "metrics" else ("metrics", ns.metric)
        command, handler = commands[key]
        return handler(command.merge(ns))
    except SystemExit:
        raise
    except GBlendError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        if os.environ.get("GBLEND_DEBUG"):
            import traceback
            traceback.print_exc()
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
