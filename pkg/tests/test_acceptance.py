"""End-to-end acceptance gate.

One test per shipping criterion.  Every test finishes by printing a single
``criterion N: PASS/FAIL`` line with the measured numbers (visible with
``pytest -s``); the assertion message carries the same line so failures are
self-describing.  All checks are property or oracle based and run on
synthetic data generated in-process: nothing here downloads datasets,
loads pretrained weights, or compares against numbers measured on hardware
we do not control.
"""

import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

from conftest import (
    frontal_camera,
    random_delta_set,
    random_gaussian_set,
    rigid_pose,
    rotation_y,
)
from gblend.blendpose import blend_expression, lbs, pose_model, pose_mouth
from gblend.losses import (
    CylinderVolume,
    LossWeights,
    combine,
    cylinder_sdf,
    dssim,
    fit_mouth_cylinder,
    l1,
    rgb_loss,
    total_loss,
)
from gblend.metrics import VideoSequence, inject_jitter, isi, itf
from gblend.model import (
    BlendshapeModel,
    ExpressionCoeffs,
    PoseParams,
    activate,
)
from gblend.rasterizer import (
    project,
    rasterize,
    rasterize_backward,
    rasterize_reference,
    render,
)
from gblend import assets


def _report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# Criterion 1: basis of the gate

def test_criterion_1_property_and_oracle_based():
    """The gate checks properties and oracles, not published benchmark runs.

    Results measured on real capture subjects depend on data and hardware
    that cannot ship with the package, so no test here asserts equality with
    externally reported numbers.  What stands in for them: exact-arithmetic
    oracles, brute-force reference implementations, finite-difference
    checks, and a seeded synthetic recovery run.  This test verifies the
    module actually contains that coverage.
    """
    names = {n for n in globals() if n.startswith("test_criterion_")}
    expected = {f"test_criterion_{i}" for i in range(1, 10)}
    found = {n for n in expected
             if any(m.startswith(n + "_") or m == n for m in names)}
    missing = expected - found
    _report(1, not missing,
            "gate is property/oracle based; criteria 1-9 all present"
            if not missing else f"missing criteria: {sorted(missing)}")


# ---------------------------------------------------------------------------
# Criterion 2: tiled rasterizer vs brute-force reference

def test_criterion_2_rasterizer_matches_reference():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(10, 201))
        g = random_gaussian_set(rng, n, sh_degree=int(rng.integers(0, 3)),
                                spread=0.4, scale=0.1)
        if n > 20:  # a few splats behind the camera exercise culling
            g.centers[rng.choice(n, 3, replace=False), 2] = 50.0
        cam = frontal_camera(64, 64)
        records = project(pose_mouth(g, PoseParams.identity(1), 0), cam)
        bg = rng.random(3)
        a = rasterize(records, 64, 64, bg)
        b = rasterize_reference(records, 64, 64, bg)
        worst = max(worst,
                    float(np.abs(a.rgb - b.rgb).max()),
                    float(np.abs(a.alpha - b.alpha).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 60.0
    _report(2, ok, f"100 random scenes at 64x64, max |tiled - reference| = "
                   f"{worst:.3e} (tol 1e-5), {elapsed:.1f}s (budget 60s)")


# ---------------------------------------------------------------------------
# Criterion 3: analytic gradients of the full pipeline vs finite differences

def _grad_check_scene():
    """10 Gaussians (8 head + 2 mouth), 2 blendshapes, 1 joint, 32x32.

    Scene seed is pinned to one where no sampled parameter sits within
    h = 1e-4 of a compositing discontinuity (blending cutoff, termination,
    splat bounding box), so central differences stay on one side of every
    kink.  The target is the clean render pushed strictly away from the
    rendered values, keeping the L1 term away from its |x| corner.
    """
    rng = np.random.default_rng(5)
    neutral = random_gaussian_set(rng, 8, sh_degree=0, spread=0.18, scale=0.07)
    deltas = [random_delta_set(rng, 8, sh_degree=0) for _ in range(2)]
    mouth = random_gaussian_set(rng, 2, sh_degree=0, spread=0.05, scale=0.05)
    mouth.centers += np.array([0.0, -0.12, 0.1])
    model = BlendshapeModel(neutral=neutral, deltas=deltas,
                            weights=np.ones((8, 1)), mouth=mouth,
                            mouth_joint=0)
    coeffs = ExpressionCoeffs(np.array([0.35, -0.2]))
    pose = rigid_pose([rotation_y(0.25)], [np.array([0.02, -0.01, 0.03])])
    cam = frontal_camera(32, 32)
    volume = fit_mouth_cylinder(model.mouth.centers)

    out = render(pose_model(model, coeffs, pose), cam, 0.3)
    rng2 = np.random.default_rng(1005)
    offset = 0.12 + 0.08 * rng2.random(out.rgb.shape)
    target = np.clip(out.rgb * 0.8 + offset, 0.0, 1.0)
    mask = np.clip(out.alpha * 0.7 + 0.12, 0.0, 1.0)
    return model, coeffs, pose, cam, volume, target, mask


PROPERTIES = ("centers", "scales_raw", "rotations_raw", "opacities_raw", "sh")


def test_criterion_3_full_pipeline_gradients():
    t0 = time.perf_counter()
    model, coeffs, pose, cam, volume, target, mask = _grad_check_scene()

    def loss_value():
        out = render(pose_model(model, coeffs, pose), cam, 0.3)
        return total_loss(out.rgb, target, out.alpha, mask,
                          mouth_centers=model.mouth.centers,
                          volume=volume).value

    # Analytic gradients, assembled exactly as the trainer does: head-slice
    # gradients flow to the neutral by linearity and to each delta scaled by
    # its coefficient; the mouth adds the regularizer's center term.
    out = render(pose_model(model, coeffs, pose), cam, 0.3)
    tl = total_loss(out.rgb, target, out.alpha, mask,
                    mouth_centers=model.mouth.centers, volume=volume)
    g = rasterize_backward(out, tl.d_rgb, tl.d_alpha)
    nh = len(model.neutral)
    head, mouth_g = g.slice(0, nh), g.slice(nh, nh + len(model.mouth))
    analytic = {}
    for prop in PROPERTIES:
        analytic[("neutral", prop)] = getattr(head, "d_" + prop)
        for k in range(2):
            analytic[("delta", k, prop)] = coeffs.psi[k] * getattr(
                head, "d_" + prop)
        analytic[("mouth", prop)] = getattr(mouth_g, "d_" + prop)
    analytic[("mouth", "centers")] = mouth_g.d_centers + tl.d_mouth_centers

    def owner_array(owner, prop):
        if owner[0] == "neutral":
            return getattr(model.neutral, prop)
        if owner[0] == "delta":
            return getattr(model.deltas[owner[1]], prop)
        return getattr(model.mouth, prop)

    sample_rng = np.random.default_rng(99)
    plan = [
        (("neutral",), "centers", 24), (("neutral",), "scales_raw", 12),
        (("neutral",), "rotations_raw", 12),
        (("neutral",), "opacities_raw", 8), (("neutral",), "sh", 9),
        (("delta", 0), "centers", 12), (("delta", 0), "sh", 6),
        (("delta", 1), "scales_raw", 12), (("delta", 1), "rotations_raw", 4),
        (("mouth",), "centers", 6), (("mouth",), "scales_raw", 3),
        (("mouth",), "rotations_raw", 4), (("mouth",), "opacities_raw", 2),
        (("mouth",), "sh", 3),
    ]
    coords = []
    for owner, prop, count in plan:
        arr = owner_array(owner, prop)
        flats = sample_rng.choice(arr.size, size=min(count, arr.size),
                                  replace=False)
        coords.extend((owner, prop, int(f)) for f in flats)

    h = 1e-4
    worst = 0.0
    for owner, prop, flat in coords:
        arr = owner_array(owner, prop)
        orig = arr.flat[flat]
        arr.flat[flat] = orig + h
        up = loss_value()
        arr.flat[flat] = orig - h
        down = loss_value()
        arr.flat[flat] = orig
        fd = (up - down) / (2.0 * h)
        an = analytic[owner + (prop,)].flat[flat]
        worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-8))

    props_hit = {prop for _, prop, _ in coords}
    owners_hit = {owner[0] for owner, _, _ in coords}
    mouth_centers_hit = any(o == ("mouth",) and p == "centers"
                            for o, p, _ in coords)
    elapsed = time.perf_counter() - t0
    ok = (worst < 1e-2 and len(coords) >= 100
          and props_hit == set(PROPERTIES)
          and owners_hit == {"neutral", "delta", "mouth"}
          and mouth_centers_hit and elapsed < 120.0)
    _report(3, ok, f"{len(coords)} parameters across all five groups, "
                   f"deltas, and mouth centers; worst FD rel err = "
                   f"{worst:.3e} at h=1e-4 (tol 1e-2), {elapsed:.1f}s "
                   f"(budget 120s)")


# ---------------------------------------------------------------------------
# Criterion 4: loss arithmetic is exact

def test_criterion_4_loss_arithmetic_exact():
    total = combine(0.06, 0.2, 0.0, LossWeights(lambda1=1.0, lambda2=10.0,
                                                lambda3=100.0))
    exact = total == 2.06

    rng = np.random.default_rng(17)
    a = rng.random((24, 20, 3))
    b = rng.random((24, 20, 3))
    composed = rgb_loss(a, b, 0.2) == 0.2 * l1(a, b) + 0.8 * dssim(a, b)

    _report(4, exact and composed,
            f"combine(0.06, 0.2, 0.0; 1/10/100) == 2.06 exactly ({exact}); "
            f"rgb term == 0.2*L1 + 0.8*D-SSIM bitwise ({composed})")


# ---------------------------------------------------------------------------
# Criterion 5: CLI synth + train recovers the scene

def _run_cli(args, cwd):
    env = dict(os.environ)
    env.pop("GBLEND_THREADS", None)
    proc = subprocess.run([sys.executable, "-m", "gblend.cli", *args],
                          capture_output=True, text=True, cwd=cwd, env=env)
    assert proc.returncode == 0, (
        f"gblend {' '.join(map(str, args))} failed:\n{proc.stderr}")
    return proc


TRAIN_FLAGS = [
    "--iters", "500", "--seed", "1", "--holdout", "5",
    "--init-noise-center", "0.01", "--init-noise-opacity", "1.5",
    "--init-noise-scale", "0.5", "--init-noise-rotation", "0.3",
    "--init-noise-sh", "0.7",
    "--lr-center", "4e-5", "--lr-opacity", "6e-3", "--lr-scale", "2.5e-3",
    "--lr-rotation", "1.5e-3", "--lr-sh", "3e-3",
]


def test_criterion_5_synthetic_recovery_via_cli(tmp_path):
    t0 = time.perf_counter()
    ds = tmp_path / "ds"
    _run_cli(["synth", "--out-dir", str(ds), "--gaussians", "500",
              "--blendshapes", "4", "--frames", "20", "--width", "128",
              "--height", "128", "--seed", "11"], tmp_path)

    def train(out_dir):
        out_dir.mkdir()
        model_path = out_dir / "model.gbav"
        _run_cli(["train", "--data-dir", str(ds), "--out", str(model_path),
                  "--init-model", str(ds / "gt_model.gbav"), *TRAIN_FLAGS],
                 tmp_path)
        return model_path

    model_a = train(tmp_path / "run_a")
    model_b = train(tmp_path / "run_b")

    history = [json.loads(line) for line in
               (tmp_path / "run_a" / "model_loss.jsonl").read_text()
               .splitlines()]
    first, last = history[0]["loss"], history[-1]["loss"]
    ratio = last / first
    report = json.loads((tmp_path / "run_a" / "model_eval.json").read_text())
    mean_psnr = report["mean_psnr_db"]
    deterministic = model_a.read_bytes() == model_b.read_bytes()
    elapsed = time.perf_counter() - t0

    ok = (ratio < 0.2 and mean_psnr >= 30.0 and deterministic
          and elapsed < 900.0)
    _report(5, ok, f"500 iters on 20-frame 128x128 synth: loss "
                   f"{first:.4f} -> {last:.4f} ({100 * ratio:.1f}% of "
                   f"initial, need <20%); held-out PSNR "
                   f"{mean_psnr:.2f} dB (need >=30); same-seed reruns "
                   f"byte-identical ({deterministic}); {elapsed:.0f}s "
                   f"(budget 900s)")


# ---------------------------------------------------------------------------
# Criterion 6: expression blending and skinning invariants

def test_criterion_6_blend_and_skin_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(23)
    neutral = random_gaussian_set(rng, 12, sh_degree=1)
    deltas = [random_delta_set(rng, 12, sh_degree=1) for _ in range(3)]
    # dyadic weights so every row sums to exactly 1.0 in binary
    first = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=12)
    weights = np.stack([first, 1.0 - first], axis=1)
    mouth = random_gaussian_set(rng, 4, sh_degree=1)
    model = BlendshapeModel(neutral=neutral, deltas=deltas, weights=weights,
                            mouth=mouth, mouth_joint=1)

    zero = blend_expression(model, ExpressionCoeffs.zeros(3))
    neutral_exact = all(
        np.array_equal(getattr(zero, p), getattr(model.neutral, p))
        for p in PROPERTIES)

    psi_a = np.array([0.4, -0.3, 0.2])
    psi_b = np.array([-0.1, 0.5, 0.35])
    ba = blend_expression(model, ExpressionCoeffs(psi_a))
    bb = blend_expression(model, ExpressionCoeffs(psi_b))
    bs = blend_expression(model, ExpressionCoeffs(psi_a + psi_b))
    linear_ok = True
    for p in PROPERTIES:
        lhs = getattr(bs, p) - getattr(model.neutral, p)
        rhs = ((getattr(ba, p) - getattr(model.neutral, p))
               + (getattr(bb, p) - getattr(model.neutral, p)))
        scale = max(float(np.abs(lhs).max()), float(np.abs(rhs).max()), 1e-12)
        linear_ok &= float(np.abs(lhs - rhs).max()) / scale <= 1e-6

    posed = lbs(zero, weights, PoseParams.identity(2))
    act = activate(zero)
    noop_exact = all(
        np.array_equal(getattr(posed, f), getattr(act, f))
        for f in ("centers", "scales", "rotations", "opacities", "sh"))

    pose = rigid_pose([rotation_y(0.3), rotation_y(-0.2)],
                      [np.array([0.05, 0.0, -0.02]), np.array([0.0, 0.1, 0.0])])
    pa = pose_model(model, ExpressionCoeffs(psi_a), pose)
    pb = pose_model(model, ExpressionCoeffs(psi_b), pose)
    nm = len(model.mouth)
    mouth_fixed = all(
        np.array_equal(getattr(pa, f)[-nm:], getattr(pb, f)[-nm:])
        for f in ("centers", "scales", "rotations", "opacities", "sh"))

    elapsed = time.perf_counter() - t0
    ok = (neutral_exact and linear_ok and noop_exact and mouth_fixed
          and elapsed < 10.0)
    _report(6, ok, f"zero-coeff blend exact ({neutral_exact}); blending "
                   f"linear to 1e-6 ({linear_ok}); identity-pose skinning "
                   f"is a no-op after activation ({noop_exact}); mouth "
                   f"ignores expression coefficients bit-exactly "
                   f"({mouth_fixed}); {elapsed:.1f}s (budget 10s)")


# ---------------------------------------------------------------------------
# Criterion 7: temporal metrics detect injected jitter

def test_criterion_7_jitter_lowers_stability_metrics():
    cfg = assets.SynthConfig(gaussians=60, blendshapes=2, frames=30,
                             width=48, height=48, mouth_gaussians=6)
    rng = np.random.default_rng(3)
    model = assets.make_synth_model(cfg, rng)
    frames = assets.make_synth_trajectory(cfg, rng)
    rgbs = [render(pose_model(model, f.coeffs, f.pose), f.camera, 0.15).rgb
            for f in frames]
    video = VideoSequence(np.stack(rgbs), fps=cfg.fps)

    base_itf, base_isi = itf(video), isi(video)
    wins = 0
    for seed in range(20):
        jittered = inject_jitter(video, 2, seed)
        if itf(jittered) < base_itf and isi(jittered) < base_isi:
            wins += 1
    _report(7, wins >= 19,
            f"+-2px jitter on a 30-frame clip lowered both ITF and ISI in "
            f"{wins}/20 seeds (need >=19); clean ITF {base_itf:.2f} dB, "
            f"clean ISI {base_isi:.4f}")


# ---------------------------------------------------------------------------
# Criterion 8: cylinder SDF vs membership oracle

def test_criterion_8_cylinder_sdf_oracle():
    volume = CylinderVolume(center=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0),
                            radius=1.0, half_height=2.0)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-4.0, 4.0, (10_000, 3))
    sdf = cylinder_sdf(pts, volume)
    inside = (pts[:, 0] ** 2 + pts[:, 1] ** 2 <= 1.0) \
        & (np.abs(pts[:, 2]) <= 2.0)
    decided = np.abs(sdf) > 1e-9
    mismatches = int(np.count_nonzero((sdf[decided] > 0) == inside[decided]))

    hand = [((0.0, 0.0, 0.0), -1.0),   # axis midpoint: 1 to wall, 2 to caps
            ((0.5, 0.0, 0.0), -0.5),   # nearest feature is the wall
            ((1.0, 0.0, 0.0), 0.0),    # on the wall
            ((0.0, 0.0, 2.0), 0.0),    # on a cap
            ((1.0, 0.0, 2.0), 0.0),    # on the rim
            ((3.0, 0.0, 0.0), 2.0),    # radial outside
            ((0.0, 0.0, 5.0), 3.0),    # axial outside
            ((4.0, 0.0, 6.0), 5.0)]    # corner: 3-4-5 triangle to the rim
    hand_ok = all(
        cylinder_sdf(np.array([p]), volume)[0] == expect
        for p, expect in hand)

    ok = mismatches == 0 and hand_ok
    _report(8, ok, f"sign agrees with the membership oracle on "
                   f"{int(np.count_nonzero(decided))}/10000 points outside "
                   f"the 1e-9 band ({mismatches} mismatches); "
                   f"{len(hand)} hand-computed distances exact ({hand_ok})")


# ---------------------------------------------------------------------------
# Criterion 9: serialization round trips and golden files

def test_criterion_9_serialization_stability(tmp_path):
    from test_assets import GOLDEN_DIR, GOLDEN_SHA256, golden_checkpoint, \
        golden_model

    rng = np.random.default_rng(31)
    neutral = random_gaussian_set(rng, 9, sh_degree=2)
    model = BlendshapeModel(
        neutral=neutral,
        deltas=[random_delta_set(rng, 9, sh_degree=2) for _ in range(3)],
        weights=rng.random((9, 2)),
        mouth=random_gaussian_set(rng, 3, sh_degree=2),
        mouth_joint=1)

    p1, p2 = tmp_path / "a.gbav", tmp_path / "b.gbav"
    assets.save_model(p1, model)
    assets.save_model(p2, assets.load_model(p1))
    model_stable = p1.read_bytes() == p2.read_bytes()

    arrays = [rng.standard_normal((9, 3)), rng.random(27)]
    c1, c2 = tmp_path / "a.gbck", tmp_path / "b.gbck"
    assets.save_checkpoint(c1, model, arrays, iteration=12, seed=4)
    m2, arrays2, iteration2, seed2 = assets.load_checkpoint(c1)
    assets.save_checkpoint(c2, m2, arrays2, iteration=iteration2, seed=seed2)
    ckpt_stable = c1.read_bytes() == c2.read_bytes()

    golden_ok = True
    for name, digest in GOLDEN_SHA256.items():
        data = (GOLDEN_DIR / name).read_bytes()
        golden_ok &= hashlib.sha256(data).hexdigest() == digest
    regen_ok = (
        assets.model_to_bytes(golden_model())
        == (GOLDEN_DIR / "model.gbav").read_bytes())
    regen_ok &= (
        golden_checkpoint() == (GOLDEN_DIR / "checkpoint.gbck").read_bytes())

    ok = model_stable and ckpt_stable and golden_ok and regen_ok
    _report(9, ok, f"model save->load->save byte-identical ({model_stable}); "
                   f"checkpoint byte-identical ({ckpt_stable}); "
                   f"{len(GOLDEN_SHA256)} golden files hash-stable "
                   f"({golden_ok}) and regenerable bit-exactly ({regen_ok})")
