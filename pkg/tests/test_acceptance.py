"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Each test measures its quantity, records a summary line (printed in the
pytest terminal summary) and then asserts. Runtime limits are part of the
criterion.
"""

import math
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from uwrectify.cli import main
from uwrectify.errors import TotalInternalReflection
from uwrectify.geometry import CameraModel, Pose, Ray, distort_image, orbit_poses, rectify_image, snell_angle
from uwrectify.image import ImageBuffer, linear_to_srgb, psnr
from uwrectify.io import read_pfm, read_trace_csv
from uwrectify.manifest import load_manifest, save_manifest
from uwrectify.optimize import (
    CaptureSet,
    OptimConfig,
    build_ray_table,
    color_cast_ratio,
    gradient_check,
    optimize_joint,
    optimize_medium_table,
)
from uwrectify.render import MediumParams, brightness_compensation, render_image, transmittance_weights
from uwrectify.scene import SamplingConfig, VoxelScene, make_test_scene, sample_ray

pytestmark = pytest.mark.acceptance


def report(n: int, name: str, ok: bool, detail: str, elapsed: float, limit: float) -> bool:
    ok = ok and elapsed < limit
    line = f"[{n}] {'PASS' if ok else 'FAIL'} {name}: {detail} | runtime {elapsed:.1f}s (limit {limit:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_1_snell():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    phi = rng.uniform(0, np.radians(48), 1000)
    back = snell_angle(snell_angle(phi, 1.333, 1.0), 1.0, 1.333)
    recip = float(np.max(np.abs(back - phi)))
    identity = float(np.max(np.abs(snell_angle(phi, 1.2, 1.2) - phi)))
    # high-precision oracle from the scalar libm, independent of the vectorized path
    oracle = math.degrees(math.asin(1.3330 * 0.5))
    phi_a = float(np.degrees(snell_angle(np.radians(30.0), 1.3330, 1.0)))
    crit = math.degrees(math.asin(1 / 1.3330))
    raised_above = True
    try:
        snell_angle(np.radians(crit + 1e-3), 1.3330, 1.0)
        raised_above = False
    except TotalInternalReflection:
        pass
    below_ok = np.isfinite(snell_angle(np.radians(crit - 1e-3), 1.3330, 1.0))
    elapsed = time.perf_counter() - t0
    ok = (
        recip < 1e-9
        and identity == 0.0
        and abs(phi_a - oracle) < 1e-6
        and abs(phi_a - 41.797) < 1e-6
        and abs(crit - 48.606) < 1e-3
        and raised_above
        and below_ok
    )
    detail = (
        f"reciprocity {recip:.1e}, identity {identity:.1e}, 30deg -> {phi_a:.7f} "
        f"(target 41.797 +- 1e-6, |diff| {abs(phi_a - 41.797):.1e}; libm oracle {oracle:.7f}, |diff| {abs(phi_a - oracle):.1e}), "
        f"critical {crit:.4f} (48.606 +- 1e-3), TIR raised above it: {raised_above}"
    )
    assert report(1, "Snell suite", ok, detail, elapsed, 1.0)


def test_2_quadrature():
    t0 = time.perf_counter()
    scene = make_test_scene("slab", z=2.0, thickness=1.0, sigma_max=1.0)
    exact = 1.0 - math.exp(-1.0)
    errs = {}
    for n in (256, 512):
        s = sample_ray(Ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), SamplingConfig(0.0, 6.0, n), scene=scene)
        w, _ = transmittance_weights(s)
        errs[n] = abs(float(w.sum()) - exact)
    elapsed = time.perf_counter() - t0
    ratio = errs[256] / errs[512]
    ok = errs[256] < 1e-3 and ratio >= 2.0
    detail = f"|sum w - (1 - e^-1)| = {errs[256]:.2e} at N=256, {errs[512]:.2e} at N=512 (ratio {ratio:.2f}, need >= 2)"
    assert report(2, "Quadrature oracle", ok, detail, elapsed, 5.0)


def test_3_formation_identity():
    t0 = time.perf_counter()
    scene = make_test_scene("sphere")
    cam = CameraModel.from_fov(64, 64, 50.0, n_a=1.0, n_w=1.0)
    pose = Pose.look_at([0.5, -1.0, -3.0], [0, 0, 0], up=(0, -1, 0))
    cfg = SamplingConfig(1.0, 5.5, 128)
    uw = render_image(scene, MediumParams([0.3, 0.6, 0.9], [0.0, 0.0, 0.0]), cam, pose, "underwater", cfg)
    air = render_image(scene, None, cam, pose, "inair", cfg)
    diff = float(np.max(np.abs(uw.data - air.data)))
    # upper attenuation bound 1.0 and the object 20 units away
    far = Pose.look_at([0.0, 0.0, -20.0], [0, 0, 0], up=(0, -1, 0))
    deep = MediumParams([0.2, 0.5, 0.7], [1.0, 1.0, 1.0])
    img = render_image(scene, deep, cam.replace(n_w=1.333), far, "underwater", SamplingConfig(0.0, 30.0, 512))
    to_A = float(np.max(np.abs(img.data[img.mask] - deep.A)))
    elapsed = time.perf_counter() - t0
    ok = diff <= 1e-12 and to_A <= 1e-6
    detail = f"max |underwater - inair| = {diff:.1e} (<= 1e-12), deep water max |I - A| = {to_A:.1e} (<= 1e-6)"
    assert report(3, "Formation-model identity", ok, detail, elapsed, 10.0)


def test_4_gradient_checks():
    t0 = time.perf_counter()
    manifest_cam = CameraModel.from_fov(64, 64, 50.0)
    poses = [Pose(translation=[0.1 * k, 0.0, 0.0]) for k in range(8)]
    rep = gradient_check(
        make_test_scene("slab"), MediumParams.default(), manifest_cam, poses,
        SamplingConfig(0.0, 6.0, 128), OptimConfig(), n_rays=512,
    )  # fmt: skip
    elapsed = time.perf_counter() - t0
    ok = all(rep.errors[g] < 1e-4 for g in ("A", "beta", "c_o"))
    detail = ", ".join(f"{k} {v:.1e}" for k, v in rep.errors.items()) + " (max relative error, need < 1e-4)"
    assert report(4, "Gradient checks", ok, detail, elapsed, 30.0)


MEDIUM_TRUTH = MediumParams([0.8, 0.85, 0.9], [0.45, 0.25, 0.25])


def test_5_medium_recovery():
    t0 = time.perf_counter()
    scene = make_test_scene("sphere")
    cam = CameraModel.from_fov(64, 64, 50.0)
    cfg = SamplingConfig(1.0, 5.0, 96)
    poses = orbit_poses(8, radius=np.linspace(2.6, 3.6, 8))
    caps = CaptureSet(cam, [(p, render_image(scene, MEDIUM_TRUTH, cam, p, "underwater", cfg)) for p in poses])
    table = build_ray_table(scene, caps, cfg)
    # lam = 0: the color-cast prior biases beta_r by about 5 % on these captures
    oc = OptimConfig(lam=0.0, iterations=5000, batch_size=None, lr_start=0.1, lr_end=0.01, lr_span=5000)
    m, trace = optimize_medium_table(table, color_cast_ratio(caps), oc)
    elapsed = time.perf_counter() - t0
    rel_beta = np.abs(m.beta - MEDIUM_TRUTH.beta) / MEDIUM_TRUTH.beta
    abs_A = np.abs(m.A - MEDIUM_TRUTH.A)
    ok = len(trace) <= 5000 and rel_beta.max() < 0.02 and abs_A.max() < 0.02
    detail = f"beta rel err {rel_beta.max():.1e} (< 0.02), A abs err {abs_A.max():.1e} (< 0.02), {len(trace)} iterations"
    assert report(5, "Medium recovery roundtrip", ok, detail, elapsed, 300.0)


# Joint recovery setting: a clearer medium than criterion 5 and views from
# 3.5 to 4.5 units, so object and background pixels differ in the captures.
JOINT_TRUTH = MediumParams([0.35, 0.45, 0.55], [0.2, 0.12, 0.1])
JOINT_CONFIG = dict(
    iterations=2500, batch_size=4096, lr_start=1.0, lr_end=0.1, lr_span=2500,
    density_lr_scale=300.0, color_lr_scale=1.0, medium_lr_scale=0.1, medium_start=500,
    sigma_init=1.0, visit_normalized=True,
)  # fmt: skip
JOINT_SIZE = 32
JOINT_THRESHOLD = 10.0


def test_6_joint_recovery():
    t0 = time.perf_counter()
    scene = make_test_scene("sphere")
    cam = CameraModel.from_fov(JOINT_SIZE, JOINT_SIZE, 50.0)
    cfg = SamplingConfig(1.5, 6.5, 64, sigma_thresh=JOINT_THRESHOLD)
    poses = orbit_poses(8, radius=np.linspace(3.5, 4.5, 8), elevation_deg=[20.0, -10.0] * 4)
    caps = CaptureSet(cam, [(p, render_image(scene, JOINT_TRUTH, cam, p, "underwater", cfg)) for p in poses])
    est, medium, _ = optimize_joint(caps, OptimConfig(**JOINT_CONFIG), 16, (scene.bounds_min, scene.bounds_max), cfg)
    scores = [
        psnr(render_image(est, None, cam, p, "inair", cfg).data, render_image(scene, None, cam, p, "inair", cfg).data)
        for p in poses
    ]
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(scores))
    ok = est.resolution == (16, 16, 16) and mean > 28.0
    detail = (
        f"in-air PSNR mean {mean:.2f} dB (min {min(scores):.2f}, need > 28), "
        f"A {np.round(medium.A, 3).tolist()} beta {np.round(medium.beta, 3).tolist()}"
    )
    assert report(6, "Joint recovery", ok, detail, elapsed, 900.0)


def textured_plane(z=2.0, half=2.0, res=48):
    scene = VoxelScene((-half, -half, z - 0.1), (half, half, z + 0.3), np.zeros((res, res, 4)), np.zeros((res, res, 4, 3)))
    c = scene.cell_centers()
    scene.sigma = 200.0 * (c[..., 2] >= z)
    x, y = c[..., 0], c[..., 1]
    scene.color = np.stack([0.5 + 0.3 * np.sin(2.5 * x), 0.5 + 0.3 * np.cos(2 * y), 0.5 + 0.2 * np.sin(1.5 * (x + y))], -1)
    return scene


def test_7_rectification():
    t0 = time.perf_counter()
    cam = CameraModel(96, 96, 80, 80, 48, 48, s=0.05, n_w=1.333)
    yy, xx = np.mgrid[0:96, 0:96] / 96
    img = ImageBuffer(np.stack([0.5 + 0.4 * np.sin(3 * xx), 0.5 + 0.4 * np.cos(2 * yy), 0.3 + 0.3 * xx * yy], -1))
    back = rectify_image(distort_image(img, cam, 3.0), cam, 3.0)
    p_round = psnr(back.data, img.data, back.mask)

    cam = CameraModel.from_fov(64, 64, 50.0, s=0.05)
    scene, cfg, medium = textured_plane(z=2.0), SamplingConfig(0.0, 3.0, 256), MediumParams.default()
    uw = render_image(scene, medium, cam, Pose(), "underwater", cfg)
    pinhole = render_image(scene, medium, cam, Pose(), "geo_only", cfg)
    rect = rectify_image(uw, cam, 2.0)
    p_scene = psnr(rect.data, pinhole.data, rect.mask)
    elapsed = time.perf_counter() - t0
    ok = p_round > 35.0 and p_scene > 30.0
    detail = f"distort-then-rectify {p_round:.1f} dB (> 35), rectified render vs pinhole {p_scene:.1f} dB (> 30) on {rect.mask.mean():.0%} valid"
    assert report(7, "Rectification roundtrip", ok, detail, elapsed, 60.0)


def test_8_brightness_and_gamma():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    never_darker = True
    for _ in range(200):
        J = ImageBuffer(rng.uniform(0.01, 1, (8, 8, 3)))
        out = brightness_compensation(J, ImageBuffer(rng.uniform(0, 1, (8, 8, 3))))
        never_darker &= out.data.mean() >= J.data.mean()
    J = ImageBuffer(rng.uniform(0.2, 1, (8, 8, 3)))
    identity = np.array_equal(brightness_compensation(J, ImageBuffer(0.5 * J.data)).data, J.data)
    fixed = linear_to_srgb(0.0) == 0.0 and linear_to_srgb(1.0) == 1.0
    half = float(linear_to_srgb(0.5))
    elapsed = time.perf_counter() - t0
    ok = never_darker and identity and fixed and abs(half - 0.74918) <= 1e-5
    detail = (
        f"never darker: {never_darker}, W<=1 identity: {identity}, fixed points exact: {fixed}, "
        f"0.5 -> {half:.6f} (target 0.74918 +- 1e-5, |diff| {abs(half - 0.74918):.1e}; 0.5**(1/2.4) = {0.5 ** (1 / 2.4):.6f})"
    )
    assert report(8, "Brightness compensation and gamma", ok, detail, elapsed, 60.0)


def test_9_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.setenv("UWRECTIFY_THREADS", "1")
    main(["make-scene", "sphere", "--size", "48", "--views", "2", "--captures", "--out", str(tmp_path / "m")])
    man = tmp_path / "m" / "manifest.json"
    m = load_manifest(man)
    m.sampling = m.sampling.replace(jitter=True, seed=7, n_samples=128)
    m.optimization = OptimConfig(iterations=50, batch_size=1024, lr_start=0.05, lr_end=0.01, lr_span=50, seed=3)
    save_manifest(man, m)

    def run(tag, threads):
        monkeypatch.setenv("UWRECTIFY_THREADS", str(threads))
        assert main(["render", str(man), "--view", "1", "--out", str(tmp_path / f"r{tag}")]) == 0
        assert main(["estimate", str(man), "--out", str(tmp_path / f"e{tag}")]) == 0

    run("a", 1)
    run("b", 1)
    run("c", 4)
    same_render = (tmp_path / "ra.pfm").read_bytes() == (tmp_path / "rb.pfm").read_bytes()
    same_trace = (tmp_path / "ea" / "trace.csv").read_bytes() == (tmp_path / "eb" / "trace.csv").read_bytes()
    same_params = (tmp_path / "ea" / "params.txt").read_bytes() == (tmp_path / "eb" / "params.txt").read_bytes()
    d_render = float(np.max(np.abs(read_pfm(tmp_path / "ra.pfm") - read_pfm(tmp_path / "rc.pfm"))))
    ta, tc = read_trace_csv(tmp_path / "ea" / "trace.csv"), read_trace_csv(tmp_path / "ec" / "trace.csv")
    d_trace = max(float(np.max(np.abs(ta[k] - tc[k]))) for k in ta)
    elapsed = time.perf_counter() - t0
    ok = same_render and same_trace and same_params and d_render <= 1e-12 and d_trace <= 1e-12
    detail = (
        f"single-threaded byte-identical: render {same_render}, trace {same_trace}, params {same_params}; "
        f"4 threads vs 1: render {d_render:.1e}, trace {d_trace:.1e} (<= 1e-12); cpus {os.cpu_count()}"
    )
    assert report(9, "Determinism", ok, detail, elapsed, 300.0)
