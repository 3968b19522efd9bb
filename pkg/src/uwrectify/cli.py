"""Command-line interface.

Exit codes: 0 on success, 1 when a verification fails (gradient check,
TIR-dominated frame, non-finite loss) and 2 for bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from uwrectify.errors import NonFiniteLoss, UwRectifyError
from uwrectify.geometry import CameraModel, Pose, distort_image, rectify_image
from uwrectify.io import read_image, write_image_set, write_params, write_png, write_trace_csv
from uwrectify.manifest import (
    CAMERA_KEYS,
    Manifest,
    RunRecord,
    default_manifest,
    load_manifest,
    save_manifest,
    save_scene,
)
from uwrectify.optimize import CaptureSet, gradient_check, optimize_joint, optimize_medium
from uwrectify.render import MediumParams, render_image, synthesize_novel, thread_count

log = logging.getLogger("uwrectify")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
MAX_INVALID_FRACTION = 0.5


class VerificationFailure(Exception):
    """Raised by a command whose output fails its own check."""


def _parse_value(text: str):
    """``1.5`` -> float, ``1,2,3`` -> list of floats, anything else stays a string."""
    parts = [p.strip() for p in text.split(",")]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        return text.strip()
    return vals[0] if len(vals) == 1 else vals


def parse_assignments(text: str) -> dict:
    """Parse ``k=v;k=v`` into a dict, with comma-separated vectors."""
    out = {}
    for item in text.split(";"):
        if not item.strip():
            continue
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _out_prefix(out: str, k: int | None) -> Path:
    p = Path(out)
    return p if k is None else p.with_name(f"{p.name}_v{k:02d}")


# ---------------------------------------------------------------------------
# Commands


def cmd_make_scene(args) -> int:
    params = {}
    for item in args.param or []:
        params.update(parse_assignments(item))
    m = default_manifest(args.kind, params, size=args.size, n_views=args.views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = m.build_scene()
    poses = m.poses()
    written = []
    if args.captures:
        (out / "captures").mkdir(exist_ok=True)
        for k, pose in enumerate(poses):
            img = render_image(scene, m.medium, m.camera, pose, "underwater", m.sampling)
            written += write_image_set(out / "captures" / f"view_{k:02d}", img)
            m.captures.append(f"captures/view_{k:02d}.pfm")
    preview = render_image(scene, m.medium, m.camera, poses[0], "underwater", m.sampling)
    written.append(write_png(out / "preview.png", preview))
    written.append(save_manifest(out / "manifest.json", m))
    for p in written:
        print(p)
    return EXIT_OK


def _render_mode(mode: str) -> str:
    return {"geo": "geo_only"}.get(mode, mode)


def cmd_render(args) -> int:
    m = load_manifest(args.manifest)
    scene = m.build_scene()
    poses = m.poses()
    views = range(len(poses)) if args.view is None else [args.view]
    if args.view is not None and not 0 <= args.view < len(poses):
        raise ValueError(f"view {args.view} out of range (0..{len(poses) - 1})")
    t0 = time.perf_counter()
    images = []
    for k in views:
        img = render_image(scene, m.medium, m.camera, poses[k], _render_mode(args.mode), m.sampling)
        invalid = 1.0 - img.mask.mean()
        if invalid > MAX_INVALID_FRACTION:
            raise VerificationFailure(f"view {k}: {invalid:.0%} of pixels are totally internally reflected")
        images.append((k, img))
    written = []
    for k, img in images:
        written += write_image_set(_out_prefix(args.out, None if args.view is not None else k), img)
    record = RunRecord("render", {"manifest": m.to_dict(), "mode": args.mode, "view": args.view},
                       {"sampling": m.sampling.seed}, [str(p) for p in written], time.perf_counter() - t0)
    written.append(record.write(Path(args.out).with_name(Path(args.out).name + "_run.json")))
    for p in written:
        print(p)
    return EXIT_OK


def _load_camera(path) -> CameraModel:
    doc = json.loads(Path(path).read_text())
    block = doc.get("camera", doc)
    unknown = set(block) - set(CAMERA_KEYS)
    if unknown:
        raise ValueError(f"camera: unknown key(s) {sorted(unknown)}")
    return CameraModel(**{k: tuple(v) if k == "normal" else v for k, v in block.items()})


def cmd_rectify(args) -> int:
    camera = _load_camera(args.camera)
    img = read_image(args.image)
    if (img.height, img.width) != (camera.height, camera.width):
        raise ValueError("image size does not match the camera")
    z = {"s_zero": "s_zero", "per_pixel": "per_pixel"}.get(args.mode)
    if args.mode == "uniform_z":
        if args.z is None:
            raise ValueError("--mode uniform_z needs --z")
        z = args.z
    warp = distort_image if args.inverse else rectify_image
    out = warp(img, camera, z)
    for p in write_image_set(Path(args.out), out):
        print(p)
    return EXIT_OK


def _captures(m: Manifest) -> CaptureSet:
    if not m.captures:
        raise ValueError("manifest lists no captures")
    return CaptureSet(m.camera, [(pose, read_image(p)) for pose, p in zip(m.poses(), m.capture_paths())])


def cmd_estimate(args) -> int:
    m = load_manifest(args.manifest)
    captures = _captures(m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = m.optimization
    t0 = time.perf_counter()
    written = []
    status = EXIT_OK
    scene = None
    try:
        if args.joint:
            bounds_scene = m.build_scene()
            scene, medium, trace = optimize_joint(
                captures, cfg, args.resolution, (bounds_scene.bounds_min, bounds_scene.bounds_max), m.sampling
            )
        else:
            medium, trace = optimize_medium(m.build_scene(), captures, cfg, m.sampling)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        trace = exc.trace
        medium = MediumParams(exc.state.get("A", cfg.A_init), exc.state.get("beta", cfg.beta_init))
        status = EXIT_FAIL
    written.append(write_trace_csv(out / "trace.csv", trace))
    written.append(write_params(out / "params.txt", medium, {"iterations": len(trace)}))
    if scene is not None:
        written.append(save_scene(out / "scene.npz", scene))
    record = RunRecord(
        "estimate",
        {"manifest": m.to_dict(), "joint": args.joint, "resolution": args.resolution},
        {"optimization": cfg.seed, "sampling": m.sampling.seed},
        [str(p) for p in written],
        time.perf_counter() - t0,
    )
    written.append(record.write(out / "run.json"))
    for p in written:
        print(p)
    return status


SYNTH_OVERRIDES = ("view", "rotation_deg", "translation", "n_w", "s", "A", "beta")


def _synth_kwargs(m: Manifest, override: dict) -> dict:
    unknown = set(override) - set(SYNTH_OVERRIDES)
    if unknown:
        raise ValueError(f"unknown override key(s) {sorted(unknown)}; allowed: {SYNTH_OVERRIDES}")
    kw = {k: override[k] for k in ("n_w", "s", "A", "beta") if k in override}
    if "view" in override:
        view = int(override["view"])
        if not 0 <= view < len(m.views):
            raise ValueError(f"view {view} out of range")
        kw["pose"] = m.views[view].pose()
    if "rotation_deg" in override or "translation" in override:
        base = m.views[int(override.get("view", 0))]
        kw["pose"] = Pose.from_euler_deg(override.get("rotation_deg", base.rotation_deg),
                                         override.get("translation", base.translation))
    return kw


def cmd_synth(args) -> int:
    m = load_manifest(args.manifest)
    scene = m.build_scene()
    requests = [parse_assignments(o) for o in (args.override or [""])]
    kwargs = [_synth_kwargs(m, r) for r in requests]
    base_pose = m.views[0].pose()
    written = []
    for k, kw in enumerate(kwargs):
        img = synthesize_novel(scene, m.camera, m.medium, base_pose, m.sampling, **kw)
        written += write_image_set(_out_prefix(args.out, k), img)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    m = load_manifest(args.manifest, check_files=False)
    report = gradient_check(
        m.build_scene(), m.medium, m.camera, m.poses(), m.sampling, m.optimization,
        n_rays=args.rays, seed=args.seed, flip=args.inject_sign_flip,
    )
    for name, err in report.errors.items():
        print(f"{name:6s} max_rel_err={err:.3e} {'ok' if err < report.tol else 'FAIL'}")
    if not report.passed:
        name, err = report.worst
        print(f"gradient check failed: worst group {name} ({err:.3e} >= {report.tol:g})", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwrectify", description="Flat-port underwater rendering and rectification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="write a procedural scene manifest and preview")
    p.add_argument("kind", choices=("slab", "sphere", "checker_box"))
    p.add_argument("--param", action="append", help="scene parameters as k=v;k=v")
    p.add_argument("--size", type=int, default=64, help="image width and height")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--captures", action="store_true", help="also render underwater captures for every view")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("render", help="render manifest views to PFM and PNG")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=("underwater", "inair", "geo"), default="underwater")
    p.add_argument("--view", type=int, help="render one view only (default: all)")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("rectify", help="remove flat-port refraction from an image")
    p.add_argument("--image", required=True)
    p.add_argument("--camera", required=True, help="manifest or camera JSON")
    p.add_argument("--mode", choices=("s_zero", "uniform_z", "per_pixel"), default="s_zero")
    p.add_argument("--z", type=float, help="scene depth for uniform_z")
    p.add_argument("--inverse", action="store_true", help="apply the forward distortion instead")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_rectify)

    p = sub.add_parser("estimate", help="fit medium parameters (and optionally the scene) to captures")
    p.add_argument("manifest")
    p.add_argument("--joint", action="store_true", help="fit a voxel grid jointly with the medium")
    p.add_argument("--resolution", type=int, default=16, help="voxel grid resolution for --joint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("synth", help="render with overridden pose or optical parameters")
    p.add_argument("manifest")
    p.add_argument("--override", action="append",
                   help="k=v;k=v with keys " + ", ".join(SYNTH_OVERRIDES) + "; one output per flag")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("manifest")
    p.add_argument("--rays", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-sign-flip", choices=("A", "beta", "c_o", "sigma"), default=None,
                   help="negate one analytic gradient group (the check must then fail)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    log.debug("threads: %d", thread_count())
    try:
        return args.func(args)
    except VerificationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (UwRectifyError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
