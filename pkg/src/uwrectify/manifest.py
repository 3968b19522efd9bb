"""Experiment manifests and run records.

A manifest is a JSON document with the blocks ``camera``, ``scene``,
``medium``, ``views``, ``sampling`` and ``optimization`` and an optional
``captures`` list. Parsing is strict: unknown keys are errors, and every
numeric field is validated by the type it feeds. Relative file paths are
resolved against the manifest's directory.
"""

from __future__ import annotations

import dataclasses
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from uwrectify.errors import InvalidSpec, ManifestError
from uwrectify.geometry import CameraModel, Pose, orbit_poses
from uwrectify.optimize import OptimConfig
from uwrectify.render import MediumParams
from uwrectify.scene import SCENE_KINDS, SamplingConfig, SceneSpec, VoxelScene, make_test_scene

SCHEMA_VERSION = 1
TOP_KEYS = ("version", "camera", "scene", "medium", "views", "sampling", "optimization", "captures")
CAMERA_KEYS = ("width", "height", "fx", "fy", "cx", "cy", "s", "n_a", "n_w", "normal")
SAMPLING_KEYS = tuple(f.name for f in dataclasses.fields(SamplingConfig))
OPTIM_KEYS = tuple(f.name for f in dataclasses.fields(OptimConfig))


@dataclass
class ViewSpec:
    """Camera-to-world pose given as extrinsic xyz Euler angles (degrees) and a translation."""

    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.rotation_deg = tuple(float(x) for x in self.rotation_deg)
        self.translation = tuple(float(x) for x in self.translation)
        if len(self.rotation_deg) != 3 or len(self.translation) != 3:
            raise ValueError("rotation_deg and translation are 3-vectors")

    @classmethod
    def from_pose(cls, pose: Pose) -> ViewSpec:
        return cls(tuple(pose.to_euler_deg()), tuple(pose.translation))

    def pose(self) -> Pose:
        return Pose.from_euler_deg(self.rotation_deg, self.translation)

    def to_dict(self) -> dict:
        return {"rotation_deg": list(self.rotation_deg), "translation": list(self.translation)}


@dataclass
class Manifest:
    """Everything needed to reproduce a render or an estimation run.

    ``scene`` is either a procedural :class:`SceneSpec` or a path to a
    ``.npz`` grid written by :func:`save_scene`.
    """

    camera: CameraModel
    scene: SceneSpec | str
    medium: MediumParams = field(default_factory=MediumParams.default)
    views: list[ViewSpec] = field(default_factory=lambda: [ViewSpec()])
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    optimization: OptimConfig = field(default_factory=OptimConfig)
    captures: list[str] = field(default_factory=list)
    base_dir: Path = field(default=Path("."), compare=False)

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def poses(self) -> list[Pose]:
        return [v.pose() for v in self.views]

    def build_scene(self) -> VoxelScene:
        if isinstance(self.scene, SceneSpec):
            return make_test_scene(self.scene)
        return load_scene(self.resolve(self.scene))

    def capture_paths(self) -> list[Path]:
        return [self.resolve(c) for c in self.captures]

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "camera": self.camera.to_dict(),
            "scene": self.scene.to_dict() if isinstance(self.scene, SceneSpec) else {"file": self.scene},
            "medium": self.medium.to_dict(),
            "views": [v.to_dict() for v in self.views],
            "sampling": dataclasses.asdict(self.sampling),
            "optimization": self.optimization.to_dict(),
            "captures": list(self.captures),
        }


def _check_keys(block, allowed, where: str):
    if not isinstance(block, dict):
        raise ManifestError(f"{where}: expected an object")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ManifestError(f"{where}: unknown key(s) {unknown}")


def _json_ready(x):
    if isinstance(x, dict):
        return {k: _json_ready(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_ready(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def serialize(m: Manifest) -> str:
    return json.dumps(_json_ready(m.to_dict()), indent=2) + "\n"


def parse(text: str, base_dir: Path | str = ".", check_files: bool = True) -> Manifest:
    """Parse manifest JSON.

    Raises:
        ManifestError: on malformed JSON, unknown keys, out-of-range values or
            missing referenced files (when ``check_files``).
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"not valid JSON: {exc}") from exc
    _check_keys(doc, TOP_KEYS, "manifest")
    for key in ("camera", "scene"):
        if key not in doc:
            raise ManifestError(f"manifest: missing required block {key!r}")
    if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest version {doc['version']!r}")
    try:
        m = _build(doc, Path(base_dir))
    except (TypeError, ValueError, InvalidSpec) as exc:
        raise ManifestError(str(exc)) from exc
    if check_files:
        missing = [str(p) for p in m.capture_paths() if not p.exists()]
        if isinstance(m.scene, str) and not m.resolve(m.scene).exists():
            missing.append(str(m.resolve(m.scene)))
        if missing:
            raise ManifestError(f"referenced file(s) not found: {missing}")
    return m


def _build(doc: dict, base_dir: Path) -> Manifest:
    cam = doc["camera"]
    _check_keys(cam, CAMERA_KEYS, "camera")
    camera = CameraModel(**{k: tuple(v) if k == "normal" else v for k, v in cam.items()})

    sc = doc["scene"]
    if "file" in sc:
        _check_keys(sc, ("file",), "scene")
        scene: SceneSpec | str = str(sc["file"])
    else:
        _check_keys(sc, ("kind", "params"), "scene")
        if sc.get("kind") not in SCENE_KINDS:
            raise ManifestError(f"scene: kind must be one of {SCENE_KINDS}")
        scene = SceneSpec(sc["kind"], dict(sc.get("params", {})))
        make_test_scene(scene)  # validates the parameters

    med = doc.get("medium", MediumParams.default().to_dict())
    _check_keys(med, ("A", "beta"), "medium")
    medium = MediumParams(med["A"], med["beta"])
    try:
        medium.check()
    except Exception as exc:
        raise ManifestError(f"medium: {exc}") from exc

    views = []
    for i, v in enumerate(doc.get("views", [ViewSpec().to_dict()])):
        _check_keys(v, ("rotation_deg", "translation"), f"views[{i}]")
        views.append(ViewSpec(**v))
    if not views:
        raise ManifestError("views: at least one view is required")

    samp = doc.get("sampling", {})
    _check_keys(samp, SAMPLING_KEYS, "sampling")
    sampling = SamplingConfig(**samp)

    opt = doc.get("optimization", {})
    _check_keys(opt, OPTIM_KEYS, "optimization")
    optimization = OptimConfig(**opt)

    captures = [str(c) for c in doc.get("captures", [])]
    if captures and len(captures) != len(views):
        raise ManifestError("captures: need exactly one image per view")
    return Manifest(camera, scene, medium, views, sampling, optimization, captures, base_dir)


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return parse(text, path.parent, check_files)


def save_manifest(path, m: Manifest) -> Path:
    path = Path(path)
    path.write_text(serialize(m))
    return path


def default_manifest(kind: str = "sphere", params: dict | None = None, size: int = 64, n_views: int = 8) -> Manifest:
    """A ready-to-render manifest for one of the procedural scenes.

    Object scenes get an orbit of ``n_views`` cameras; the slab gets
    fronto-parallel cameras shifted sideways.
    """
    spec = SceneSpec(kind, dict(params or {}))
    scene = make_test_scene(spec)
    camera = CameraModel.from_fov(size, size, 50.0)
    if kind == "slab":
        views = [ViewSpec((0.0, 0.0, 0.0), (0.1 * k, 0.0, 0.0)) for k in range(n_views)]
        sampling = SamplingConfig(t_near=0.0, t_far=6.0, n_samples=128)
    else:
        center = 0.5 * (scene.bounds_min + scene.bounds_max)
        radius = 2.2 * float(np.max(scene.bounds_max - center))
        poses = orbit_poses(n_views, radius=radius, elevation_deg=[20.0, -10.0] * (n_views // 2) + [20.0] * (n_views % 2), target=center)
        views = [ViewSpec.from_pose(p) for p in poses]
        sampling = SamplingConfig(t_near=0.5 * radius, t_far=1.6 * radius, n_samples=96)
    return Manifest(camera, spec, MediumParams.default(), views, sampling)


# ---------------------------------------------------------------------------
# Scene grids on disk


def save_scene(path, scene: VoxelScene) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        np.savez(f, bounds_min=scene.bounds_min, bounds_max=scene.bounds_max, sigma=scene.sigma, color=scene.color)
    return path


def load_scene(path) -> VoxelScene:
    with np.load(path) as z:
        return VoxelScene(z["bounds_min"], z["bounds_max"], z["sigma"], z["color"])


# ---------------------------------------------------------------------------
# Run records


@dataclass
class RunRecord:
    """What was run, with which inputs, and what it wrote."""

    command: str
    config: dict
    seeds: dict
    outputs: list[str]
    wall_time: float
    version: str = ""
    environment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.version:
            from uwrectify import __version__

            self.version = __version__
        if not self.environment:
            self.environment = {"python": platform.python_version(), "numpy": np.__version__}

    def to_json(self) -> str:
        return json.dumps(_json_ready(dataclasses.asdict(self)), indent=2) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path) -> RunRecord:
        return cls(**json.loads(Path(path).read_text()))
