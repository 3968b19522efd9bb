"""Voxel object fields, stratified ray sampling and surface-depth extraction."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from uwrectify.errors import InvalidSpec
from uwrectify.geometry import Ray

SCENE_KINDS = ("slab", "sphere", "checker_box")


@dataclass
class VoxelScene:
    """Axis-aligned grid of densities and linear-RGB colors.

    Values live at cell centers and are trilinearly interpolated. Between
    the outermost cell centers and the bounds the edge values are held;
    outside the bounds the field is empty.
    """

    bounds_min: NDArray
    bounds_max: NDArray
    sigma: NDArray
    color: NDArray

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=float).reshape(3)
        self.bounds_max = np.asarray(self.bounds_max, dtype=float).reshape(3)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.color = np.asarray(self.color, dtype=float)
        if self.sigma.ndim != 3 or min(self.sigma.shape) < 2:
            raise ValueError("density grid must be 3-D with at least 2 cells per axis")
        if self.color.shape != self.sigma.shape + (3,):
            raise ValueError("color grid must be (nx, ny, nz, 3)")
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("empty bounds")
        if np.any(self.sigma < 0):
            raise ValueError("densities must be non-negative")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("colors must lie in [0, 1]")

    @classmethod
    def empty(cls, bounds_min=(-1, -1, -1), bounds_max=(1, 1, 1), resolution=(2, 2, 2)) -> VoxelScene:
        res = tuple(int(r) for r in np.broadcast_to(resolution, (3,)))
        return cls(bounds_min, bounds_max, np.zeros(res), np.zeros(res + (3,)))

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.sigma.shape

    @property
    def cell_size(self) -> NDArray:
        return (self.bounds_max - self.bounds_min) / np.array(self.resolution)

    @property
    def sigma_max(self) -> float:
        return float(self.sigma.max())

    def cell_centers(self) -> NDArray:
        """(nx, ny, nz, 3) world coordinates of the cell centers."""
        axes = [self.bounds_min[k] + (np.arange(n) + 0.5) * self.cell_size[k] for k, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def replace(self, **changes) -> VoxelScene:
        return dataclasses.replace(self, **changes)

    def contains(self, points: ArrayLike) -> NDArray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.bounds_min) & (p <= self.bounds_max), axis=-1)

    def stencil(self, points: ArrayLike):
        """Trilinear interpolation stencil for ``points`` (..., 3).

        Returns:
            flat cell indices (..., 8), weights (..., 8) and an ``inside``
            mask (...). Weights are zero for points outside the bounds.
        """
        p = np.asarray(points, dtype=float)
        res = np.array(self.resolution)
        q = (p - self.bounds_min) / self.cell_size - 0.5
        i0 = np.clip(np.floor(q).astype(np.int64), 0, res - 2)
        f = np.clip(q - i0, 0.0, 1.0)
        inside = self.contains(p)
        base = (i0[..., 0] * res[1] + i0[..., 1]) * res[2] + i0[..., 2]
        bit = np.array([0, 1])
        offsets = (bit[:, None, None] * res[1] * res[2] + bit[None, :, None] * res[2] + bit[None, None, :]).ravel()
        idx = base[..., None] + offsets
        w = [np.stack([1.0 - f[..., k], f[..., k]], axis=-1) for k in range(3)]
        wts = w[0][..., :, None, None] * w[1][..., None, :, None] * w[2][..., None, None, :]
        wts = wts.reshape(p.shape[:-1] + (8,)) * inside[..., None]
        return idx, wts, inside

    def query_stencil(self, idx: NDArray, wts: NDArray):
        sigma = np.einsum("...k,...k->...", wts, self.sigma.reshape(-1)[idx])
        color = np.einsum("...k,...kc->...c", wts, self.color.reshape(-1, 3)[idx])
        return sigma, color

    def query(self, points: ArrayLike):
        """Density and color at ``points``; ``(0, black)`` outside the bounds."""
        idx, wts, _ = self.stencil(points)
        sigma, color = self.query_stencil(idx, wts)
        if np.ndim(sigma) == 0:
            return float(sigma), color
        return sigma, color


def query(scene: VoxelScene, point: ArrayLike):
    return scene.query(point)


# ---------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True)
class SamplingConfig:
    """Stratified sampling along ``[t_near, t_far]``.

    ``sigma_thresh`` is the absolute density marking the first opaque
    sample; ``None`` uses half the scene's peak density.
    """

    t_near: float = 0.0
    t_far: float = 6.0
    n_samples: int = 128
    jitter: bool = False
    seed: int = 0
    sigma_thresh: float | None = None

    def __post_init__(self):
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples per ray")
        if self.sigma_thresh is not None and not self.sigma_thresh > 0:
            raise ValueError("sigma_thresh must be positive")

    def edges(self) -> NDArray:
        return np.linspace(self.t_near, self.t_far, self.n_samples + 1)

    def threshold(self, scene: VoxelScene) -> float:
        if self.sigma_thresh is not None:
            return self.sigma_thresh
        return 0.5 * scene.sigma_max if scene.sigma_max > 0 else np.inf

    def replace(self, **changes) -> SamplingConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class RaySamples:
    """Samples along one ray: interval edges, sample positions and field values."""

    edges: NDArray
    positions: NDArray
    sigma: NDArray = field(default=None)
    color: NDArray = field(default=None)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        n = len(self.positions)
        if len(self.edges) != n + 1 or np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be strictly increasing with one more entry than positions")
        if self.sigma is None:
            self.sigma = np.zeros(n)
        if self.color is None:
            self.color = np.zeros((n, 3))
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.color = np.asarray(self.color, dtype=float)

    @property
    def deltas(self) -> NDArray:
        return np.diff(self.edges)

    def __len__(self):
        return len(self.positions)


def stratified_positions(cfg: SamplingConfig, n_rays: int, rng: np.random.Generator | None = None):
    """Shared interval edges and per-ray sample positions (n_rays, N).

    Without jitter every sample sits at its interval center; with jitter
    it is uniform within its interval.
    """
    edges = cfg.edges()
    lo, hi = edges[:-1], edges[1:]
    if cfg.jitter:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        u = rng.random((n_rays, cfg.n_samples))
    else:
        u = np.full((n_rays, cfg.n_samples), 0.5)
    return edges, lo + u * (hi - lo)


def sample_ray(
    ray: Ray,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
    scene: VoxelScene | None = None,
) -> RaySamples:
    """Stratified samples along ``ray``; field values filled in when ``scene`` is given."""
    edges, pos = stratified_positions(cfg, 1, rng)
    samples = RaySamples(edges, pos[0])
    if scene is not None:
        samples.sigma, samples.color = scene.query(ray.at(samples.positions))
    return samples


def first_hit(positions: NDArray, sigma: NDArray, sigma_thresh: float) -> NDArray:
    """Position of the first sample with density >= threshold; NaN if none."""
    hit = sigma >= sigma_thresh
    any_hit = hit.any(axis=-1)
    k = np.argmax(hit, axis=-1)
    d = np.take_along_axis(positions, k[..., None], axis=-1)[..., 0]
    return np.where(any_hit, d, np.nan)


def surface_depth(samples: RaySamples, sigma_thresh: float) -> float | None:
    """Distance of the first sample at or above ``sigma_thresh``, else None."""
    if not sigma_thresh > 0:
        raise ValueError("sigma_thresh must be positive")
    d = first_hit(samples.positions, samples.sigma, sigma_thresh)
    return None if np.isnan(d) else float(d)


# ---------------------------------------------------------------------------
# Procedural scenes


@dataclass
class SceneSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


def _vec3(x) -> NDArray:
    return np.asarray(np.broadcast_to(np.asarray(x, dtype=float), (3,)), dtype=float)


def _res3(r) -> tuple[int, int, int]:
    return tuple(int(v) for v in np.broadcast_to(np.asarray(r), (3,)))


def _interval_overlap(lo, hi, a, b):
    return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None) / (hi - lo)


def _supersampled_coverage(lo: NDArray, hi: NDArray, res, inside_fn, n_sub: int) -> NDArray:
    size = (hi - lo) / np.array(res)
    offsets = (np.arange(n_sub) + 0.5) / n_sub
    cov = np.zeros(res)
    centers_lo = [lo[k] + np.arange(res[k]) * size[k] for k in range(3)]
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                pts = np.stack(
                    np.meshgrid(
                        centers_lo[0] + ox * size[0],
                        centers_lo[1] + oy * size[1],
                        centers_lo[2] + oz * size[2],
                        indexing="ij",
                    ),
                    axis=-1,
                )
                cov += inside_fn(pts)
    return cov / n_sub**3


def _slab(z=2.0, thickness=0.2, color=(1.0, 0.0, 0.0), half_width=5.0, resolution=(4, 4, 6), sigma_max=200.0):
    """Fronto-parallel slab occupying ``z <= Z <= z + thickness``.

    Bounds span one thickness either side, so with ``nz`` a multiple of 3 both
    faces fall on cell faces and the half-density level sits exactly on them.
    """
    res = _res3(resolution)
    lo = np.array([-half_width, -half_width, z - thickness])
    hi = np.array([half_width, half_width, z + 2 * thickness])
    zs = np.linspace(lo[2], hi[2], res[2] + 1)
    cov = _interval_overlap(zs[:-1], zs[1:], z, z + thickness)
    sigma = np.broadcast_to(sigma_max * cov, res).copy()
    col = np.broadcast_to(_vec3(color), res + (3,)).copy()
    return VoxelScene(lo, hi, sigma, col)


def _sphere_texture(p, center, radius, base_color, amp, freq):
    rel = (p - center) / radius
    return np.clip(base_color + amp * np.sin(np.pi * freq * rel), 0.0, 1.0)


def _sphere(
    center=(0.0, 0.0, 0.0),
    radius=1.0,
    resolution=16,
    base_color=(0.6, 0.5, 0.4),
    texture_amp=0.3,
    texture_freq=1.0,
    sigma_max=50.0,
    margin=1.25,
    supersample=4,
):
    """Sphere with a smooth color texture that is odd about the center.

    Red varies along x, green along y and blue along z, so the color at the
    center equals ``base_color`` exactly for symmetric grids.
    """
    c = _vec3(center)
    res = _res3(resolution)
    lo, hi = c - margin * radius, c + margin * radius
    cov = _supersampled_coverage(lo, hi, res, lambda p: np.linalg.norm(p - c, axis=-1) <= radius, supersample)
    scene = VoxelScene(lo, hi, sigma_max * cov, np.zeros(res + (3,)))
    scene.color = _sphere_texture(scene.cell_centers(), c, radius, _vec3(base_color), texture_amp, texture_freq)
    return scene


def _checker_box(
    center=(0.0, 0.0, 0.0),
    half_size=0.7,
    resolution=16,
    colors=((0.9, 0.2, 0.2), (0.2, 0.3, 0.9)),
    sigma_max=50.0,
    margin=1.4,
    supersample=4,
):
    """Axis-aligned cube whose cell colors alternate by index parity."""
    c = _vec3(center)
    res = _res3(resolution)
    lo, hi = c - margin * half_size, c + margin * half_size
    cov = _supersampled_coverage(lo, hi, res, lambda p: np.all(np.abs(p - c) <= half_size, axis=-1), supersample)
    ii, jj, kk = np.meshgrid(*(np.arange(n) for n in res), indexing="ij")
    parity = (ii + jj + kk) % 2
    cols = np.asarray(colors, dtype=float)
    return VoxelScene(lo, hi, sigma_max * cov, cols[parity])


_BUILDERS = {"slab": _slab, "sphere": _sphere, "checker_box": _checker_box}


def make_test_scene(spec: SceneSpec | dict | str, **params) -> VoxelScene:
    """Build one of the procedural scenes: ``slab``, ``sphere`` or ``checker_box``.

    Raises:
        InvalidSpec: for unknown kinds or parameters.
    """
    if isinstance(spec, str):
        spec = SceneSpec(spec, params)
    elif isinstance(spec, dict):
        spec = SceneSpec(spec.get("kind"), {**spec.get("params", {}), **params})
    elif params:
        spec = SceneSpec(spec.kind, {**spec.params, **params})
    builder = _BUILDERS.get(spec.kind)
    if builder is None:
        raise InvalidSpec(f"unknown scene kind {spec.kind!r}; expected one of {SCENE_KINDS}")
    try:
        return builder(**spec.params)
    except TypeError as exc:
        raise InvalidSpec(f"bad parameters for {spec.kind!r}: {exc}") from exc
