"""Forward rendering: in-air, geometry-rectified and underwater images.

The underwater color of a ray is ``exp(-beta d) J + (1 - exp(-beta d)) A``
with ``J`` the alpha-composited object radiance and ``d`` the distance to
the first opaque sample. Rays that hit nothing see the whole water column
up to ``t_far``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from uwrectify.errors import DegenerateInput, OutOfBounds
from uwrectify.geometry import CameraModel, Pose, camera_rays, refracted_ray, pixel_ray
from uwrectify.image import ImageBuffer, linear_to_srgb, srgb_to_linear  # noqa: F401 (re-export)
from uwrectify.scene import RaySamples, SamplingConfig, VoxelScene, first_hit, stratified_positions

MODES = ("underwater", "inair", "geo_only")
THREADS_ENV = "UWRECTIFY_THREADS"
_SAMPLE_BUDGET = 1 << 18


@dataclass
class MediumParams:
    """Per-channel attenuation ``beta`` and background light ``A`` (linear RGB)."""

    A: NDArray
    beta: NDArray

    def __post_init__(self):
        self.A = np.asarray(np.broadcast_to(np.asarray(self.A, dtype=float), (3,)), dtype=float).copy()
        self.beta = np.asarray(np.broadcast_to(np.asarray(self.beta, dtype=float), (3,)), dtype=float).copy()
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.beta))):
            raise ValueError("medium parameters must be finite")

    @classmethod
    def default(cls) -> MediumParams:
        return cls([0.9, 0.9, 0.9], [0.4, 0.2, 0.2])

    @classmethod
    def clear(cls) -> MediumParams:
        """No attenuation at all (``beta = 0``)."""
        return cls([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])

    def check(self, beta_bounds=(0.0, np.inf), A_bounds=(0.0, 1.0)):
        """Raise OutOfBounds unless both vectors are inside their bounds."""
        if np.any(self.A < A_bounds[0]) or np.any(self.A > A_bounds[1]):
            raise OutOfBounds(f"A={self.A.tolist()} outside {A_bounds}")
        if np.any(self.beta < beta_bounds[0]) or np.any(self.beta > beta_bounds[1]):
            raise OutOfBounds(f"beta={self.beta.tolist()} outside {beta_bounds}")
        return self

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "beta": self.beta.tolist()}


@dataclass
class RayRadiance:
    """Per-ray rendering result.

    ``d`` is the surface depth or None when the ray hits nothing; the medium
    terms then use ``path_length = t_far``.
    """

    I: NDArray
    J: NDArray
    d: float | None
    path_length: float
    weights: NDArray
    transmittance: NDArray


@dataclass
class Trace:
    """Batched compositing state for R rays with N samples each."""

    positions: NDArray  # (R, N)
    deltas: NDArray  # (N,)
    sigma: NDArray  # (R, N)
    color: NDArray  # (R, N, 3)
    weights: NDArray  # (R, N)
    transmittance: NDArray  # (R, N)
    J: NDArray  # (R, 3)
    depth: NDArray  # (R,), NaN where nothing is hit
    path_length: NDArray  # (R,)
    stencil: tuple | None = None  # (inside mask, cell indices, weights)


def _composite(sigma: NDArray, deltas: NDArray):
    tau = sigma * deltas
    # exclusive prefix sum, so T is exactly non-increasing
    excl = np.cumsum(tau, axis=-1)
    excl = np.concatenate([np.zeros_like(excl[..., :1]), excl[..., :-1]], axis=-1)
    T = np.exp(-excl)
    w = -np.expm1(-tau) * T
    return w, T


def transmittance_weights(samples: RaySamples | NDArray, deltas: ArrayLike | None = None):
    """Compositing weights and transmittances along a ray.

    ``T_i = exp(-sum_{j<i} sigma_j dt_j)`` and ``w_i = (1 - exp(-sigma_i dt_i)) T_i``.

    Accepts a :class:`RaySamples` or a density array (..., N) with interval
    widths ``deltas`` (N,).
    """
    if isinstance(samples, RaySamples):
        return _composite(samples.sigma, samples.deltas)
    return _composite(np.asarray(samples, dtype=float), np.asarray(deltas, dtype=float))


def trace_rays(
    scene: VoxelScene,
    origins: NDArray,
    dirs: NDArray,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
    keep_stencil: bool = False,
    sigma_thresh: float | None = None,
) -> Trace:
    """Sample, query and composite a batch of world-space rays (R, 3)."""
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    edges, pos = stratified_positions(cfg, len(origins), rng)
    pts = origins[:, None, :] + pos[..., None] * dirs[:, None, :]
    inside = scene.contains(pts)
    idx, wts, _ = scene.stencil(pts[inside])
    sigma = np.zeros(pos.shape)
    color = np.zeros(pos.shape + (3,))
    sigma[inside], color[inside] = scene.query_stencil(idx, wts)
    deltas = np.diff(edges)
    w, T = _composite(sigma, deltas)
    J = np.einsum("rn,rnc->rc", w, color)
    thresh = cfg.threshold(scene) if sigma_thresh is None else sigma_thresh
    depth = first_hit(pos, sigma, thresh)
    path = np.where(np.isnan(depth), cfg.t_far, depth)
    return Trace(pos, deltas, sigma, color, w, T, J, depth, path, (inside, idx, wts) if keep_stencil else None)


def medium_transmittance(beta: ArrayLike, d: ArrayLike) -> NDArray:
    """``exp(-beta_c d)`` for every ray and channel, shape (..., 3)."""
    return np.exp(-np.asarray(d, dtype=float)[..., None] * np.asarray(beta, dtype=float))


def attenuate(J: NDArray, d: NDArray, medium: MediumParams) -> NDArray:
    """Direct signal plus back-scatter: ``T J + (1 - T) A`` with ``T = exp(-beta d)``."""
    Tm = medium_transmittance(medium.beta, d)
    return Tm * J + (1.0 - Tm) * medium.A


def default_rng_for(cfg: SamplingConfig, chunk: int = 0) -> np.random.Generator | None:
    """Jitter stream for one render chunk; keyed on (seed, chunk) only."""
    if not cfg.jitter:
        return None
    return np.random.default_rng([cfg.seed, chunk])


def _single_ray(scene, origin, direction, cfg, rng) -> Trace:
    if rng is None:
        rng = default_rng_for(cfg)
    return trace_rays(scene, origin[None], direction[None], cfg, rng)


def _to_radiance(tr: Trace, I: NDArray) -> RayRadiance:
    d = None if np.isnan(tr.depth[0]) else float(tr.depth[0])
    return RayRadiance(I, tr.J[0], d, float(tr.path_length[0]), tr.weights[0], tr.transmittance[0])


def render_underwater(
    scene: VoxelScene,
    medium: MediumParams,
    camera: CameraModel,
    pose: Pose,
    pixel: ArrayLike,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
) -> RayRadiance:
    """Underwater color of one pixel along its refracted ray.

    Raises:
        TotalInternalReflection: if the pixel's ray cannot leave the housing.
    """
    ray = refracted_ray(camera, pixel)
    tr = _single_ray(scene, pose.points_to_world(ray.origin), pose.dirs_to_world(ray.direction), cfg, rng)
    return _to_radiance(tr, attenuate(tr.J, tr.path_length, medium)[0])


def render_inair(
    scene: VoxelScene,
    camera: CameraModel,
    pose: Pose,
    pixel: ArrayLike,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
) -> NDArray:
    """Object radiance along the unrefracted pinhole ray, with no medium."""
    ray = pixel_ray(camera, pixel)
    tr = _single_ray(scene, pose.points_to_world(ray.origin), pose.dirs_to_world(ray.direction), cfg, rng)
    return tr.J[0]


def render_geo_only(
    scene: VoxelScene,
    medium: MediumParams,
    camera: CameraModel,
    pose: Pose,
    pixel: ArrayLike,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
) -> NDArray:
    """Full underwater radiometry along the unrefracted ray (refraction removed)."""
    ray = pixel_ray(camera, pixel)
    tr = _single_ray(scene, pose.points_to_world(ray.origin), pose.dirs_to_world(ray.direction), cfg, rng)
    return attenuate(tr.J, tr.path_length, medium)[0]


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def chunk_size(cfg: SamplingConfig) -> int:
    return max(16, _SAMPLE_BUDGET // cfg.n_samples)


def world_rays(camera: CameraModel, pose: Pose, pixels: NDArray, refract: bool):
    """World-space rays for an array of pixels, with the TIR validity mask."""
    o, d, valid = camera_rays(camera, pixels, refract=refract)
    return pose.points_to_world(o), pose.dirs_to_world(d), valid


def render_rays(
    scene: VoxelScene,
    medium: MediumParams | None,
    origins: NDArray,
    dirs: NDArray,
    cfg: SamplingConfig,
    threads: int | None = None,
) -> NDArray:
    """Colors for a flat batch of rays, chunked for memory and threads.

    ``medium=None`` renders object radiance only. Results do not depend on
    the thread count: each chunk is a pure function of (seed, chunk index)
    and writes its own slice.
    """
    n = len(origins)
    out = np.zeros((n, 3))
    step = chunk_size(cfg)
    starts = list(range(0, n, step))

    def work(k):
        lo = starts[k]
        hi = min(lo + step, n)
        tr = trace_rays(scene, origins[lo:hi], dirs[lo:hi], cfg, default_rng_for(cfg, k))
        out[lo:hi] = tr.J if medium is None else attenuate(tr.J, tr.path_length, medium)

    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(starts) <= 1:
        for k in range(len(starts)):
            work(k)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(starts))))
    return out


def render_image(
    scene: VoxelScene,
    medium: MediumParams | None,
    camera: CameraModel,
    pose: Pose,
    mode: str,
    cfg: SamplingConfig,
    threads: int | None = None,
) -> ImageBuffer:
    """Render every pixel in ``mode`` (underwater, inair or geo_only).

    Pixels whose ray is totally internally reflected are zero and invalid.
    """
    if mode == "geo":
        mode = "geo_only"
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    if mode != "inair" and medium is None:
        raise ValueError(f"mode {mode!r} needs medium parameters")
    pix = camera.pixel_centers().reshape(-1, 2)
    o, d, valid = world_rays(camera, pose, pix, refract=(mode == "underwater"))
    colors = np.zeros((len(pix), 3))
    colors[valid] = render_rays(scene, None if mode == "inair" else medium, o[valid], d[valid], cfg, threads)
    shape = (camera.height, camera.width)
    return ImageBuffer(colors.reshape(shape + (3,)), valid.reshape(shape))


def brightness_compensation(J_img: ImageBuffer, I_geo_img: ImageBuffer, per_channel: bool = False) -> ImageBuffer:
    """Scale the in-air estimate up to the brightness of the rectified capture.

    ``W = mean(I_geo) / mean(J)`` over pixels valid in both images (channels
    pooled unless ``per_channel``); output is ``clip(max(1, W) * J, 0, 1)``.

    Raises:
        DegenerateInput: if ``mean(J)`` is zero.
    """
    if J_img.data.shape != I_geo_img.data.shape:
        raise ValueError("image shapes differ")
    mask = J_img.mask & I_geo_img.mask
    j = J_img.data[mask]
    i = I_geo_img.data[mask]
    if per_channel:
        mj, mi = j.mean(axis=0), i.mean(axis=0)
    else:
        mj, mi = j.mean(), i.mean()
    if np.any(mj == 0) or j.size == 0:
        raise DegenerateInput("mean of the in-air image is zero")
    W = np.maximum(1.0, mi / mj)
    out = np.clip(J_img.data * W, 0.0, 1.0)
    out[~J_img.mask] = J_img.data[~J_img.mask]
    return ImageBuffer(out, J_img.mask.copy())


SYNTH_KEYS = ("pose", "n_w", "s", "A", "beta")


def synthesize_novel(
    scene: VoxelScene,
    base_camera: CameraModel,
    base_medium: MediumParams,
    base_pose: Pose,
    cfg: SamplingConfig,
    threads: int | None = None,
    **overrides,
) -> ImageBuffer:
    """Underwater render with some optical parameters replaced.

    Overridable: ``pose``, ``n_w``, ``s``, ``A``, ``beta``. Everything else
    is taken from the base camera and medium.

    Raises:
        OutOfBounds: for non-physical values (``n_w <= 0``, ``s < 0``,
            ``A`` outside [0, 1], negative ``beta``).
    """
    unknown = set(overrides) - set(SYNTH_KEYS)
    if unknown:
        raise KeyError(f"unknown override(s): {sorted(unknown)}")
    if "n_w" in overrides and not overrides["n_w"] > 0:
        raise OutOfBounds("n_w must be positive")
    if "s" in overrides and not overrides["s"] >= 0:
        raise OutOfBounds("s must be non-negative")
    camera = base_camera.replace(**{k: float(overrides[k]) for k in ("n_w", "s") if k in overrides})
    medium = MediumParams(overrides.get("A", base_medium.A), overrides.get("beta", base_medium.beta))
    medium.check()
    pose = overrides.get("pose", base_pose)
    return render_image(scene, medium, camera, pose, "underwater", cfg, threads)
