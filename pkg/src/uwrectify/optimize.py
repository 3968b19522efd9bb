"""Inverse estimation of medium parameters and voxel fields.

Losses follow the underwater NeRF recipe: a relative squared error whose
denominator is stop-gradiented, plus a weak color-cast prior on the ratio
of back-scatter between channels. Gradients are written out by hand and
checked against central differences in the test suite.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from uwrectify.errors import DegenerateInput, DegenerateRatio, NonFiniteLoss
from uwrectify.geometry import CameraModel, Pose
from uwrectify.image import ImageBuffer
from uwrectify.render import MediumParams, attenuate, medium_transmittance, trace_rays, world_rays
from uwrectify.scene import SamplingConfig, VoxelScene

log = logging.getLogger(__name__)

R, G, B = 0, 1, 2


@dataclass
class CaptureSet:
    """Posed linear-light images sharing one camera."""

    camera: CameraModel
    views: list[tuple[Pose, ImageBuffer]]
    ground_truth: MediumParams | None = None

    def __post_init__(self):
        if not self.views:
            raise ValueError("a capture set needs at least one view")
        for _, img in self.views:
            if (img.height, img.width) != (self.camera.height, self.camera.width):
                raise ValueError("all images must match the camera size")

    def __len__(self):
        return len(self.views)


@dataclass
class OptimConfig:
    """Optimizer settings. Learning rates anneal log-linearly over ``lr_span``.

    ``*_lr_scale`` multiply the shared schedule per parameter group.
    ``relax_bounds`` drops the lower attenuation bound to zero.
    ``sigma_init`` and ``color_init`` fill the initial voxel grid of joint
    fitting. With ``visit_normalized`` each voxel's step is divided by how
    much of the batch touched it (floored at ``visit_floor``), which
    equalizes step sizes between often and rarely seen cells.
    """

    A_init: tuple = (0.9, 0.9, 0.9)
    beta_init: tuple = (0.4, 0.2, 0.2)
    A_bounds: tuple = (0.0, 1.0)
    beta_bounds: tuple = (0.1, 1.0)
    lam: float = 1e-3
    eps: float = 1e-3
    iterations: int = 1000
    batch_size: int | None = 2048
    lr_start: float = 2.5e-4
    lr_end: float = 2.5e-5
    lr_span: int = 50000
    medium_start: int = 0
    seed: int = 0
    medium_lr_scale: float = 1.0
    color_lr_scale: float = 1.0
    density_lr_scale: float = 1.0
    density_max: float | None = None
    relax_bounds: bool = False
    sigma_init: float = 0.0
    color_init: float = 0.5
    visit_normalized: bool = False
    visit_floor: float = 1e-2

    def __post_init__(self):
        self.A_init = tuple(float(x) for x in self.A_init)
        self.beta_init = tuple(float(x) for x in self.beta_init)
        self.A_bounds = tuple(float(x) for x in self.A_bounds)
        self.beta_bounds = tuple(float(x) for x in self.beta_bounds)
        lo, hi = self.effective_beta_bounds
        if not all(self.A_bounds[0] <= a <= self.A_bounds[1] for a in self.A_init):
            raise ValueError("A_init outside A_bounds")
        if not all(lo <= b <= hi for b in self.beta_init):
            raise ValueError("beta_init outside beta_bounds")
        if not (self.lr_start > 0 and 0 < self.lr_end <= self.lr_start):
            raise ValueError("need lr_start >= lr_end > 0")
        if self.lr_span < 1 or self.iterations < 0:
            raise ValueError("lr_span must be >= 1 and iterations >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def effective_beta_bounds(self) -> tuple[float, float]:
        return (0.0, self.beta_bounds[1]) if self.relax_bounds else self.beta_bounds

    def initial_medium(self) -> MediumParams:
        return MediumParams(self.A_init, self.beta_init)

    def replace(self, **changes) -> OptimConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("A_init", "beta_init", "A_bounds", "beta_bounds"):
            d[k] = list(d[k])
        return d


@dataclass
class LossBreakdown:
    iteration: int
    lr: float
    recon: float
    cast: float
    total: float
    A: NDArray
    beta: NDArray
    grad_A: NDArray = field(default_factory=lambda: np.zeros(3))
    grad_beta: NDArray = field(default_factory=lambda: np.zeros(3))


TRACE_COLUMNS = (
    "iteration", "lr", "recon", "cast", "total",
    "A_r", "A_g", "A_b", "beta_r", "beta_g", "beta_b",
)  # fmt: skip


def trace_row(entry: LossBreakdown) -> list:
    return [entry.iteration, entry.lr, entry.recon, entry.cast, entry.total, *entry.A, *entry.beta]


def lr_at(cfg: OptimConfig, k: int) -> float:
    """``lr_start * (lr_end / lr_start) ** (k / span)``, held at ``lr_end`` after the span."""
    frac = min(k, cfg.lr_span) / cfg.lr_span
    return float(cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac)


# With the cast prior active, A and beta stay this far above zero so the
# back-scatter ratios remain defined after projection onto a zero bound.
CAST_FLOOR = 1e-9


def project_medium(medium: MediumParams, cfg: OptimConfig) -> MediumParams:
    lo, hi = cfg.effective_beta_bounds
    a_lo, a_hi = cfg.A_bounds
    if cfg.lam > 0:
        a_lo, lo = max(a_lo, CAST_FLOOR), max(lo, CAST_FLOOR)
    medium.A = np.clip(medium.A, a_lo, a_hi)
    medium.beta = np.clip(medium.beta, lo, hi)
    return medium


# ---------------------------------------------------------------------------
# Loss terms


def recon_loss(I_pred: ArrayLike, I_obs: ArrayLike, eps: float = 1e-3, denom: ArrayLike | None = None):
    """``sum_c ((I_pred - I_obs) / (sg(I_pred) + eps))**2`` per ray.

    ``denom`` overrides the stop-gradient denominator, which lets finite
    differences hold it fixed.
    """
    I_pred = np.asarray(I_pred, dtype=float)
    I_obs = np.asarray(I_obs, dtype=float)
    D = I_pred + eps if denom is None else np.asarray(denom, dtype=float)
    return np.sum(((I_pred - I_obs) / D) ** 2, axis=-1)


def recon_grad(I_pred: ArrayLike, I_obs: ArrayLike, eps: float = 1e-3, denom: ArrayLike | None = None):
    """Derivative of :func:`recon_loss` w.r.t. ``I_pred`` with the denominator frozen."""
    I_pred = np.asarray(I_pred, dtype=float)
    D = I_pred + eps if denom is None else np.asarray(denom, dtype=float)
    return 2.0 * (I_pred - np.asarray(I_obs, dtype=float)) / D**2


def color_cast_ratio(captures: CaptureSet | list) -> NDArray:
    """Per-channel mean over every valid pixel of every capture.

    Raises:
        DegenerateInput: if any channel averages to zero.
    """
    images = [img for _, img in captures.views] if isinstance(captures, CaptureSet) else list(captures)
    if not images:
        raise DegenerateInput("no images")
    total = np.zeros(3)
    count = 0
    for img in images:
        vals = img.data[img.mask]
        total += vals.sum(axis=0)
        count += len(vals)
    if count == 0:
        raise DegenerateInput("no valid pixels")
    gamma = total / count
    if np.any(gamma == 0):
        raise DegenerateInput("a color channel averages to zero")
    return gamma


def _cast_terms(A, beta, d, gamma):
    A = np.asarray(A, dtype=float)
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    d = np.asarray(d, dtype=float)
    Tm = medium_transmittance(beta, d)
    Bs = A * (1.0 - Tm)
    if np.any(Bs[..., G] == 0) or np.any(Bs[..., B] == 0) or gamma[G] == 0 or gamma[B] == 0:
        raise DegenerateRatio("zero back-scatter or color-cast denominator")
    return Tm, Bs, gamma


def cast_loss(A: ArrayLike, beta: ArrayLike, d, gamma: ArrayLike):
    """Color-cast prior on the back-scatter ``B_c = A_c (1 - exp(-beta_c d))``.

    ``|B_g/B_b - gamma_g/gamma_b| + sum_{c in g,b} max(B_r/B_c - gamma_r/gamma_c, 0)``.
    ``d`` is treated as a constant. Vectorized over ``d``.

    Raises:
        DegenerateRatio: when a denominator is zero.
    """
    _, Bs, gamma = _cast_terms(A, beta, d, gamma)
    loss = np.abs(Bs[..., G] / Bs[..., B] - gamma[G] / gamma[B])
    for c in (G, B):
        loss = loss + np.maximum(Bs[..., R] / Bs[..., c] - gamma[R] / gamma[c], 0.0)
    return float(loss) if np.ndim(loss) == 0 else loss


def cast_grad(A: ArrayLike, beta: ArrayLike, d, gamma: ArrayLike):
    """Per-ray cast loss and its gradients w.r.t. ``A`` and ``beta`` (..., 3)."""
    A = np.asarray(A, dtype=float)
    d = np.asarray(d, dtype=float)
    Tm, Bs, gamma = _cast_terms(A, beta, d, gamma)
    dB = np.zeros_like(Bs)
    ratio_gb = Bs[..., G] / Bs[..., B]
    diff = ratio_gb - gamma[G] / gamma[B]
    loss = np.abs(diff)
    sgn = np.sign(diff)
    dB[..., G] += sgn / Bs[..., B]
    dB[..., B] -= sgn * ratio_gb / Bs[..., B]
    for c in (G, B):
        ratio = Bs[..., R] / Bs[..., c]
        excess = ratio - gamma[R] / gamma[c]
        on = excess > 0
        loss = loss + np.where(on, excess, 0.0)
        dB[..., R] += on / Bs[..., c]
        dB[..., c] -= on * ratio / Bs[..., c]
    grad_A = dB * (1.0 - Tm)
    grad_beta = dB * A * d[..., None] * Tm
    return loss, grad_A, grad_beta


# ---------------------------------------------------------------------------
# Medium-only estimation


@dataclass
class RayTable:
    """Fixed per-ray quantities for medium fitting.

    ``J`` is the composited object radiance, ``d`` the (stop-gradiented)
    water path to the surface and ``I_obs`` the captured color.
    """

    J: NDArray
    d: NDArray
    I_obs: NDArray

    def __len__(self):
        return len(self.d)

    def subset(self, idx: NDArray) -> RayTable:
        return RayTable(self.J[idx], self.d[idx], self.I_obs[idx])


def build_ray_table(scene: VoxelScene, captures: CaptureSet, sampling: SamplingConfig) -> RayTable:
    """Trace every valid pixel of every capture through the known scene."""
    Js, ds, obs = [], [], []
    pix = captures.camera.pixel_centers().reshape(-1, 2)
    for k, (pose, img) in enumerate(captures.views):
        o, d, valid = world_rays(captures.camera, pose, pix, refract=True)
        keep = valid & img.mask.reshape(-1)
        rng = np.random.default_rng([sampling.seed, k]) if sampling.jitter else None
        tr = trace_rays(scene, o[keep], d[keep], sampling, rng)
        Js.append(tr.J)
        ds.append(tr.path_length)
        obs.append(img.data.reshape(-1, img.channels)[keep])
    return RayTable(np.concatenate(Js), np.concatenate(ds), np.concatenate(obs))


def medium_loss(
    table: RayTable,
    medium: MediumParams,
    gamma: ArrayLike,
    cfg: OptimConfig,
    denom: NDArray | None = None,
) -> LossBreakdown:
    """Batch-mean total loss ``recon + lam * cast`` and its medium gradients."""
    Tm = medium_transmittance(medium.beta, table.d)
    I = Tm * table.J + (1.0 - Tm) * medium.A
    recon = recon_loss(I, table.I_obs, cfg.eps, denom)
    gI = recon_grad(I, table.I_obs, cfg.eps, denom)
    n = len(table)
    gA = np.sum(gI * (1.0 - Tm), axis=0) / n
    gbeta = np.sum(gI * (-table.d[:, None] * Tm * (table.J - medium.A)), axis=0) / n
    c = 0.0
    if cfg.lam > 0:  # with lam = 0 the prior is skipped, so clear water (zero back-scatter) is allowed
        cast, cA, cb = cast_grad(medium.A, medium.beta, table.d, gamma)
        gA += cfg.lam * cA.sum(axis=0) / n
        gbeta += cfg.lam * cb.sum(axis=0) / n
        c = float(cast.mean())
    r = float(recon.mean())
    return LossBreakdown(0, 0.0, r, c, r + cfg.lam * c, medium.A.copy(), medium.beta.copy(), gA, gbeta)


def medium_gradients(table: RayTable, medium: MediumParams, gamma: ArrayLike, cfg: OptimConfig):
    """``(dL/dA, dL/dbeta)`` of the batch-mean total loss."""
    lb = medium_loss(table, medium, gamma, cfg)
    return lb.grad_A, lb.grad_beta


def _check_finite(entry: LossBreakdown, k: int, state: dict, trace: list):
    if not np.isfinite(entry.total) or not (np.all(np.isfinite(entry.grad_A)) and np.all(np.isfinite(entry.grad_beta))):
        raise NonFiniteLoss(f"non-finite loss at iteration {k}", iteration=k, state=state, trace=trace)


def _batch_indices(rng, n, batch_size):
    if batch_size is None or batch_size >= n:
        return None
    return rng.integers(0, n, batch_size)


def optimize_medium(
    scene: VoxelScene,
    captures: CaptureSet,
    cfg: OptimConfig,
    sampling: SamplingConfig | None = None,
    callback: Callable[[LossBreakdown], None] | None = None,
) -> tuple[MediumParams, list[LossBreakdown]]:
    """Projected gradient descent on ``A`` and ``beta`` with the scene held fixed.

    Medium parameters stay at their initial values before
    ``cfg.medium_start``. Each trace entry holds the loss evaluated on that
    iteration's batch before the update.

    Raises:
        NonFiniteLoss: with the optimizer state and partial trace attached.
    """
    sampling = sampling or SamplingConfig()
    table = build_ray_table(scene, captures, sampling)
    gamma = color_cast_ratio(captures)
    return optimize_medium_table(table, gamma, cfg, callback)


def optimize_medium_table(
    table: RayTable,
    gamma: ArrayLike,
    cfg: OptimConfig,
    callback: Callable[[LossBreakdown], None] | None = None,
) -> tuple[MediumParams, list[LossBreakdown]]:
    medium = project_medium(cfg.initial_medium(), cfg)
    rng = np.random.default_rng(cfg.seed)
    trace: list[LossBreakdown] = []
    for k in range(cfg.iterations):
        idx = _batch_indices(rng, len(table), cfg.batch_size)
        batch = table if idx is None else table.subset(idx)
        lr = lr_at(cfg, k)
        entry = medium_loss(batch, medium, gamma, cfg)
        entry.iteration, entry.lr = k, lr
        _check_finite(entry, k, {"A": medium.A.copy(), "beta": medium.beta.copy()}, trace)
        trace.append(entry)
        if callback is not None:
            callback(entry)
        if k >= cfg.medium_start:
            step = lr * cfg.medium_lr_scale
            medium.A = medium.A - step * entry.grad_A
            medium.beta = medium.beta - step * entry.grad_beta
            project_medium(medium, cfg)
    return medium, trace


# ---------------------------------------------------------------------------
# Joint scene + medium estimation


@dataclass
class JointGradients:
    """Total loss plus voxel gradients.

    ``visits`` is the batch-mean interpolation weight that landed in each
    cell, i.e. how much of the batch the cell influenced.
    """

    loss: LossBreakdown
    sigma: NDArray
    color: NDArray
    visits: NDArray | None = None


def joint_loss(
    scene: VoxelScene,
    medium: MediumParams,
    origins: NDArray,
    dirs: NDArray,
    I_obs: NDArray,
    gamma: ArrayLike,
    cfg: OptimConfig,
    sampling: SamplingConfig,
    frozen: dict | None = None,
    rng: np.random.Generator | None = None,
) -> JointGradients:
    """Batch-mean total loss with gradients for densities, colors and medium.

    ``frozen`` may carry ``denom`` (R, 3) and ``d`` (R,) to hold the
    stop-gradient quantities at externally chosen values.
    """
    tr = trace_rays(scene, origins, dirs, sampling, rng, keep_stencil=True)
    d = tr.path_length if frozen is None or "d" not in frozen else frozen["d"]
    denom = None if frozen is None else frozen.get("denom")
    table = RayTable(tr.J, d, I_obs)
    lb = medium_loss(table, medium, gamma, cfg, denom)

    n = len(d)
    Tm = medium_transmittance(medium.beta, d)
    I = Tm * tr.J + (1.0 - Tm) * medium.A
    gJ = recon_grad(I, I_obs, cfg.eps, denom) * Tm / n

    # dJ/dc_i = w_i ; dJ/dsigma_i = dt_i (T_{i+1} c_i - sum_{k>i} w_k c_k)
    g_col = tr.weights[..., None] * gJ[:, None, :]
    wc = tr.weights[..., None] * tr.color
    behind = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    T_next = tr.transmittance * np.exp(-tr.sigma * tr.deltas)
    dJ_dsig = tr.deltas[None, :, None] * (T_next[..., None] * tr.color - behind)
    g_sig = np.sum(dJ_dsig * gJ[:, None, :], axis=-1)

    inside, idx, wts = tr.stencil
    per_sample = np.concatenate([g_sig[inside][:, None], g_col[inside], np.full((len(idx), 1), 1.0 / n)], axis=-1)
    scattered = np.bincount(
        (idx[..., None] * 5 + np.arange(5)).reshape(-1),
        weights=(wts[..., None] * per_sample[:, None, :]).reshape(-1),
        minlength=5 * scene.sigma.size,
    ).reshape(-1, 5)
    shape = scene.sigma.shape
    return JointGradients(lb, scattered[:, 0].reshape(shape), scattered[:, 1:4].reshape(shape + (3,)), scattered[:, 4].reshape(shape))


@dataclass
class RayPool:
    """All valid training rays of a capture set, in world space."""

    origins: NDArray
    dirs: NDArray
    I_obs: NDArray

    def __len__(self):
        return len(self.origins)


def build_ray_pool(captures: CaptureSet, refract: bool = True) -> RayPool:
    pix = captures.camera.pixel_centers().reshape(-1, 2)
    os_, ds, obs = [], [], []
    for pose, img in captures.views:
        o, d, valid = world_rays(captures.camera, pose, pix, refract=refract)
        keep = valid & img.mask.reshape(-1)
        os_.append(o[keep])
        ds.append(d[keep])
        obs.append(img.data.reshape(-1, img.channels)[keep])
    return RayPool(np.concatenate(os_), np.concatenate(ds), np.concatenate(obs))


def initial_scene(bounds_min, bounds_max, resolution, sigma0: float = 0.0, color0: float = 0.5) -> VoxelScene:
    res = tuple(int(r) for r in np.broadcast_to(np.asarray(resolution), (3,)))
    return VoxelScene(bounds_min, bounds_max, np.full(res, float(sigma0)), np.full(res + (3,), float(color0)))


def optimize_joint(
    captures: CaptureSet,
    cfg: OptimConfig,
    resolution=16,
    bounds: tuple[ArrayLike, ArrayLike] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    sampling: SamplingConfig | None = None,
    init: VoxelScene | None = None,
    fit_medium: bool = True,
    callback: Callable[[int, JointGradients], None] | None = None,
) -> tuple[VoxelScene, MediumParams, list[LossBreakdown]]:
    """Simultaneous projected gradient descent on the voxel grid and medium.

    Densities are clamped to ``[0, density_max]``, colors to ``[0, 1]`` and
    the medium to its bounds after every step. The surface depth is
    re-extracted from the current grid on every iteration and treated as a
    constant. ``sampling.sigma_thresh`` should be set explicitly since the
    grid's peak density changes during fitting.

    Raises:
        NonFiniteLoss: with the optimizer state and partial trace attached.
    """
    sampling = sampling or SamplingConfig()
    if init is None:
        scene = initial_scene(bounds[0], bounds[1], resolution, cfg.sigma_init, cfg.color_init)
    else:
        scene = init.replace(sigma=init.sigma.copy(), color=init.color.copy())
    medium = project_medium(cfg.initial_medium(), cfg)
    pool = build_ray_pool(captures)
    gamma = color_cast_ratio(captures)
    rng = np.random.default_rng(cfg.seed)
    jitter_rng = np.random.default_rng([cfg.seed, 1]) if sampling.jitter else None
    sig_hi = np.inf if cfg.density_max is None else cfg.density_max
    trace: list[LossBreakdown] = []
    for k in range(cfg.iterations):
        idx = _batch_indices(rng, len(pool), cfg.batch_size)
        if idx is None:
            o, d, obs = pool.origins, pool.dirs, pool.I_obs
        else:
            o, d, obs = pool.origins[idx], pool.dirs[idx], pool.I_obs[idx]
        lr = lr_at(cfg, k)
        jg = joint_loss(scene, medium, o, d, obs, gamma, cfg, sampling, rng=jitter_rng)
        entry = jg.loss
        entry.iteration, entry.lr = k, lr
        state = {"A": medium.A.copy(), "beta": medium.beta.copy(), "scene": scene}
        _check_finite(entry, k, state, trace)
        if not (np.all(np.isfinite(jg.sigma)) and np.all(np.isfinite(jg.color))):
            raise NonFiniteLoss(f"non-finite scene gradient at iteration {k}", iteration=k, state=state, trace=trace)
        trace.append(entry)
        if callback is not None:
            callback(k, jg)
        scale = 1.0 / np.maximum(jg.visits, cfg.visit_floor) if cfg.visit_normalized else 1.0
        scene.sigma = np.clip(scene.sigma - lr * cfg.density_lr_scale * scale * jg.sigma, 0.0, sig_hi)
        scene.color = np.clip(scene.color - lr * cfg.color_lr_scale * np.asarray(scale)[..., None] * jg.color, 0.0, 1.0)
        if fit_medium and k >= cfg.medium_start:
            step = lr * cfg.medium_lr_scale
            medium.A = medium.A - step * entry.grad_A
            medium.beta = medium.beta - step * entry.grad_beta
            project_medium(medium, cfg)
    return scene, medium, trace


# ---------------------------------------------------------------------------
# Verification


def finite_diff_check(
    loss_fn: Callable[[NDArray], float],
    params: ArrayLike,
    analytic: ArrayLike,
    step: float = 1e-5,
    indices: ArrayLike | None = None,
) -> float:
    """Worst relative error between ``analytic`` and central differences.

    The relative error of each coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    ``indices`` restricts the check to selected flat coordinates.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x0 = np.array(params, dtype=float)
    flat = x0.reshape(-1)
    grad = np.asarray(analytic, dtype=float).reshape(-1)
    coords = range(flat.size) if indices is None else np.asarray(indices).reshape(-1)
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fd = (loss_fn(xp.reshape(x0.shape)) - loss_fn(xm.reshape(x0.shape))) / (2 * step)
        a = grad[i]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


GRAD_GROUPS = ("A", "beta", "c_o", "sigma")


@dataclass
class GradCheckReport:
    """Worst relative error per parameter group against central differences."""

    errors: dict[str, float]
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def sample_check_rays(camera: CameraModel, poses: list[Pose], n_rays: int, seed: int = 0):
    """``n_rays`` random refracted world rays drawn uniformly over views and pixels."""
    rng = np.random.default_rng(seed)
    os_, ds = [], []
    need = n_rays
    while need > 0:
        view = rng.integers(0, len(poses), need)
        pix = rng.uniform((0.0, 0.0), (camera.width, camera.height), (need, 2))
        for k in np.unique(view):
            sel = view == k
            o, d, valid = world_rays(camera, poses[k], pix[sel], refract=True)
            os_.append(o[valid])
            ds.append(d[valid])
        need = n_rays - sum(len(o) for o in os_)
        if need > 0 and sum(len(o) for o in os_) == 0:
            raise DegenerateInput("no pixel produces a valid refracted ray")
    return np.concatenate(os_)[:n_rays], np.concatenate(ds)[:n_rays]


def gradient_check(
    scene: VoxelScene,
    medium: MediumParams,
    camera: CameraModel,
    poses: list[Pose],
    sampling: SamplingConfig,
    cfg: OptimConfig,
    n_rays: int = 512,
    seed: int = 0,
    n_coords: int = 16,
    step: float = 1e-5,
    flip: str | None = None,
) -> GradCheckReport:
    """Compare analytic total-loss gradients with central differences.

    Observations are rendered from ``scene`` and ``medium``. Gradients are
    taken at a fixed perturbation of both (A scaled by 0.9, beta by 1.2,
    colors squeezed into [0.25, 0.75], densities rescaled to a peak of at
    most 5 so that opaque cells keep a usable gradient) so that every residual is nonzero
    and finite-difference steps stay inside the valid ranges. The
    stop-gradient denominator and surface depth are frozen at the
    evaluation point. For the voxel groups the ``n_coords`` coordinates
    with the largest analytic gradient are checked; densities are only
    probed in cells that are already positive.

    ``flip`` negates one group's analytic gradient, a sentinel that must
    make the check fail.
    """
    o, d = sample_check_rays(camera, poses, n_rays, seed)
    tr = trace_rays(scene, o, d, sampling)
    obs = attenuate(tr.J, tr.path_length, medium)
    gamma = obs.mean(axis=0)

    med0 = MediumParams(np.clip(0.9 * medium.A, 1e-3, 1.0), np.clip(1.2 * medium.beta, 1e-3, None))
    soften = min(1.0, 5.0 / scene.sigma_max) if scene.sigma_max > 0 else 1.0
    scene0 = scene.replace(sigma=soften * scene.sigma, color=0.25 + 0.5 * scene.color)
    tr0 = trace_rays(scene0, o, d, sampling)
    frozen = {"denom": attenuate(tr0.J, tr0.path_length, med0) + cfg.eps, "d": tr0.path_length}

    def total(sc, med):
        return joint_loss(sc, med, o, d, obs, gamma, cfg, sampling, frozen).loss.total

    jg = joint_loss(scene0, med0, o, d, obs, gamma, cfg, sampling, frozen)
    analytic = {"A": jg.loss.grad_A, "beta": jg.loss.grad_beta, "c_o": jg.color, "sigma": jg.sigma}
    if flip is not None:
        if flip not in analytic:
            raise KeyError(f"unknown gradient group {flip!r}")
        analytic[flip] = -analytic[flip]

    def top(grad, allowed):
        g = np.where(allowed.reshape(-1), np.abs(grad.reshape(-1)), 0.0)
        order = np.argsort(-g, kind="stable")[:n_coords]
        return order[g[order] > 0]

    errors = {
        "A": finite_diff_check(lambda A: total(scene0, MediumParams(A, med0.beta)), med0.A, analytic["A"], step),
        "beta": finite_diff_check(lambda b: total(scene0, MediumParams(med0.A, b)), med0.beta, analytic["beta"], step),
        "c_o": finite_diff_check(
            lambda c: total(scene0.replace(color=c), med0),
            scene0.color,
            analytic["c_o"],
            step,
            top(analytic["c_o"], np.ones(scene0.color.shape, dtype=bool)),
        ),
        "sigma": finite_diff_check(
            lambda s: total(scene0.replace(sigma=s), med0),
            scene0.sigma,
            analytic["sigma"],
            step,
            top(analytic["sigma"], scene0.sigma > 10 * step),
        ),
    }
    return GradCheckReport(errors)
