"""Flat-port camera geometry: pinhole rays, Snell refraction and pixel remapping.

Conventions
-----------
Camera frame follows OpenCV: x right, y down, z forward. Pixel coordinates
are continuous with the center of pixel ``(i, j)`` at ``(i + 0.5, j + 0.5)``;
``(cx, cy)`` is where the optical axis pierces the sensor. Rays are traced
from the camera into the scene, so the in-housing angle ``phi_a`` is the
incidence angle and the in-water angle ``phi_w`` the refraction angle.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from uwrectify.errors import TotalInternalReflection, UnsupportedGeometry
from uwrectify.image import ImageBuffer

_AXIS_EPS = 1e-12
_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus flat-port parameters.

    Attributes:
        width, height: Image size in pixels.
        fx, fy: Focal lengths in pixels.
        cx, cy: Principal point in pixels.
        s: Perpendicular distance from the optical center to the port.
        n_a: Refractive index inside the housing.
        n_w: Refractive index of the surrounding medium.
        normal: Unit port normal in the camera frame, pointing into the water.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    s: float = 0.0
    n_a: float = 1.0
    n_w: float = 1.333
    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")
        if self.s < 0:
            raise ValueError("port distance s must be non-negative")
        if not (self.n_a > 0 and self.n_w > 0):
            raise ValueError("refractive indices must be positive")
        g = np.asarray(self.normal, dtype=float)
        if g.shape != (3,):
            raise ValueError("normal must be a 3-vector")
        norm = np.linalg.norm(g)
        if norm == 0:
            raise ValueError("normal must be nonzero")
        object.__setattr__(self, "normal", tuple(float(x) for x in g / norm))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float, **kwargs) -> CameraModel:
        """Square-pixel camera with the given horizontal field of view."""
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, **kwargs)

    @property
    def g(self) -> NDArray:
        return np.array(self.normal)

    @property
    def is_axial(self) -> bool:
        """True when the port normal coincides with the optical axis."""
        return bool(np.allclose(self.normal, (0.0, 0.0, 1.0), atol=1e-9))

    def replace(self, **changes) -> CameraModel:
        return dataclasses.replace(self, **changes)

    def pixel_centers(self) -> NDArray:
        """(height, width, 2) array of pixel-center coordinates (u, v)."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1)

    def normalized(self, pixels: ArrayLike) -> NDArray:
        """Pixel coordinates to normalized image-plane coordinates."""
        p = np.asarray(pixels, dtype=float)
        return np.stack([(p[..., 0] - self.cx) / self.fx, (p[..., 1] - self.cy) / self.fy], axis=-1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["normal"] = list(self.normal)
        return d


@dataclass
class Ray:
    """Half-line ``origin + t * direction`` restricted to ``[t_near, t_far]``."""

    origin: NDArray
    direction: NDArray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")

    def at(self, t):
        t = np.asarray(t, dtype=float)
        return self.origin + t[..., None] * self.direction


@dataclass
class Pose:
    """Rigid camera-to-world transform: ``x_world = R @ x_cam + t``."""

    rotation: NDArray = field(default_factory=lambda: np.eye(3))
    translation: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_euler_deg(cls, angles_deg: ArrayLike, translation: ArrayLike) -> Pose:
        """Extrinsic xyz Euler angles in degrees."""
        R = Rotation.from_euler("xyz", np.asarray(angles_deg, dtype=float), degrees=True).as_matrix()
        return cls(R, translation)

    def to_euler_deg(self) -> NDArray:
        # at gimbal lock scipy zeroes the third angle; the rotation is still reproduced exactly
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return Rotation.from_matrix(self.rotation).as_euler("xyz", degrees=True)

    @classmethod
    def look_at(cls, eye: ArrayLike, target: ArrayLike, up: ArrayLike = (0.0, 1.0, 0.0)) -> Pose:
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    @property
    def center(self) -> NDArray:
        return self.translation

    def points_to_world(self, points: ArrayLike) -> NDArray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def dirs_to_world(self, dirs: ArrayLike) -> NDArray:
        return np.asarray(dirs, dtype=float) @ self.rotation.T


def orbit_poses(
    n_views: int,
    radius: float | ArrayLike = 3.0,
    elevation_deg: float | ArrayLike = 20.0,
    target: ArrayLike = (0.0, 0.0, 0.0),
    phase_deg: float = 0.0,
) -> list[Pose]:
    """Cameras evenly spaced in azimuth around ``target``, all looking at it.

    ``radius`` and ``elevation_deg`` may be per-view sequences.
    """
    target = np.asarray(target, dtype=float)
    radii = np.broadcast_to(np.asarray(radius, dtype=float), (n_views,))
    elev = np.radians(np.broadcast_to(np.asarray(elevation_deg, dtype=float), (n_views,)))
    poses = []
    for k in range(n_views):
        az = np.radians(phase_deg) + 2 * np.pi * k / n_views
        # y is world-down so cameras above the target have negative y
        offset = radii[k] * np.array(
            [np.cos(elev[k]) * np.sin(az), -np.sin(elev[k]), -np.cos(elev[k]) * np.cos(az)]
        )
        poses.append(Pose.look_at(target + offset, target, up=(0.0, -1.0, 0.0)))
    return poses


# ---------------------------------------------------------------------------
# Ray generation


def pixel_directions(camera: CameraModel, pixels: ArrayLike) -> NDArray:
    """Unit pinhole directions (camera frame) through ``pixels`` (..., 2)."""
    xy = camera.normalized(pixels)
    d = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(camera: CameraModel, pixel: ArrayLike) -> Ray:
    """Unrefracted ray from the optical center through ``pixel``."""
    return Ray(np.zeros(3), pixel_directions(camera, pixel))


def angle_to_normal(d: ArrayLike, g: ArrayLike) -> NDArray:
    """Angle between unit vectors, accurate near zero."""
    d = np.asarray(d, dtype=float)
    g = np.broadcast_to(np.asarray(g, dtype=float), d.shape)
    return np.arctan2(np.linalg.norm(np.cross(d, g), axis=-1), np.sum(d * g, axis=-1))


def _snell(phi_in, ratio):
    """arcsin(ratio * sin(phi_in)) with NaN where no real solution exists."""
    if ratio == 1.0:
        return np.asarray(phi_in, dtype=float)
    arg = ratio * np.sin(phi_in)
    with np.errstate(invalid="ignore"):
        return np.where(arg > 1.0, np.nan, np.arcsin(np.minimum(arg, 1.0)))


def snell_angle(phi_in, n_from: float, n_to: float):
    """Refraction angle for a ray crossing from index ``n_from`` to ``n_to``.

    Raises:
        TotalInternalReflection: if ``(n_from / n_to) * sin(phi_in) > 1``.
    """
    phi_in = np.asarray(phi_in, dtype=float)
    out = _snell(phi_in, n_from / n_to)
    if np.any(np.isnan(out)):
        raise TotalInternalReflection(
            f"no refracted ray: (n_from/n_to) sin(phi) exceeds 1 for n_from={n_from}, n_to={n_to}"
        )
    return float(out) if out.ndim == 0 else out


def critical_angle(n_from: float, n_to: float) -> float:
    """Largest incidence angle that still refracts (pi/2 if TIR is impossible)."""
    ratio = n_from / n_to
    return float(np.arcsin(1.0 / ratio)) if ratio > 1.0 else np.pi / 2


def refract_direction(d_in: ArrayLike, g: ArrayLike, phi_in, phi_out) -> NDArray:
    """Rotate ``d_in`` toward ``g`` so its angle to ``g`` becomes ``phi_out``.

    Rodrigues rotation about ``u = d_in x g`` by ``phi_in - phi_out``.
    Rays along the normal have no rotation axis and, like rays with a zero
    rotation angle (matched indices), are returned bit-for-bit unchanged.
    """
    d_in = np.asarray(d_in, dtype=float)
    g = np.broadcast_to(np.asarray(g, dtype=float), d_in.shape)
    u = np.cross(d_in, g)
    un = np.linalg.norm(u, axis=-1, keepdims=True)
    degenerate = un < _AXIS_EPS
    u = np.where(degenerate, 0.0, u / np.where(degenerate, 1.0, un))
    theta = (np.asarray(phi_in, dtype=float) - np.asarray(phi_out, dtype=float))[..., None]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    udotd = np.sum(u * d_in, axis=-1, keepdims=True)
    out = d_in * cos_t + np.cross(u, d_in) * sin_t + u * udotd * (1.0 - cos_t)
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    return np.where(degenerate | (theta == 0.0), d_in, out)


def camera_rays(camera: CameraModel, pixels: ArrayLike, refract: bool = True):
    """Vectorized ray generation in the camera frame.

    Returns:
        origins (..., 3), directions (..., 3) and a boolean ``valid`` mask
        that is False where total internal reflection blocks the ray.
    """
    d_a = pixel_directions(camera, pixels)
    shape = d_a.shape[:-1]
    if not refract:
        return np.zeros(d_a.shape), d_a, np.ones(shape, dtype=bool)
    g = camera.g
    phi_a = angle_to_normal(d_a, g)
    phi_w = _snell(phi_a, camera.n_a / camera.n_w)
    valid = ~np.isnan(phi_w)
    phi_w = np.where(valid, phi_w, phi_a)
    cos_a = np.sum(d_a * g, axis=-1)
    origins = (camera.s / cos_a)[..., None] * d_a
    dirs = refract_direction(d_a, g, phi_a, phi_w)
    return origins, dirs, valid


def refracted_ray(camera: CameraModel, pixel: ArrayLike) -> Ray:
    """Ray leaving the port into the water for ``pixel`` (camera frame)."""
    d_a = pixel_directions(camera, pixel)
    phi_a = float(angle_to_normal(d_a, camera.g))
    phi_w = snell_angle(phi_a, camera.n_a, camera.n_w)
    origin = camera.s / np.cos(phi_a) * d_a
    return Ray(origin, refract_direction(d_a, camera.g, phi_a, phi_w))


# ---------------------------------------------------------------------------
# Geometric rectification


def _lateral_scale(tan_a, tan_w, s, z):
    """Normalized in-air radius of the scene point seen at in-housing tan_a."""
    if z is None:
        return tan_w
    return (s * tan_a + (z - s) * tan_w) / z


def remap_factor(camera: CameraModel, pixel: ArrayLike, z: float | None = None):
    """Radial scale ``h`` mapping underwater pixel offsets to in-air ones.

    Args:
        camera: Flat-port camera.
        pixel: Pixel coordinate(s), shape (..., 2).
        z: Perpendicular depth of the scene point. ``None`` selects the
            ``s ~ 0`` approximation where ``h`` does not depend on depth.

    Returns:
        ``h`` with the shape of ``pixel[..., 0]``. NaN where the pixel's
        ray is totally internally reflected.
    """
    if z is not None and not z > camera.s:
        raise ValueError("z must exceed the port distance s")
    d_a = pixel_directions(camera, pixel)
    phi_a = angle_to_normal(d_a, camera.g)
    phi_w = _snell(phi_a, camera.n_a / camera.n_w)
    tan_a, tan_w = np.tan(phi_a), np.tan(phi_w)
    small = phi_a < _SMALL_ANGLE
    ratio = camera.n_a / camera.n_w
    if z is None:
        limit = ratio
    else:
        limit = (camera.s + (z - camera.s) * ratio) / z
    with np.errstate(invalid="ignore", divide="ignore"):
        h = _lateral_scale(tan_a, tan_w, camera.s, z) / tan_a
    h = np.where(small, limit, h)
    return float(h) if np.ndim(h) == 0 else h


def _check_rectifiable(camera: CameraModel, z):
    if isinstance(z, str):
        if z == "s_zero":
            z = None
        elif z in ("per_pixel", "per-pixel"):
            raise UnsupportedGeometry("per-pixel depth rectification is not implemented")
        else:
            raise ValueError(f"unknown rectification mode {z!r}")
    if not camera.is_axial:
        raise UnsupportedGeometry("rectification assumes the port normal is the optical axis")
    if z is not None and not z > camera.s:
        raise ValueError("z must exceed the port distance s")
    return z


def _as_buffer(image) -> ImageBuffer:
    return image if isinstance(image, ImageBuffer) else ImageBuffer(np.asarray(image, dtype=float))


def _sample(data: NDArray, u: NDArray, v: NDArray, valid: NDArray) -> tuple[NDArray, NDArray]:
    """Bilinear lookup at continuous pixel coordinates; zero outside."""
    h, w = data.shape[:2]
    col, row = u - 0.5, v - 0.5
    tol = 1e-9
    inside = valid & (col >= -tol) & (col <= w - 1 + tol) & (row >= -tol) & (row <= h - 1 + tol)
    coords = np.stack([np.where(inside, row, 0.0).ravel(), np.where(inside, col, 0.0).ravel()])
    out = np.empty(u.shape + data.shape[2:])
    for c in range(data.shape[2]):
        out[..., c] = map_coordinates(data[..., c], coords, order=1, mode="nearest").reshape(u.shape)
    out[~inside] = 0.0
    return out, inside


def _invert_lateral_scale(camera: CameraModel, rho_out: NDArray, z) -> tuple[NDArray, NDArray]:
    """Solve for the in-housing angle whose scene point lands at ``rho_out``."""
    ratio = camera.n_a / camera.n_w
    hi_angle = critical_angle(camera.n_a, camera.n_w) - 1e-12

    def lateral(phi):
        return _lateral_scale(np.tan(phi), np.tan(_snell(phi, ratio)), camera.s, z)

    reachable = rho_out <= lateral(hi_angle)
    lo = np.zeros_like(rho_out)
    hi = np.full_like(rho_out, hi_angle)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        below = lateral(mid) < rho_out
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi), reachable


def rectify_image(image, camera: CameraModel, z: float | str = "s_zero") -> ImageBuffer:
    """Warp an underwater image to the geometry an in-air pinhole would see.

    Each output pixel at offset ``u'`` from the principal point is pulled
    from the input offset ``u`` satisfying ``u' = h(u) * u``, with bilinear
    interpolation. Output pixels whose source lies outside the input (the
    rectified field of view is narrower) are zero and masked invalid.

    Args:
        image: ImageBuffer or (H, W, C) array in linear light.
        camera: Camera the image was captured with.
        z: ``"s_zero"`` for the small-port-distance model, or a uniform
            scene depth for fronto-parallel scenes.

    Raises:
        UnsupportedGeometry: for ``z="per_pixel"`` or a tilted port.
    """
    buf = _as_buffer(image)
    if (buf.height, buf.width) != (camera.height, camera.width):
        raise ValueError("image size does not match the camera")
    z = _check_rectifiable(camera, z)
    if camera.n_a == camera.n_w:
        return buf.copy()
    xy_out = camera.normalized(camera.pixel_centers())
    rho_out = np.linalg.norm(xy_out, axis=-1)
    phi_a, reachable = _invert_lateral_scale(camera, rho_out, z)
    rho_src = np.tan(phi_a)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rho_out > 0, rho_src / rho_out, 1.0)
    u = camera.cx + camera.fx * xy_out[..., 0] * scale
    v = camera.cy + camera.fy * xy_out[..., 1] * scale
    data, inside = _sample(buf.data, u, v, reachable)
    src_mask, _ = _sample(buf.mask[..., None].astype(float), u, v, reachable)
    mask = inside & (src_mask[..., 0] > 1.0 - 1e-9)
    data[~mask] = 0.0
    return ImageBuffer(data, mask)


def distort_image(image, camera: CameraModel, z: float | str = "s_zero") -> ImageBuffer:
    """Forward model of :func:`rectify_image`: what the flat port would record.

    Underwater pixel ``u`` is read from the in-air image at ``h(u) * u``.
    """
    buf = _as_buffer(image)
    if (buf.height, buf.width) != (camera.height, camera.width):
        raise ValueError("image size does not match the camera")
    z = _check_rectifiable(camera, z)
    if camera.n_a == camera.n_w:
        return buf.copy()
    pix = camera.pixel_centers()
    h = remap_factor(camera, pix, z)
    ok = ~np.isnan(h)
    h = np.where(ok, h, 1.0)
    u = camera.cx + h * (pix[..., 0] - camera.cx)
    v = camera.cy + h * (pix[..., 1] - camera.cy)
    data, inside = _sample(buf.data, u, v, ok)
    src_mask, _ = _sample(buf.mask[..., None].astype(float), u, v, ok)
    mask = inside & (src_mask[..., 0] > 1.0 - 1e-9)
    data[~mask] = 0.0
    return ImageBuffer(data, mask)
