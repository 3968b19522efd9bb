"""Flat-port underwater image formation, rectification and medium estimation."""

from uwrectify.errors import (
    DegenerateInput,
    DegenerateRatio,
    InvalidSpec,
    ManifestError,
    NonFiniteLoss,
    OutOfBounds,
    TotalInternalReflection,
    UnsupportedGeometry,
    UwRectifyError,
)
from uwrectify.geometry import (
    CameraModel,
    Pose,
    Ray,
    camera_rays,
    critical_angle,
    distort_image,
    orbit_poses,
    pixel_ray,
    rectify_image,
    refract_direction,
    refracted_ray,
    remap_factor,
    snell_angle,
)
from uwrectify.image import ImageBuffer, linear_to_srgb, psnr, srgb_to_linear
from uwrectify.optimize import (
    CaptureSet,
    LossBreakdown,
    OptimConfig,
    cast_loss,
    color_cast_ratio,
    finite_diff_check,
    gradient_check,
    optimize_joint,
    optimize_medium,
    recon_loss,
)
from uwrectify.render import (
    MediumParams,
    brightness_compensation,
    render_geo_only,
    render_image,
    render_inair,
    render_underwater,
    synthesize_novel,
    transmittance_weights,
)
from uwrectify.scene import SamplingConfig, SceneSpec, VoxelScene, make_test_scene, sample_ray, surface_depth

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
