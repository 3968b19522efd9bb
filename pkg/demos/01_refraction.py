# %% [markdown]
# # Flat-port refraction
# A camera behind a flat port sees a wider-angle ray leave the housing
# bent toward the port normal. This script checks Snell's law on one ray,
# looks at the radial remap factor across the image and round-trips an
# image through distortion and rectification.

# %%
import numpy as np

from uwrectify import CameraModel, critical_angle, remap_factor, snell_angle
from uwrectify.geometry import distort_image, rectify_image
from uwrectify.image import ImageBuffer, psnr

# %% 30 degrees in water becomes 41.8 degrees in air (water to air)
print("air angle  :", np.degrees(snell_angle(np.radians(30.0), 1.333, 1.0)))
print("critical   :", np.degrees(critical_angle(1.333, 1.0)))

# %% remap factor grows with distance from the principal point
cam = CameraModel.from_fov(96, 96, 70.0)
cols = np.arange(48, 96, 8)
pix = np.stack([cols + 0.5, np.full(cols.shape, 48.5)], axis=-1)
print("h along row:", np.round(remap_factor(cam, pix), 4))

# %% smooth-pattern round trip under the s ~ 0 approximation
yy, xx = np.mgrid[:96, :96] / 96.0
pattern = 0.5 + 0.25 * np.sin(6 * xx) * np.cos(5 * yy)
img = ImageBuffer(np.repeat(pattern[..., None], 3, axis=-1))
warped = distort_image(img, cam)
back = rectify_image(warped, cam)
valid = back.mask & warped.mask
print("round-trip PSNR (dB):", round(psnr(back.data, img.data, valid), 2))
