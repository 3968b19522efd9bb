# %% [markdown]
# # Rendering through water
# The same voxel scene is rendered three ways. The in-air image has no
# water at all. The geometry-only image keeps the water's colour but
# follows unrefracted rays. The underwater image has both effects.
# Setting the scattering coefficient to zero pumps the water out, while a
# huge coefficient leaves nothing but the back-scatter colour.

# %%
import numpy as np

from uwrectify import MediumParams, SamplingConfig, make_test_scene, orbit_poses, render_image, synthesize_novel
from uwrectify.geometry import CameraModel

scene = make_test_scene("sphere")
cam = CameraModel.from_fov(48, 48, 50.0)
pose = orbit_poses(1, radius=3.0)[0]
cfg = SamplingConfig(1.0, 5.0, 96)
water = MediumParams([0.1, 0.35, 0.45], [0.6, 0.25, 0.2])

# %%
air = render_image(scene, None, cam, pose, "inair", cfg)
geo = render_image(scene, water, cam, pose, "geo", cfg)
uw = render_image(scene, water, cam, pose, "underwater", cfg)
for name, im in (("in-air", air), ("geo-only", geo), ("underwater", uw)):
    print(f"{name:10s} mean rgb", np.round(im.data[im.mask].mean(axis=0), 4))

# %% pumping the water out: zero scattering and matched indices
clear = synthesize_novel(scene, cam, water, pose, cfg, beta=[0, 0, 0], n_w=cam.n_a)
print("pumped out == in air:", np.array_equal(clear.data, air.data))

# %% very turbid water converges to the back-scatter colour
murky = synthesize_novel(scene, cam, water, pose, cfg, beta=[60, 60, 60])
print("max |I - A| in murky water:", float(np.abs(murky.data - water.A).max()))
