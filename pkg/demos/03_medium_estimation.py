# %% [markdown]
# # Recovering the water
# With the scene geometry known, only the back-scatter colour A and the
# scattering coefficients beta are unknown. Four synthetic captures are
# enough to fit them by projected gradient descent, and the analytic
# gradients are checked against finite differences first.

# %%
import numpy as np

from uwrectify import CaptureSet, MediumParams, OptimConfig, SamplingConfig, make_test_scene, orbit_poses, render_image
from uwrectify.geometry import CameraModel
from uwrectify.optimize import gradient_check, optimize_medium

scene = make_test_scene("sphere")
cam = CameraModel.from_fov(32, 32, 50.0)
cfg = SamplingConfig(1.0, 5.0, 64)
truth = MediumParams([0.8, 0.85, 0.9], [0.45, 0.25, 0.25])
poses = orbit_poses(4, radius=np.linspace(2.6, 3.4, 4), elevation_deg=[20, -10, 20, -10])
captures = CaptureSet(cam, [(p, render_image(scene, truth, cam, p, "underwater", cfg)) for p in poses])

opt = OptimConfig(iterations=1500, batch_size=None, lr_start=0.1, lr_end=0.01, lr_span=1500, lam=0.0)

# %% gradient check on a small batch of rays
report = gradient_check(scene, truth, cam, poses, cfg, opt, n_rays=128)
print("gradcheck passed:", report.passed, "worst:", report.worst)

# %% fit from the default start; lam = 0 disables the colour-cast prior
medium, trace = optimize_medium(scene, captures, opt, cfg)
print("A    fit", np.round(medium.A, 4), "truth", truth.A)
print("beta fit", np.round(medium.beta, 4), "truth", truth.beta)
print("loss", trace[0].total, "->", trace[-1].total)
