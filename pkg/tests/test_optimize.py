"""Losses, analytic gradients and the projected gradient descent loops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwrectify.errors import DegenerateInput, DegenerateRatio, NonFiniteLoss
from uwrectify.geometry import CameraModel, Pose, orbit_poses
from uwrectify.image import ImageBuffer
from uwrectify.optimize import (
    CAST_FLOOR,
    CaptureSet,
    OptimConfig,
    RayTable,
    build_ray_table,
    cast_grad,
    cast_loss,
    color_cast_ratio,
    finite_diff_check,
    gradient_check,
    initial_scene,
    joint_loss,
    lr_at,
    medium_gradients,
    medium_loss,
    optimize_joint,
    optimize_medium,
    optimize_medium_table,
    project_medium,
    recon_grad,
    recon_loss,
)
from uwrectify.render import MediumParams, render_image
from uwrectify.scene import SamplingConfig, make_test_scene

TRUTH = MediumParams([0.8, 0.85, 0.9], [0.45, 0.25, 0.25])


def random_table(seed=0, n=64, d=(0.5, 4.0)):
    rng = np.random.default_rng(seed)
    J = rng.uniform(0, 1, (n, 3))
    dist = rng.uniform(*d, n)
    Tm = np.exp(-dist[:, None] * TRUTH.beta)
    return RayTable(J, dist, Tm * J + (1 - Tm) * TRUTH.A)


@pytest.fixture(scope="module")
def sphere_captures():
    scene = make_test_scene("sphere")
    cam = CameraModel.from_fov(24, 24, 50.0)
    cfg = SamplingConfig(1.0, 5.0, 48)
    poses = orbit_poses(4, radius=3.0, elevation_deg=15.0)
    views = [(p, render_image(scene, TRUTH, cam, p, "underwater", cfg)) for p in poses]
    return scene, CaptureSet(cam, views, TRUTH), cfg


class TestReconLoss:
    def test_reference_value(self):
        assert recon_loss([0.5, 0, 0], [0.4, 0, 0], 1e-3) == pytest.approx((0.1 / 0.501) ** 2, rel=1e-12)
        assert recon_loss([0.5, 0, 0], [0.4, 0, 0], 1e-3) == pytest.approx(0.039841, abs=1e-6)

    def test_gradient_holds_denominator_fixed(self):
        g = recon_grad([0.5, 0, 0], [0.4, 0, 0], 1e-3)
        assert g[0] == pytest.approx(2 * 0.1 / 0.501**2, rel=1e-12)
        assert g[0] == pytest.approx(0.79681, abs=1e-5)
        denom = np.array([0.501, 1.0, 1.0])
        fd = finite_diff_check(lambda x: float(recon_loss(x, [0.4, 0, 0], denom=denom)), [0.5, 0, 0], g)
        assert fd < 1e-7
        # the full quotient derivative is measurably different
        full = finite_diff_check(lambda x: float(recon_loss(x, [0.4, 0, 0], 1e-3)), [0.5, 0, 0], g)
        assert full > 1e-2

    def test_zero_at_match(self):
        assert recon_loss([0.2, 0.3, 0.4], [0.2, 0.3, 0.4]) == 0.0


class TestCastLoss:
    def test_reference_value(self):
        A, beta, gamma = (0.9, 0.9, 0.9), (0.4, 0.2, 0.2), (0.3, 0.4, 0.5)
        B = 0.9 * (1 - np.exp(-np.array(beta) * 2.0))
        np.testing.assert_allclose(B, [0.49560, 0.29672, 0.29672], atol=1e-5)
        expected = abs(1 - 0.8) + (B[0] / B[1] - 0.3 / 0.4) + (B[0] / B[2] - 0.3 / 0.5)
        assert cast_loss(A, beta, 2.0, gamma) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(2.19, abs=1e-3)

    def test_hinge_inactive_below_ratio(self):
        # back-scatter exactly matching the observed cast costs nothing
        A = np.array([0.3, 0.4, 0.5])
        assert cast_loss(A, (0.2, 0.2, 0.2), 1.0, A) == pytest.approx(0.0, abs=1e-15)

    def test_zero_denominator(self):
        with pytest.raises(DegenerateRatio):
            cast_loss((0.9, 0.9, 0.0), (0.4, 0.2, 0.2), 2.0, (0.3, 0.4, 0.5))
        with pytest.raises(DegenerateRatio):
            cast_loss((0.9, 0.9, 0.9), (0.4, 0.2, 0.2), 0.0, (0.3, 0.4, 0.5))

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_gradients_match_differences(self, seed):
        rng = np.random.default_rng(seed)
        A, beta = rng.uniform(0.2, 1, 3), rng.uniform(0.1, 1, 3)
        gamma, d = rng.uniform(0.1, 1, 3), rng.uniform(0.5, 5)
        _, gA, gb = cast_grad(A, beta, np.array(d), gamma)
        # skip draws that sit on a hinge or |.| kink
        Bs = A * (1 - np.exp(-beta * d))
        kinks = [Bs[1] / Bs[2] - gamma[1] / gamma[2], Bs[0] / Bs[1] - gamma[0] / gamma[1], Bs[0] / Bs[2] - gamma[0] / gamma[2]]
        if min(abs(k) for k in kinks) < 1e-3:
            return
        assert finite_diff_check(lambda a: cast_loss(a, beta, d, gamma), A, gA, 1e-6) < 1e-5
        assert finite_diff_check(lambda b: cast_loss(A, b, d, gamma), beta, gb, 1e-6) < 1e-5


class TestColorCastRatio:
    def test_pooled_over_views_and_pixels(self):
        a = ImageBuffer(np.full((2, 2, 3), [0.2, 0.4, 0.6]))
        b = ImageBuffer(np.full((2, 4, 3), [0.5, 0.1, 0.3]))
        np.testing.assert_allclose(color_cast_ratio([a, b]), (4 * a.data[0, 0] + 8 * b.data[0, 0]) / 12)

    def test_masked_pixels_ignored(self):
        data = np.full((2, 2, 3), 0.5)
        data[0, 0] = 9.0
        mask = np.ones((2, 2), bool)
        mask[0, 0] = False
        np.testing.assert_allclose(color_cast_ratio([ImageBuffer(data, mask)]), 0.5)

    def test_zero_channel(self):
        with pytest.raises(DegenerateInput):
            color_cast_ratio([ImageBuffer(np.zeros((2, 2, 3)))])


class TestScheduleAndProjection:
    def test_endpoints_and_hold(self):
        cfg = OptimConfig(lr_start=2.5e-4, lr_end=2.5e-5, lr_span=1000)
        assert lr_at(cfg, 0) == 2.5e-4
        assert lr_at(cfg, 1000) == pytest.approx(2.5e-5, abs=1e-12)
        assert lr_at(cfg, 5000) == lr_at(cfg, 1000)

    def test_log_linear(self):
        cfg = OptimConfig(lr_start=1.0, lr_end=0.01, lr_span=100)
        assert lr_at(cfg, 50) == pytest.approx(0.1, abs=1e-12)
        lrs = np.log([lr_at(cfg, k) for k in range(101)])
        np.testing.assert_allclose(np.diff(lrs), np.log(0.01) / 100, atol=1e-12)

    def test_projection(self):
        m = project_medium(MediumParams([1.5, -0.2, 0.5], [0.05, 2.0, 0.3]), OptimConfig(lam=0.0))
        np.testing.assert_array_equal(m.A, [1.0, 0.0, 0.5])
        np.testing.assert_array_equal(m.beta, [0.1, 1.0, 0.3])

    def test_relaxed_bounds(self):
        m = project_medium(MediumParams(0.5, [0.05, 0.0, 0.3]), OptimConfig(relax_bounds=True, lam=0.0))
        np.testing.assert_array_equal(m.beta, [0.05, 0.0, 0.3])

    def test_cast_prior_keeps_ratios_defined(self):
        cfg = OptimConfig(relax_bounds=True)
        m = project_medium(MediumParams([0.5, -0.2, 0.0], [0.05, 0.0, -1.0]), cfg)
        np.testing.assert_array_equal(m.A, [0.5, CAST_FLOOR, CAST_FLOOR])
        np.testing.assert_array_equal(m.beta, [0.05, CAST_FLOOR, CAST_FLOOR])
        assert np.isfinite(cast_loss(m.A, m.beta, 2.0, [0.3, 0.3, 0.3]))

    def test_descent_onto_zero_bound_keeps_running(self):
        # green and blue carry no back-scatter; a large step lands A_g on 0
        truth = MediumParams([0.5, 0.0, 0.0], [0.3, 0.3, 0.3])
        rng = np.random.default_rng(2)
        J, d = rng.uniform(0.2, 1, (128, 3)), rng.uniform(0.5, 4, 128)
        Tm = np.exp(-d[:, None] * truth.beta)
        table = RayTable(J, d, Tm * J + (1 - Tm) * truth.A)
        cfg = OptimConfig(iterations=20, batch_size=None, lr_start=1.0, lr_end=1.0, A_init=(0.5, 0.05, 0.05))
        _, trace = optimize_medium_table(table, table.I_obs.mean(axis=0), cfg)
        assert min(t.A.min() for t in trace) == CAST_FLOOR
        assert all(np.isfinite(t.total) for t in trace)

    @pytest.mark.parametrize("kw", [dict(A_init=(1.2, 0.9, 0.9)), dict(beta_init=(0.05, 0.2, 0.2)), dict(lr_end=1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            OptimConfig(**kw)


class TestMediumGradients:
    def test_match_central_differences(self):
        table = random_table()
        gamma = table.I_obs.mean(axis=0)
        cfg = OptimConfig()
        m0 = MediumParams([0.6, 0.7, 0.75], [0.3, 0.3, 0.2])
        Tm = np.exp(-table.d[:, None] * m0.beta)
        denom = Tm * table.J + (1 - Tm) * m0.A + cfg.eps
        gA = medium_loss(table, m0, gamma, cfg, denom).grad_A
        gb = medium_loss(table, m0, gamma, cfg, denom).grad_beta
        assert finite_diff_check(lambda a: medium_loss(table, MediumParams(a, m0.beta), gamma, cfg, denom).total, m0.A, gA) < 1e-4
        assert finite_diff_check(lambda b: medium_loss(table, MediumParams(m0.A, b), gamma, cfg, denom).total, m0.beta, gb) < 1e-4

    def test_batch_order_invariant(self):
        table = random_table(1)
        gamma = table.I_obs.mean(axis=0)
        perm = np.random.default_rng(2).permutation(len(table))
        a = medium_gradients(table, MediumParams.default(), gamma, OptimConfig())
        b = medium_gradients(table.subset(perm), MediumParams.default(), gamma, OptimConfig())
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-12)

    def test_zero_at_truth_without_prior(self):
        table = random_table(3)
        lb = medium_loss(table, TRUTH, table.I_obs.mean(axis=0), OptimConfig(lam=0.0))
        assert lb.total == pytest.approx(0.0, abs=1e-25)
        np.testing.assert_allclose(lb.grad_A, 0.0, atol=1e-12)


class TestFiniteDiffHarness:
    def test_quadratic(self):
        x0 = np.array([0.3, -1.2, 2.0])
        assert finite_diff_check(lambda x: float(np.sum(x**2)), x0, 2 * x0) < 1e-9

    def test_error_shrinks_with_step_on_cubic(self):
        x0 = np.array([1.3])
        f = lambda x: float(np.sum(x**3 + np.sin(x)))  # noqa: E731
        g = 3 * x0**2 + np.cos(x0)
        e1 = finite_diff_check(f, x0, g, 1e-2)
        e2 = finite_diff_check(f, x0, g, 5e-3)
        assert e2 == pytest.approx(e1 / 4, rel=0.05)

    def test_wrong_gradient_detected(self):
        assert finite_diff_check(lambda x: float(np.sum(x**2)), [1.0, 2.0], [2.0, -4.0]) > 1.0

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: 0.0, [1.0], [0.0], step=0.0)


class TestJointGradients:
    def test_gradcheck_passes_on_slab(self):
        report = gradient_check(
            make_test_scene("slab"),
            MediumParams.default(),
            CameraModel.from_fov(32, 32, 50.0),
            [Pose(), Pose(translation=[0.2, 0.0, 0.0])],
            SamplingConfig(0.0, 6.0, 64),
            OptimConfig(),
            n_rays=128,
            n_coords=6,
        )
        assert report.passed, report.errors

    @pytest.mark.parametrize("group", ["A", "c_o"])
    def test_sign_flip_detected(self, group):
        report = gradient_check(
            make_test_scene("slab"),
            MediumParams.default(),
            CameraModel.from_fov(32, 32, 50.0),
            [Pose()],
            SamplingConfig(0.0, 6.0, 64),
            OptimConfig(),
            n_rays=64,
            n_coords=4,
            flip=group,
        )
        assert not report.passed
        assert report.worst[0] == group

    def test_visits_sum_to_samples_inside(self, sphere_captures):
        scene, caps, cfg = sphere_captures
        pose, img = caps.views[0]
        from uwrectify.render import world_rays

        o, d, _ = world_rays(caps.camera, pose, caps.camera.pixel_centers().reshape(-1, 2)[:50], True)
        jg = joint_loss(scene, TRUTH, o, d, img.data.reshape(-1, 3)[:50], np.full(3, 0.5), OptimConfig(), cfg)
        from uwrectify.render import trace_rays

        inside = scene.contains(trace_rays(scene, o, d, cfg).positions[..., None] * d[:, None, :] + o[:, None, :])
        assert jg.visits.sum() == pytest.approx(inside.sum() / 50, rel=1e-12)


class TestOptimizeMedium:
    def test_recovers_truth_without_prior(self):
        table = random_table(4, n=512)
        cfg = OptimConfig(lam=0.0, iterations=3000, batch_size=None, lr_start=0.1, lr_end=0.01, lr_span=3000)
        m, trace = optimize_medium_table(table, table.I_obs.mean(axis=0), cfg)
        np.testing.assert_allclose(m.beta, TRUTH.beta, rtol=0.02)
        np.testing.assert_allclose(m.A, TRUTH.A, atol=0.02)
        assert trace[-1].total < trace[0].total

    def test_clamp_active_at_lower_bound(self):
        truth = MediumParams([0.5, 0.6, 0.7], [0.1, 0.3, 0.3])
        rng = np.random.default_rng(5)
        J, d = rng.uniform(0, 1, (256, 3)), rng.uniform(0.5, 4, 256)
        Tm = np.exp(-d[:, None] * truth.beta)
        table = RayTable(J, d, Tm * J + (1 - Tm) * truth.A)
        cfg = OptimConfig(lam=0.0, iterations=2000, batch_size=None, lr_start=0.1, lr_end=0.01, lr_span=2000)
        m, _ = optimize_medium_table(table, table.I_obs.mean(axis=0), cfg)
        assert m.beta[0] == 0.1

    def test_held_until_start(self):
        table = random_table(6)
        cfg = OptimConfig(iterations=5, medium_start=3, lr_start=0.1, lr_end=0.1, batch_size=None)
        _, trace = optimize_medium_table(table, table.I_obs.mean(axis=0), cfg)
        for k in range(4):
            np.testing.assert_array_equal(trace[k].A, cfg.A_init)
        assert not np.array_equal(trace[4].A, cfg.A_init)

    def test_deterministic_given_seed(self, sphere_captures):
        scene, caps, cfg = sphere_captures
        oc = OptimConfig(iterations=20, batch_size=256, lr_start=0.05, lr_end=0.01, lr_span=20, seed=3)
        a, _ = optimize_medium(scene, caps, oc, cfg)
        b, _ = optimize_medium(scene, caps, oc, cfg)
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.beta, b.beta)

    def test_non_finite_loss_reports_state(self):
        table = random_table(7)
        table.I_obs[0, 0] = np.nan
        with pytest.raises(NonFiniteLoss) as info:
            optimize_medium_table(table, np.full(3, 0.5), OptimConfig(iterations=3, batch_size=None))
        assert info.value.iteration == 0
        assert "A" in info.value.state

    def test_ray_table_from_scene(self, sphere_captures):
        scene, caps, cfg = sphere_captures
        table = build_ray_table(scene, caps, cfg)
        assert len(table) == sum(img.mask.sum() for _, img in caps.views)
        lb = medium_loss(table, TRUTH, color_cast_ratio(caps), OptimConfig(lam=0.0))
        assert lb.recon < 1e-20


class TestOptimizeJoint:
    def test_loss_decreases(self, sphere_captures):
        scene, caps, cfg = sphere_captures
        cfg = cfg.replace(sigma_thresh=2.0)
        oc = OptimConfig(
            iterations=30, batch_size=512, lr_start=1.0, lr_end=0.3, lr_span=30,
            density_lr_scale=30.0, visit_normalized=True, A_init=tuple(TRUTH.A), beta_init=tuple(TRUTH.beta),
        )  # fmt: skip
        est, m, trace = optimize_joint(caps, oc, 8, (scene.bounds_min, scene.bounds_max), cfg, fit_medium=False)
        assert np.mean([t.total for t in trace[-5:]]) < np.mean([t.total for t in trace[:5]])
        assert est.resolution == (8, 8, 8)
        assert est.sigma.min() >= 0 and 0 <= est.color.min() and est.color.max() <= 1
        np.testing.assert_array_equal(m.A, TRUTH.A)

    def test_initial_scene(self):
        s = initial_scene((-1, -1, -1), (1, 1, 1), 4, 2.0, 0.3)
        assert s.resolution == (4, 4, 4)
        assert np.all(s.sigma == 2.0) and np.all(s.color == 0.3)
