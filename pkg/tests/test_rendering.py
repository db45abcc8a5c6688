"""Volume rendering: sampling, compositing, field queries, full renders."""

import numpy as np
import pytest
from scipy.special import logit

from voxelrf.cameras import Camera, RayBatch, look_at
from voxelrf.errors import ConfigurationError, InvalidParameterError
from voxelrf.grids import VoxelGrid
from voxelrf.rendering import (RadianceField, RenderConfig, composite,
                               patch_pixels, query_field, ray_box_intersection,
                               render_backward, render_depth_patch,
                               render_image, render_rays, sample_points,
                               sample_points_batch)

BG = np.array([0.3, 0.6, 0.9])


def random_field(rng, res=12, mode="rgb", bounds=1.0, dtype=np.float64,
                 alpha_init=1e-2):
    field = RadianceField.create((res,) * 3, (-bounds,) * 3, (bounds,) * 3,
                                 mode=mode, feature_dim=6, alpha_init=alpha_init,
                                 rng=rng, dtype=dtype)
    field.density.values[...] = rng.normal(0.5, 1.0, field.density.values.shape)
    field.color.values[...] = rng.normal(0.0, 1.0, field.color.values.shape)
    return field


def inward_rays(rng, n, radius=3.0, t_far=8.0):
    phi = rng.uniform(0, 2 * np.pi, n)
    costh = rng.uniform(-1, 1, n)
    sinth = np.sqrt(1 - costh ** 2)
    origins = radius * np.stack([sinth * np.cos(phi), sinth * np.sin(phi),
                                 costh], axis=1)
    jitter = rng.uniform(-0.4, 0.4, (n, 3))
    dirs = jitter - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return RayBatch(origins, dirs, 0.05, t_far)


class TestComposite:
    def test_vacuum_returns_background(self):
        n = 10
        out = composite(np.zeros(n), np.full((n, 3), 0.5), np.full(n, 0.1),
                        BG, np.linspace(1, 2, n))
        np.testing.assert_allclose(out.color, BG, atol=1e-15)
        np.testing.assert_allclose(out.weights, 0.0, atol=1e-15)
        assert out.final_transmittance == pytest.approx(1.0)
        assert out.depth == pytest.approx(0.0)

    def test_opaque_single_sample(self):
        c = np.array([[0.2, 0.4, 0.8]])
        out = composite([1000.0], c, [0.1], BG, [2.0])
        np.testing.assert_allclose(out.color, c[0], atol=1e-9)
        assert out.weights[0] == pytest.approx(1.0, abs=1e-9)
        assert out.depth == pytest.approx(2.0, abs=1e-9)

    def test_homogeneous_medium_analytic(self):
        # sigma = 2 over unit length: T = exp(-2) of the background shows.
        # The per-step opacities telescope, so constant color is reproduced
        # down to roundoff at any step size.
        c = np.array([0.9, 0.1, 0.5])
        expected = c * (1 - np.exp(-2.0)) + BG * np.exp(-2.0)
        for n in (64, 128, 256, 512):
            delta = np.full(n, 1.0 / n)
            t = (np.arange(n) + 0.5) / n
            out = composite(np.full(n, 2.0), np.tile(c, (n, 1)), delta, BG, t)
            assert np.abs(out.color - expected).max() < 1e-12

    def test_homogeneous_medium_quadrature_converges(self):
        # With color varying along the ray the midpoint quadrature has real
        # discretization error, which must shrink under step halving.
        sigma = 2.0
        c0, c1 = np.array([0.9, 0.1, 0.5]), np.array([0.2, 0.8, 0.4])
        e = np.exp(-sigma)
        expected = c0 * (1 - e) + (c1 - c0) * (1 - (1 + sigma) * e) / sigma \
            + BG * e
        errs = []
        for n in (64, 128, 256, 512):
            t = (np.arange(n) + 0.5) / n
            color = c0 + t[:, None] * (c1 - c0)
            out = composite(np.full(n, sigma), color, np.full(n, 1.0 / n),
                            BG, t)
            errs.append(np.abs(out.color - expected).max())
        assert errs[0] < 1e-3
        assert errs[0] > errs[1] > errs[2] > errs[3]

    def test_weights_partition_with_final_transmittance(self, rng):
        n = 30
        sigma = rng.uniform(0.0, 5.0, n)
        out = composite(sigma, rng.uniform(0, 1, (n, 3)), np.full(n, 0.05),
                        BG, np.linspace(0, 1, n))
        assert np.all(out.weights >= 0)
        total = out.weights.sum() + out.final_transmittance
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_depth_modes(self):
        # Opaque wall starting at t = 2.
        t = np.linspace(0.05, 4.0, 80)
        sigma = np.where(t > 2.0, 500.0, 0.0)
        delta = np.full(80, t[1] - t[0])
        col = np.full((80, 3), 0.5)
        out = composite(sigma, col, delta, BG, t)
        assert out.depth == pytest.approx(2.0, abs=2 * delta[0])
        out_acc = composite(sigma, col, delta, BG, t, depth_mode="accumulated")
        assert out_acc.depth == pytest.approx(out_acc.weights.sum(), abs=1e-15)
        assert out_acc.depth == pytest.approx(1.0, abs=1e-9)

    def test_rejects_invalid_inputs(self):
        with pytest.raises(InvalidParameterError):
            composite([-1.0], [[0, 0, 0]], [0.1], BG, [1.0])
        with pytest.raises(InvalidParameterError):
            composite([1.0], [[0, 0, 0]], [0.0], BG, [1.0])
        with pytest.raises(InvalidParameterError):
            composite([1.0, 2.0], [[0, 0, 0]], [0.1], BG, [1.0])


class TestSamplePoints:
    def test_axis_aligned_hit(self):
        t, pos, delta = sample_points(
            np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]),
            0.0, 10.0, (0, 0, 0), (1, 1, 1), 0.25)
        np.testing.assert_allclose(t, [1.125, 1.375, 1.625, 1.875])
        np.testing.assert_allclose(delta, 0.25)
        assert np.all((pos >= 0) & (pos <= 1))

    def test_miss_yields_no_samples(self):
        t, pos, delta = sample_points(
            np.array([-1.0, 5.0, 0.5]), np.array([1.0, 0.0, 0.0]),
            0.0, 10.0, (0, 0, 0), (1, 1, 1), 0.25)
        assert len(t) == len(pos) == len(delta) == 0

    def test_samples_stay_inside_box(self, rng):
        rays = inward_rays(rng, 200)
        t, mask = sample_points_batch(rays, (-1, -1, -1), (1, 1, 1), 0.07)
        pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
        inside = np.all((pos >= -1 - 1e-9) & (pos <= 1 + 1e-9), axis=2)
        assert np.all(inside[mask])
        assert mask.any()

    def test_near_far_clip(self):
        rays = RayBatch([[-5.0, 0.5, 0.5]], [[1.0, 0.0, 0.0]], 0.0, 5.4)
        t, mask = sample_points_batch(rays, (0, 0, 0), (1, 1, 1), 0.1)
        # t_out is clipped to t_far = 5.4 -> span [5, 5.4], 4 samples.
        assert mask.sum() == 4
        assert t[mask].max() < 5.4

    def test_rejects_nonpositive_step(self):
        rays = RayBatch([[0.0, 0.0, -3.0]], [[0.0, 0.0, 1.0]], 0.0, 10.0)
        with pytest.raises(InvalidParameterError):
            sample_points_batch(rays, (-1, -1, -1), (1, 1, 1), 0.0)


class TestRayBoxIntersection:
    def test_crossing_and_missing(self):
        o = np.array([[-2.0, 0.5, 0.5], [-2.0, 5.0, 0.5]])
        d = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        t_in, t_out = ray_box_intersection(o, d, np.zeros(3), np.ones(3))
        assert (t_in[0], t_out[0]) == (2.0, 3.0)
        assert t_in[1] > t_out[1]

    def test_origin_on_slab_plane(self):
        # Degenerate 0 * inf products must not poison the interval.
        o = np.array([[0.0, 0.5, 0.5]])
        d = np.array([[1.0, 0.0, 0.0]])
        t_in, t_out = ray_box_intersection(o, d, np.zeros(3), np.ones(3))
        assert t_in[0] <= 0.0 and t_out[0] == 1.0


class TestQueryField:
    def test_zero_raw_color_is_mid_gray(self, rng):
        field = RadianceField.create((8,) * 3, (-1,) * 3, (1,) * 3)
        sigma, color = query_field(field, rng.uniform(-1, 1, (20, 3)))
        np.testing.assert_allclose(color, 0.5, atol=1e-12)
        np.testing.assert_allclose(sigma, field.activation(0.0), atol=1e-12)

    def test_matches_manual_composition(self, rng):
        field = random_field(rng, res=6)
        pts = rng.uniform(-1, 1, (40, 3))
        sigma, color = query_field(field, pts)
        from voxelrf.grids import trilinear_sample
        raw_d = trilinear_sample(field.density, pts)[:, 0]
        raw_c = trilinear_sample(field.color, pts)
        np.testing.assert_allclose(sigma, field.activation(raw_d), atol=1e-12)
        np.testing.assert_allclose(color, 1 / (1 + np.exp(-raw_c)), atol=1e-12)

    def test_feature_mode_needs_view_dirs(self, rng):
        field = random_field(rng, res=6, mode="feature")
        with pytest.raises(ConfigurationError):
            query_field(field, np.zeros((2, 3)))

    def test_feature_mode_varies_with_view_direction(self, rng):
        field = random_field(rng, res=6, mode="feature")
        pts = np.zeros((1, 3))
        _, c1 = query_field(field, pts, view_dirs=np.array([[0.0, 0.0, -1.0]]))
        _, c2 = query_field(field, pts, view_dirs=np.array([[1.0, 0.0, 0.0]]))
        assert not np.allclose(c1, c2)


class TestRenderRays:
    def test_empty_field_renders_background(self, rng):
        field = RadianceField.create((8,) * 3, (-1,) * 3, (1,) * 3,
                                     dtype=np.float64)
        field.density.values[...] = -40.0
        rays = inward_rays(rng, 30)
        out = render_rays(field, rays, RenderConfig(background=BG))
        np.testing.assert_allclose(out.color - BG, 0.0, atol=1e-12)
        np.testing.assert_allclose(out.final_transmittance, 1.0, atol=1e-12)

    def test_opaque_slab_color_and_depth(self):
        field = RadianceField.create((32,) * 3, (-1,) * 3, (1,) * 3,
                                     dtype=np.float64)
        zc = np.linspace(-1, 1, 32)
        slab = np.abs(zc) < 0.3
        field.density.values[0, :, :, slab] = 25.0
        field.color.values[...] = logit(0.8)
        cam_pose = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0))
        cam = Camera(9, 9, 9.0, 9.0, 4.5, 4.5, cam_pose, near=0.5, far=6.0)
        cfg = RenderConfig(background=BG)
        color, depth = render_image(field, cam, cfg)
        np.testing.assert_allclose(color[4, 4], 0.8, atol=2e-2)
        # Slab front face at z = +0.3, camera at z = 3 -> depth about 2.7
        # plus a small penetration of the order of 1 / sigma.
        assert depth[4, 4] == pytest.approx(2.7, abs=0.15)

    def test_sharding_and_threads_do_not_change_output(self, rng):
        field = random_field(rng, res=10)
        rays = inward_rays(rng, 97)
        base = render_rays(field, rays,
                           RenderConfig(background=BG, shard_size=13, workers=1))
        # Same shard partition, more workers: bitwise identical by contract.
        threaded = render_rays(field, rays,
                               RenderConfig(background=BG, shard_size=13,
                                            workers=4))
        np.testing.assert_array_equal(base.color, threaded.color)
        np.testing.assert_array_equal(base.depth, threaded.depth)
        # A different partition may reassociate sums; only roundoff may move.
        other = render_rays(field, rays,
                            RenderConfig(background=BG, shard_size=97,
                                         workers=1))
        np.testing.assert_allclose(base.color, other.color, atol=1e-12)
        np.testing.assert_allclose(base.depth, other.depth, atol=1e-12)

    def test_repeat_render_is_bitwise_identical(self, rng):
        field = random_field(rng, res=10)
        rays = inward_rays(rng, 50)
        cfg = RenderConfig(background=BG, workers=1)
        a = render_rays(field, rays, cfg)
        b = render_rays(field, rays, cfg)
        np.testing.assert_array_equal(a.color, b.color)
        np.testing.assert_array_equal(a.depth, b.depth)

    def test_backward_rejects_bad_upstream_shape(self, rng):
        field = random_field(rng, res=8)
        rays = inward_rays(rng, 10)
        _, cache = render_rays(field, rays, RenderConfig(background=BG),
                               want_cache=True)
        with pytest.raises(InvalidParameterError):
            render_backward(field, cache, np.zeros((4, 3)))

    def test_backward_zero_upstream_gives_zero_gradients(self, rng):
        field = random_field(rng, res=8)
        rays = inward_rays(rng, 10)
        _, cache = render_rays(field, rays, RenderConfig(background=BG),
                               want_cache=True)
        grads = render_backward(field, cache, np.zeros((10, 3)))
        assert not grads.d_density.any()
        assert not grads.d_color.any()


class TestDepthPatches:
    def test_patch_matches_full_image_crop(self, rng):
        field = random_field(rng, res=10)
        cam_pose = look_at((0.0, -3.0, 1.0), (0.0, 0.0, 0.0))
        cam = Camera(16, 16, 12.0, 12.0, 8.0, 8.0, cam_pose, near=0.5, far=7.0)
        cfg = RenderConfig(background=BG, workers=1)
        _, depth = render_image(field, cam, cfg)
        patch = render_depth_patch(field, cam, (8, 8), 4, cfg)
        np.testing.assert_allclose(patch, depth[6:10, 6:10], atol=1e-12)

    def test_patch_must_fit_in_image(self, rng):
        cam = Camera(8, 8, 4.0, 4.0, 4.0, 4.0,
                     np.hstack([np.eye(3), np.zeros((3, 1))]))
        with pytest.raises(InvalidParameterError):
            patch_pixels(cam, (0, 0), 8)

    def test_patch_pixel_layout(self):
        cam = Camera(8, 8, 4.0, 4.0, 4.0, 4.0,
                     np.hstack([np.eye(3), np.zeros((3, 1))]))
        px = patch_pixels(cam, (4, 4), 2)
        np.testing.assert_array_equal(px, [[3, 3], [4, 3], [3, 4], [4, 4]])


class TestRenderConfig:
    def test_default_step_is_half_voxel(self, rng):
        field = random_field(rng, res=11)
        cfg = RenderConfig()
        assert cfg.resolved_step(field) == pytest.approx(
            0.5 * field.density.voxel_size)

    def test_rejects_unknown_depth_mode(self):
        with pytest.raises(ConfigurationError):
            RenderConfig(depth_mode="median")
