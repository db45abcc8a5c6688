"""Finite-difference checks of the hand-derived rendering backward pass.

The acceptance suite sweeps every parameter; these tests spot-check random
subsets so they stay fast enough for the inner development loop.
"""

import numpy as np

from voxelrf.cameras import RayBatch
from voxelrf.losses import photometric_loss
from voxelrf.rendering import (RadianceField, RenderConfig, render_backward,
                               render_rays)

BG = np.array([0.4, 0.5, 0.6])


def make_field(rng, mode):
    field = RadianceField.create((6,) * 3, (-1,) * 3, (1,) * 3, mode=mode,
                                 feature_dim=4, alpha_init=1e-2, rng=rng,
                                 dtype=np.float64)
    field.density.values[...] = rng.normal(1.0, 1.0, field.density.values.shape)
    field.color.values[...] = rng.normal(0.0, 1.0, field.color.values.shape)
    return field


def make_rays(rng, n=12):
    origins = rng.uniform(-0.5, 0.5, (n, 3))
    origins += np.sign(origins) * 2.0
    dirs = rng.uniform(-0.6, 0.6, (n, 3)) - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return RayBatch(origins, dirs, 0.05, 8.0)


def objective(field, rays, cfg, target, depth_coeffs=None):
    """Photometric MSE plus an optional linear-in-depth probe term."""
    out, cache = render_rays(field, rays, cfg, want_cache=True)
    loss, d_color = photometric_loss(out.color, target)
    d_depth = None
    if depth_coeffs is not None:
        loss += float((depth_coeffs * out.depth).sum())
        d_depth = depth_coeffs
    return loss, cache, d_color, d_depth


def check_subset(rng, arrays, loss_fn, grads_of, n_checks=25, h=1e-5,
                 rtol=2e-4, atol=1e-10):
    for values, analytic in zip(arrays, grads_of):
        flat = values.reshape(-1)
        ana = analytic.reshape(-1)
        for idx in rng.choice(flat.size, size=min(n_checks, flat.size),
                              replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = loss_fn()
            flat[idx] = old - h
            down = loss_fn()
            flat[idx] = old
            fd = (up - down) / (2 * h)
            err = abs(fd - ana[idx])
            assert err <= atol + rtol * max(abs(fd), abs(ana[idx])), \
                f"fd {fd} vs analytic {ana[idx]}"


class TestRenderBackward:
    def run_mode(self, rng, mode, with_depth, depth_mode="expected"):
        cfg = RenderConfig(background=BG, workers=1, depth_mode=depth_mode)
        field = make_field(rng, mode)
        rays = make_rays(rng)
        target = rng.uniform(0, 1, (len(rays), 3))
        depth_coeffs = rng.normal(size=len(rays)) if with_depth else None

        _, cache, d_color, d_depth = objective(field, rays, cfg, target,
                                               depth_coeffs)
        grads = render_backward(field, cache, d_color, d_depth)

        def loss_fn():
            return objective(field, rays, cfg, target, depth_coeffs)[0]

        arrays = [field.density.values, field.color.values]
        analytic = [grads.d_density, grads.d_color]
        if mode == "feature":
            for k in sorted(field.net.params):
                arrays.append(field.net.params[k])
                analytic.append(grads.d_net[k])
        check_subset(rng, arrays, loss_fn, analytic)

    def test_rgb_color_gradients(self, rng):
        self.run_mode(rng, "rgb", with_depth=False)

    def test_rgb_with_depth_term(self, rng):
        self.run_mode(rng, "rgb", with_depth=True)

    def test_feature_mode_gradients(self, rng):
        self.run_mode(rng, "feature", with_depth=False)

    def test_feature_mode_with_depth_term(self, rng):
        self.run_mode(rng, "feature", with_depth=True)

    def test_accumulated_depth_mode_gradients(self, rng):
        self.run_mode(rng, "rgb", with_depth=True, depth_mode="accumulated")
