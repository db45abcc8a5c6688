"""Shared fixtures: cached toy scenes and finite-difference helpers."""

import numpy as np
import pytest

from voxelrf.datasets import ToySceneSpec, generate_toy_scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_toy_spec(seed=0, **overrides):
    """A cut-down toy scene for fast training/loader tests."""
    base = dict(image_size=24, n_cameras=6, n_test_cameras=3, march_step=0.04)
    base.update(overrides)
    return ToySceneSpec.default(seed=seed, **base)


@pytest.fixture(scope="session")
def small_toy_dataset():
    return generate_toy_scene(small_toy_spec())


@pytest.fixture(scope="session")
def toy_scene_full():
    """The default 16+8 view 64x64 toy scene; generated once per session."""
    spec = ToySceneSpec.default(seed=0)
    return spec, generate_toy_scene(spec)


def central_difference(fn, x, h=1e-6):
    """Scalar central finite difference of fn at x."""
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


def grad_check_array(loss_fn, values, analytic, indices, h=1e-5,
                     rtol=1e-5, atol=1e-9):
    """Compare analytic gradients against central differences at the given
    flat indices of ``values`` (mutated in place and restored)."""
    flat = values.reshape(-1)
    ana = np.asarray(analytic).reshape(-1)
    for idx in indices:
        old = flat[idx]
        flat[idx] = old + h
        up = loss_fn()
        flat[idx] = old - h
        down = loss_fn()
        flat[idx] = old
        fd = (up - down) / (2.0 * h)
        assert abs(fd - ana[idx]) <= atol + rtol * max(abs(fd), abs(ana[idx])), \
            f"index {idx}: fd {fd} vs analytic {ana[idx]}"
