import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import raster_camera, raster_fd_errors, random_splats, render_oracle
from mv4d.core import Camera
from mv4d.recon.rasterize import (BACKGROUND, DEFAULT_BACKEND, available_backends, kernel,
                                  rasterize, rasterize_backward)

BACKENDS = available_backends()


def test_backends_present():
    assert "numpy" in BACKENDS
    assert DEFAULT_BACKEND in BACKENDS
    with pytest.raises(ValueError):
        kernel("fortran")


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_scene_is_background(backend):
    cam = raster_camera()
    img, ctx = rasterize(np.zeros((0, 3)), [], [], np.zeros((0, 3)), cam, backend=backend)
    assert np.all(img == BACKGROUND)
    g = rasterize_backward(ctx, np.ones(img.shape))
    assert g.positions.shape == (0, 3)


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_gaussian_symmetric(backend):
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], width=33, height=33, cx=16, cy=16, fx=30)
    img, _ = rasterize([[0, 0, 0]], [0.3], [0.99], [[1, 1, 1]], cam, backend=backend)
    lum = img[..., 0]
    assert np.unravel_index(np.argmax(lum), lum.shape) == (16, 16)
    assert np.allclose(lum, lum[::-1], atol=1e-14)
    assert np.allclose(lum, lum[:, ::-1], atol=1e-14)
    assert np.allclose(lum, lum.T, atol=1e-14)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_loop_oracle(backend, seed):
    rng = np.random.default_rng(seed)
    cam = raster_camera()
    sp = random_splats(rng, n_max=8)
    img, _ = rasterize(*(sp[k] for k in ("positions", "scales", "opacities", "colors")), cam,
                       backend=backend)
    assert np.allclose(img, render_oracle(sp, cam), rtol=0, atol=1e-12)


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    rng = np.random.default_rng(5)
    cam = Camera.look_at([0, 0.4, -3], [0, 0, 0], width=40, height=36, fx=40)
    n = 300
    args = (rng.uniform(-0.8, 0.8, (n, 3)), rng.uniform(0.02, 0.2, n), rng.uniform(0.01, 0.9, n),
            rng.uniform(0, 1, (n, 3)))
    g_img = rng.normal(size=(36, 40, 3))
    for amin in (0.0, 1 / 255):
        out = []
        for be in ("numpy", "cython"):
            img, ctx = rasterize(*args, cam, backend=be, alpha_min=amin)
            out.append((img, rasterize_backward(ctx, g_img)))
        (a, ga), (b, gb) = out
        assert np.allclose(a, b, rtol=0, atol=1e-13)
        for name in ("positions", "scales", "opacities", "colors", "screen"):
            assert np.allclose(getattr(ga, name), getattr(gb, name), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(3))
def test_gradients_finite_difference(backend, seed):
    rng = np.random.default_rng(100 + seed)
    cam = raster_camera()
    sp = random_splats(rng, n_max=6)
    errs = raster_fd_errors(sp, cam, rng.normal(size=(cam.height, cam.width, 3)), backend)
    assert max(errs.values()) <= 1e-3, errs


def test_truncation_is_small_and_skips_faint():
    rng = np.random.default_rng(2)
    cam = raster_camera()
    sp = random_splats(rng)
    args = [sp[k] for k in ("positions", "scales", "opacities", "colors")]
    exact, _ = rasterize(*args, cam)
    trunc, _ = rasterize(*args, cam, alpha_min=1 / 255)
    assert np.abs(exact - trunc).max() < 0.05
    faint = [a.copy() for a in args]
    faint[2] = np.full_like(faint[2], 1e-3)
    img, _ = rasterize(*faint, cam, alpha_min=1 / 255)
    assert np.all(img == BACKGROUND)


def test_behind_camera_culled():
    cam = raster_camera()
    behind = cam.center - 2 * cam.forward
    img, ctx = rasterize([behind], [0.5], [0.9], [[1, 0, 0]], cam)
    assert np.all(img == BACKGROUND) and ctx.order.size == 0
    g = rasterize_backward(ctx, np.ones(img.shape))
    assert np.all(g.positions == 0)


def test_length_mismatch():
    with pytest.raises(ValueError):
        rasterize(np.zeros((2, 3)), [0.1], [0.5, 0.5], np.zeros((2, 3)), raster_camera())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_alpha_conservation(seed):
    # with unit colours and zero background, image = accumulated alpha = 1 - T
    rng = np.random.default_rng(seed)
    cam = raster_camera()
    sp = random_splats(rng, min_gap=0.0)
    n = len(sp["scales"])
    white, _ = rasterize(sp["positions"], sp["scales"], sp["opacities"], np.ones((n, 3)), cam,
                         background=0.0)
    black, _ = rasterize(sp["positions"], sp["scales"], sp["opacities"], np.zeros((n, 3)), cam,
                         background=1.0)
    assert np.allclose(white + black, 1.0, rtol=0, atol=1e-14)
    assert white.min() >= 0 and white.max() <= 1
