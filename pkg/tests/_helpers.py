"""Independent oracles shared by the unit and acceptance tests."""

import math

import numpy as np

from mv4d.core import Camera
from mv4d.recon.rasterize import rasterize, rasterize_backward

FD_EPS = 1e-5
GROUPS = ("positions", "scales", "opacities", "colors")


def raster_camera():
    return Camera.look_at((0.0, 0.5, -3.0), (0.0, 0.0, 0.0), width=24, height=20, fx=30.0)


def random_splats(rng, n_max=20, min_gap=1e-3, camera=None):
    """Random small scene whose depths are pairwise at least ``min_gap`` apart.

    A perturbation of +-eps must not reorder the depth sort, otherwise the
    rendered image is not differentiable at that point and a central
    difference straddles a discontinuity.
    """
    cam = camera or raster_camera()
    while True:
        n = int(rng.integers(1, n_max + 1))
        mu = rng.uniform(-0.6, 0.6, (n, 3))
        z = np.sort(cam.to_camera(mu)[:, 2])
        if n == 1 or np.diff(z).min() >= min_gap:
            break
    return {"positions": mu, "scales": rng.uniform(0.08, 0.3, n),
            "opacities": rng.uniform(0.1, 0.95, n), "colors": rng.uniform(0, 1, (n, 3))}


def raster_fd_errors(splats, camera, grad_image, backend, eps=FD_EPS):
    """Max-abs relative error of analytic vs central-difference gradients, per group."""
    def loss(p):
        img, _ = rasterize(p["positions"], p["scales"], p["opacities"], p["colors"], camera,
                           backend=backend)
        return float((img * grad_image).sum())

    _, ctx = rasterize(splats["positions"], splats["scales"], splats["opacities"],
                       splats["colors"], camera, backend=backend)
    g = rasterize_backward(ctx, grad_image)
    errors = {}
    for name in GROUPS:
        arr = splats[name]
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            hi = {**splats, name: arr.copy()}
            lo = {**splats, name: arr.copy()}
            hi[name][idx] += eps
            lo[name][idx] -= eps
            fd[idx] = (loss(hi) - loss(lo)) / (2 * eps)
        ana = getattr(g, name)
        errors[name] = float(np.abs(fd - ana).max() / max(np.abs(fd).max(), 1e-12))
    return errors


def render_oracle(splats, camera, background=0.5):
    """Per-pixel front-to-back compositing with plain Python loops."""
    mu, s, op, col = (splats[k] for k in GROUPS)
    items = []
    for i in range(len(s)):
        x, y, z = camera.to_camera(mu[i])
        if z <= 0.05:
            continue
        u = camera.fx * x / z + camera.cx
        v = camera.fy * y / z + camera.cy
        sig = s[i] * 0.5 * (camera.fx + camera.fy) / z
        items.append((z, u, v, sig, op[i], col[i]))
    items.sort(key=lambda t: t[0])
    img = np.zeros((camera.height, camera.width, 3))
    for py in range(camera.height):
        for px in range(camera.width):
            t = 1.0
            c = [0.0, 0.0, 0.0]
            for _, u, v, sig, o, cl in items:
                a = min(o * math.exp(-((px - u) ** 2 + (py - v) ** 2) / (2 * sig * sig)), 0.99)
                for ch in range(3):
                    c[ch] += t * a * cl[ch]
                t *= 1 - a
            img[py, px] = [c[ch] + t * background for ch in range(3)]
    return img
