"""Differentiable splatting of isotropic Gaussians through a pinhole camera.

Projection and its chain rule live here in NumPy; per-pixel compositing is
delegated to a kernel backend. The compiled ``_raster`` extension is used
when it was built, otherwise the NumPy ``_raster_py`` kernel. Set
``MV4D_RASTER=numpy`` to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..core import Camera
from . import _raster_py

BACKGROUND = 0.5
NEAR = 0.05

_BACKENDS = {"numpy": _raster_py}
try:  # pragma: no cover - depends on the build
    from . import _raster as _compiled
    _BACKENDS["cython"] = _compiled
except ImportError:  # pragma: no cover
    _compiled = None

DEFAULT_BACKEND = ("cython" if "cython" in _BACKENDS and os.environ.get("MV4D_RASTER") != "numpy"
                   else "numpy")


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def kernel(name: str | None = None):
    name = name or DEFAULT_BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"raster backend {name!r} not available; have {available_backends()}")
    return _BACKENDS[name]


@dataclass
class RasterContext:
    """Everything the backward pass needs from a forward call."""

    camera: Camera
    order: np.ndarray      # indices of visible Gaussians, front to back
    pc: np.ndarray         # camera-space positions of visible Gaussians
    uv: np.ndarray
    sig: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    n: int
    background: np.ndarray
    alpha_min: float
    backend: str


@dataclass
class RasterGrads:
    positions: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    screen: np.ndarray  # (N, 2) gradient w.r.t. NDC-scaled screen centre, for densification


def _bg(background) -> np.ndarray:
    return np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()


def rasterize(positions, scales, opacities, colors, camera: Camera, *, background=BACKGROUND,
              alpha_min: float = 0.0, near: float = NEAR, backend: str | None = None):
    """Render Gaussians; returns (image (H, W, 3), context for :func:`rasterize_backward`).

    ``scales`` are world-space standard deviations and ``opacities`` lie in
    [0, 1]. Gaussians with camera depth <= ``near`` are culled. ``alpha_min``
    skips contributions below that alpha (0 composites everything exactly).
    """
    mu = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(scales, dtype=np.float64).reshape(-1)
    op = np.asarray(opacities, dtype=np.float64).reshape(-1)
    col = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = mu.shape[0]
    if not (s.shape[0] == op.shape[0] == col.shape[0] == n):
        raise ValueError("positions, scales, opacities and colors must have equal length")
    name = backend or DEFAULT_BACKEND
    k = kernel(name)
    bg = _bg(background)
    pc = (mu - camera.center) @ camera.rotation
    vis = np.nonzero(pc[:, 2] > near)[0]
    order = vis[np.argsort(pc[vis, 2], kind="stable")]
    pcv = pc[order]
    z = pcv[:, 2]
    uv = np.stack([camera.fx * pcv[:, 0] / z + camera.cx, camera.fy * pcv[:, 1] / z + camera.cy], 1)
    sig = s[order] * camera.focal / z
    img, _ = k.forward(uv[:, 0].copy(), uv[:, 1].copy(), sig, op[order].copy(),
                       np.ascontiguousarray(col[order]), camera.height, camera.width, bg, alpha_min)
    ctx = RasterContext(camera, order, pcv, uv, sig, s, op, col, n, bg, alpha_min, name)
    return img, ctx


def rasterize_backward(ctx: RasterContext, grad_image) -> RasterGrads:
    """Exact gradients of sum(grad_image * image) for the call that produced ``ctx``."""
    cam = ctx.camera
    g = np.asarray(grad_image, dtype=np.float64).reshape(cam.height, cam.width, 3)
    o = ctx.order
    k = kernel(ctx.backend)
    du, dv, dsig, dop, dcol = k.backward(
        ctx.uv[:, 0].copy(), ctx.uv[:, 1].copy(), ctx.sig, ctx.opacities[o].copy(),
        np.ascontiguousarray(ctx.colors[o]), cam.height, cam.width, ctx.background, g,
        ctx.alpha_min)
    x, y, z = ctx.pc.T
    f = cam.focal
    dpc = np.stack([du * cam.fx / z,
                    dv * cam.fy / z,
                    -du * cam.fx * x / z ** 2 - dv * cam.fy * y / z ** 2
                    - dsig * ctx.scales[o] * f / z ** 2], axis=1)
    grads = RasterGrads(np.zeros((ctx.n, 3)), np.zeros(ctx.n), np.zeros(ctx.n),
                        np.zeros((ctx.n, 3)), np.zeros((ctx.n, 2)))
    grads.positions[o] = dpc @ cam.rotation.T
    grads.scales[o] = dsig * f / z
    grads.opacities[o] = dop
    grads.colors[o] = dcol
    # NDC spans 2 units across the image, so d/d(ndc) = d/d(pixel) * size / 2
    grads.screen[o] = np.stack([du * cam.width / 2, dv * cam.height / 2], axis=1)
    return grads
