"""Image metrics, grid consistency scores and space-time slices."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.optimize import minimize_scalar

from .core import ViewGrid
from .toyworld import SceneSpec, render

PSNR_IDENTICAL = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return min(PSNR_IDENTICAL, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filt(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    r = len(g) // 2
    y = correlate1d(x, g, axis=0, mode="constant")[r:x.shape[0] - r]
    return correlate1d(y, g, axis=1, mode="constant")[:, r:x.shape[1] - r]


def _filt_adjoint(x: np.ndarray, g: np.ndarray, shape) -> np.ndarray:
    r = len(g) // 2
    pad = np.zeros(shape[:2] + x.shape[2:])
    pad[r:shape[0] - r, r:shape[1] - r] = x
    y = correlate1d(pad, g[::-1], axis=0, mode="constant")
    return correlate1d(y, g[::-1], axis=1, mode="constant")


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0, *, grad: bool = False):
    """Local SSIM over every valid 11x11 window (per channel if 3-D).

    With ``grad=True`` also returns d mean(ssim_map) / d x.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mx, my = _filt(x, g), _filt(y, g)
    sxx = _filt(x * x, g) - mx * mx
    syy = _filt(y * y, g) - my * my
    sxy = _filt(x * y, g) - mx * my
    a1, a2 = 2 * mx * my + c1, 2 * sxy + c2
    b1, b2 = mx * mx + my * my + c1, sxx + syy + c2
    s = (a1 * a2) / (b1 * b2)
    if not grad:
        return s
    n = s.size
    d_mx = (2 * my * a2) / (b1 * b2) - s * 2 * mx / b1
    d_sxx = -s / b2
    d_sxy = 2 * a1 / (b1 * b2)
    # chain through sxx = E[x^2] - mx^2 and sxy = E[xy] - mx*my
    g_mean = (d_mx - 2 * mx * d_sxx - my * d_sxy) / n
    g_xx = d_sxx / n
    g_xy = d_sxy / n
    dx = (_filt_adjoint(g_mean, g, x.shape) + 2 * x * _filt_adjoint(g_xx, g, x.shape)
          + y * _filt_adjoint(g_xy, g, x.shape))
    return s, dx


def ssim(a, b) -> float:
    """Mean SSIM of the channel-averaged (grayscale) images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    return float(ssim_map(a, b).mean())


def spacetime_slice(frames: Sequence[np.ndarray], row: int) -> np.ndarray:
    """Stack pixel row ``row`` of every frame: output (L, W, 3), time downwards."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError("frames must be (L, H, W, C)")
    if not 0 <= row < frames.shape[1]:
        raise IndexError(f"row {row} outside [0, {frames.shape[1]})")
    return frames[:, row].copy()


# ---------------------------------------------------------------- grid consistency

@dataclass
class ConsistencyReport:
    psnr_mean: float | None
    psnr_min: float | None
    temporal_inconsistency: float
    view_inconsistency: float
    fitted_times: list = field(default_factory=list)
    per_seed: list = field(default_factory=list)

    @property
    def combined(self) -> float:
        return self.temporal_inconsistency + self.view_inconsistency

    def to_dict(self) -> dict:
        d = asdict(self)
        d["combined"] = self.combined
        return d


def temporal_inconsistency(grid: ViewGrid, scene: SceneSpec | None = None,
                           supersample: int = 2) -> float:
    """Mean adjacent-frame absolute change per row, restricted to static pixels.

    Static pixels are those whose ground-truth render does not change between
    the two frames; without a scene, the half of the pixels with the smallest
    temporal range along the row.
    """
    vals = []
    for k in range(grid.K):
        row = grid.images[k]
        if scene is not None:
            gt = np.stack([render(scene, grid.cameras[k], float(t), supersample) for t in grid.times])
        else:
            rng = row.max(axis=0) - row.min(axis=0)
            rng = rng.max(axis=-1)
            static = rng <= np.median(rng)
        for j in range(grid.L - 1):
            if scene is not None:
                static = np.all(np.abs(gt[j] - gt[j + 1]) < 1e-9, axis=-1)
            if not static.any():
                continue
            vals.append(np.abs(row[j + 1] - row[j])[static].mean())
    return float(np.mean(vals)) if vals else 0.0


def fit_column_time(images: np.ndarray, cameras, scene: SceneSpec, supersample: int = 2,
                    grid_points: int = 21) -> tuple[float, float]:
    """Single scene time best explaining all cells of a column; returns (time, residual)."""

    def loss(t):
        return float(np.mean([np.mean((im - render(scene, c, float(t), supersample)) ** 2)
                              for im, c in zip(images, cameras)]))

    ts = np.linspace(0, 1, grid_points)
    losses = [loss(t) for t in ts]
    i = int(np.argmin(losses))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, grid_points - 1)]
    res = minimize_scalar(loss, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-4})
    t_best = float(res.x) if res.fun <= losses[i] else float(ts[i])
    resid = float(np.mean([np.mean(np.abs(im - render(scene, c, t_best, supersample)))
                           for im, c in zip(images, cameras)]))
    return t_best, resid


def view_inconsistency(grid: ViewGrid, scene: SceneSpec | None = None, supersample: int = 2,
                       proxy_iters: int = 150, seed: int = 0) -> tuple[float, list]:
    """Mean per-column residual against a single static proxy of that column.

    With a scene the proxy is the scene frozen at the best-fitting time;
    without one it is a static Gaussian model fitted to the column's views.
    """
    if scene is not None:
        fits = [fit_column_time(grid.images[:, j], grid.cameras, scene, supersample)
                for j in range(grid.L)]
        return float(np.mean([r for _, r in fits])), [t for t, _ in fits]
    from .recon.optimize import fit_static_proxy

    resid = []
    for j in range(grid.L):
        renders = fit_static_proxy(grid.images[:, j], grid.cameras, iters=proxy_iters, seed=seed)
        resid.append(float(np.mean(np.abs(renders - grid.images[:, j]))))
    return float(np.mean(resid)), []


def consistency_report(grid: ViewGrid, scene: SceneSpec | None = None, supersample: int = 2,
                       **proxy_kw) -> ConsistencyReport:
    if not grid.complete:
        raise ValueError("consistency report needs a complete grid")
    p_mean = p_min = None
    if scene is not None:
        ps = [psnr(grid.images[k, j], render(scene, grid.cameras[k], float(grid.times[j]),
                                             supersample))
              for k in range(grid.K) for j in range(grid.L)]
        p_mean, p_min = float(np.mean(ps)), float(np.min(ps))
    ti = temporal_inconsistency(grid, scene, supersample)
    vi, fitted = view_inconsistency(grid, scene, supersample, **proxy_kw)
    return ConsistencyReport(p_mean, p_min, ti, vi, fitted)


def aggregate(reports: Sequence[ConsistencyReport]) -> ConsistencyReport:
    """Average several per-seed reports, keeping them as the breakdown."""
    def avg(name):
        vals = [getattr(r, name) for r in reports]
        return None if any(v is None for v in vals) else float(np.mean(vals))

    return ConsistencyReport(avg("psnr_mean"), avg("psnr_min"), avg("temporal_inconsistency"),
                             avg("view_inconsistency"),
                             per_seed=[r.to_dict() for r in reports])
