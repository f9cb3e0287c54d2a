"""Two-phase fitting of a deformable Gaussian model to posed, timed views.

Phase 1 fits only the canonical cloud to the t=0 views. Phase 2 fits the
cloud and the deformation field jointly on every view, while the loss
weight of generated views is annealed linearly. Densification and pruning
run at a fixed interval across both phases.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field as dc_field
from typing import Sequence

import numpy as np

from ..core import Camera, View
from .deform import DeformationField
from .loss import W_DSSIM, W_L1, photometric_loss
from .model import GaussianCloud, render_model
from .rasterize import BACKGROUND, rasterize, rasterize_backward

log = logging.getLogger(__name__)

T0_TOL = 1e-9


@dataclass
class ReconConfig:
    w_l1: float = W_L1
    w_dssim: float = W_DSSIM
    densify_grad_threshold: float = 0.0004
    batch_size: int = 4
    phase1_iters: int = 500
    phase2_iters: int = 2500
    gen_multiplier_start: float = 1.0
    gen_multiplier_end: float = 0.5
    input_multiplier: float = 1.0
    # learning rates; positions are scaled by the scene extent and decay
    # exponentially to lr_position_final over the whole run
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_field: float = 1e-3
    densify_interval: int = 100
    densify_until: float = 0.8   # fraction of all iterations after which the cloud is frozen
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    percent_dense: float = 0.01  # clone below this fraction of the extent, split above
    max_gaussians: int = 2500
    n_init: int = 2000
    init_opacity: float = 0.1
    plane_resolution: int = 32
    plane_features: int = 8
    alpha_min: float = 1.0 / 255.0
    background: float = BACKGROUND
    backend: str | None = None

    def __post_init__(self):
        for name in ("w_l1", "w_dssim", "gen_multiplier_start", "gen_multiplier_end",
                     "input_multiplier", "lr_position", "lr_position_final", "lr_color",
                     "lr_opacity", "lr_scale", "lr_field", "alpha_min"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("densify_grad_threshold", "prune_opacity", "split_factor", "percent_dense"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch_size < 1 or self.densify_interval < 1 or self.n_init < 1:
            raise ValueError("batch_size, densify_interval and n_init must be >= 1")
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ValueError("iteration counts must be >= 0")

    @property
    def total_iters(self) -> int:
        return self.phase1_iters + self.phase2_iters

    def gen_multiplier(self, phase2_step: int | None) -> float:
        """Loss multiplier of generated views; ``None`` means phase 1."""
        if phase2_step is None or self.phase2_iters == 0:
            return self.gen_multiplier_start
        frac = min(max(phase2_step / self.phase2_iters, 0.0), 1.0)
        return self.gen_multiplier_start + (self.gen_multiplier_end - self.gen_multiplier_start) * frac

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam over named arrays with per-name learning rates; rows can be remapped."""

    def __init__(self, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
                self.t[k] = 0
            self.t[k] += 1
            c1 = 1 - self.b1 ** self.t[k]
            c2 = 1 - self.b2 ** self.t[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap(self, names, origin: np.ndarray) -> None:
        """Reorder moment rows; rows with origin -1 start from zero."""
        fresh = origin < 0
        src = np.where(fresh, 0, origin)
        for k in names:
            for store in (self.m, self.v):
                if k in store:
                    a = store[k][src]
                    a[fresh] = 0.0
                    store[k] = a


@dataclass
class ReconResult:
    cloud: GaussianCloud
    field: DeformationField
    curve: list = dc_field(default_factory=list)
    bounds: tuple = ()


def estimate_bounds(cameras: Sequence[Camera], frac: float = 0.35):
    """Box around the point closest to every optical axis."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for c in cameras:
        d = c.forward / np.linalg.norm(c.forward)
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ c.center
    if np.linalg.matrix_rank(a, tol=1e-6) < 3:
        # axes (nearly) parallel: look a fixed distance down the mean axis
        fwd = np.mean([c.forward for c in cameras], axis=0)
        target = np.mean([c.center for c in cameras], axis=0) + 3.0 * fwd / np.linalg.norm(fwd)
    else:
        target = np.linalg.solve(a, b)
    half = frac * float(np.median([np.linalg.norm(c.center - target) for c in cameras]))
    return tuple((target - half).tolist()), tuple((target + half).tolist())


def densify_prune(cloud: GaussianCloud, grad_accum: np.ndarray, denom: np.ndarray,
                  cfg: ReconConfig, extent: float, rng: np.random.Generator):
    """Clone small / split large high-gradient Gaussians, then drop faint ones.

    Returns (new cloud, origin) where ``origin[i]`` is the old index of new
    row ``i`` or -1 for a freshly created Gaussian.
    """
    n = len(cloud)
    mean_grad = np.where(denom > 0, grad_accum / np.maximum(denom, 1), 0.0)
    hot = np.nonzero(mean_grad > cfg.densify_grad_threshold)[0]
    room = max(cfg.max_gaussians - n, 0)
    if hot.size > room:
        hot = hot[np.argsort(-mean_grad[hot], kind="stable")[:room]]
        hot.sort()
    scales = cloud.scales
    small = scales[hot] <= cfg.percent_dense * extent
    clone, split = hot[small], hot[~small]
    parts = [cloud.params()]
    origin = [np.arange(n)]
    if clone.size:
        parts.append(cloud.subset(clone).params())
        origin.append(np.full(clone.size, -1))
    if split.size:
        child = cloud.subset(np.repeat(split, 2))
        child.positions = child.positions + rng.normal(size=child.positions.shape) * \
            np.repeat(scales[split], 2)[:, None]
        child.log_scales = child.log_scales - np.log(cfg.split_factor)
        parts.append(child.params())
        origin.append(np.full(2 * split.size, -1))
    merged = GaussianCloud(*(np.concatenate([p[k] for p in parts]) for k in parts[0]))
    origin = np.concatenate(origin)
    keep = np.ones(len(merged), dtype=bool)
    keep[split] = False
    keep &= merged.opacities >= cfg.prune_opacity
    return merged.subset(keep), origin[keep]


def _check_views(views: Sequence[View]):
    if not views:
        raise ValueError("empty dataset")
    t0 = [v for v in views if abs(v.time) <= T0_TOL]
    if not t0:
        raise ValueError("phase 1 needs at least one view at t=0")
    return t0


def optimize(views: Sequence[View], cfg: ReconConfig | None = None, seed: int = 0, *,
             bounds=None, init: GaussianCloud | None = None, log_every: int = 250) -> ReconResult:
    cfg = cfg or ReconConfig()
    views = list(views)
    t0_views = _check_views(views)
    if bounds is None:
        bounds = estimate_bounds([v.camera for v in views])
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    extent = 0.5 * float(np.linalg.norm(hi - lo))
    rng = np.random.default_rng(seed)
    cloud = init.copy() if init is not None else GaussianCloud.random(
        cfg.n_init, (lo, hi), rng, opacity=cfg.init_opacity)
    field = DeformationField((lo, hi), cfg.plane_resolution, cfg.plane_features, seed=seed)
    opt = Adam({"positions": cfg.lr_position * extent, "log_scales": cfg.lr_scale,
                "opacity_logits": cfg.lr_opacity, "colors": cfg.lr_color,
                "planes": cfg.lr_field, "head_w": cfg.lr_field, "head_b": cfg.lr_field})
    cloud_names = ("positions", "log_scales", "opacity_logits", "colors")
    total = cfg.total_iters
    grad_accum = np.zeros(len(cloud))
    denom = np.zeros(len(cloud))
    curve = []
    ema = None
    for it in range(total):
        phase2 = it >= cfg.phase1_iters
        p2_step = it - cfg.phase1_iters if phase2 else None
        if total > 1 and cfg.lr_position > 0:
            frac = it / (total - 1)
            final = max(cfg.lr_position_final, 1e-300)
            opt.lrs["positions"] = extent * np.exp(
                (1 - frac) * np.log(cfg.lr_position) + frac * np.log(final))
        pool = views if phase2 else t0_views
        batch = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
        gen_mult = cfg.gen_multiplier(p2_step)
        scales, ops = cloud.scales, cloud.opacities
        g_cloud = {k: np.zeros_like(v) for k, v in cloud.params().items()}
        g_field = {k: np.zeros_like(v) for k, v in field.params.items()}
        batch_loss = 0.0
        nb = len(batch)
        for bi in batch:
            view = pool[bi]
            mult = cfg.input_multiplier if view.source == "input" else gen_mult
            if phase2:
                offs, cache = field.forward(cloud.positions, view.time)
                pos = cloud.positions + offs
            else:
                pos = cloud.positions
            img, ctx = rasterize(pos, scales, ops, cloud.colors, view.camera,
                                 background=cfg.background, alpha_min=cfg.alpha_min,
                                 backend=cfg.backend)
            loss, gimg = photometric_loss(img, view.image, mult, w_l1=cfg.w_l1,
                                          w_dssim=cfg.w_dssim)
            batch_loss += loss / nb
            rg = rasterize_backward(ctx, gimg / nb)
            g_cloud["positions"] += rg.positions
            g_cloud["log_scales"] += rg.scales * scales
            g_cloud["opacity_logits"] += rg.opacities * ops * (1 - ops)
            g_cloud["colors"] += rg.colors
            if phase2:
                fg, dpos = field.backward(cache, rg.positions)
                g_cloud["positions"] += dpos
                for k in g_field:
                    g_field[k] += fg[k]
            # densification statistics use each view's own (un-batched) gradient
            vis = ctx.order
            grad_accum[vis] += np.linalg.norm(rg.screen[vis], axis=1) * nb
            denom[vis] += 1
        params = cloud.params()
        opt.step(params, g_cloud)
        if phase2:
            opt.step(field.params, g_field)
        params["colors"] = np.clip(params["colors"], 0.0, 1.0)
        cloud = GaussianCloud(**params)
        ema = batch_loss if ema is None else 0.95 * ema + 0.05 * batch_loss
        curve.append({"iteration": it, "phase": 2 if phase2 else 1, "loss": batch_loss,
                      "ema_loss": ema, "gaussians": len(cloud), "gen_multiplier": gen_mult})
        if (it + 1) % cfg.densify_interval == 0 and it + 1 < cfg.densify_until * total:
            cloud, origin = densify_prune(cloud, grad_accum, denom, cfg, extent, rng)
            opt.remap(cloud_names, origin)
            grad_accum = np.zeros(len(cloud))
            denom = np.zeros(len(cloud))
        if log_every and (it + 1) % log_every == 0:
            log.info("iter %d/%d phase %d loss %.5f gaussians %d", it + 1, total,
                     2 if phase2 else 1, ema, len(cloud))
    return ReconResult(cloud, field, curve, (tuple(lo.tolist()), tuple(hi.tolist())))


def write_curve(path, curve: Sequence[dict]) -> None:
    if not curve:
        raise ValueError("empty training curve")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(curve[0]))
        w.writeheader()
        w.writerows(curve)


def fit_static_proxy(images, cameras: Sequence[Camera], iters: int = 150, seed: int = 0,
                     cfg: ReconConfig | None = None) -> np.ndarray:
    """Fit one static cloud to every image of a column; returns its re-renders."""
    base = cfg or ReconConfig(n_init=800, max_gaussians=3000)
    pcfg = ReconConfig(**{**base.to_dict(), "phase1_iters": iters, "phase2_iters": 0,
                          "densify_interval": max(iters // 4, 1)})
    views = [View(np.clip(np.asarray(im, dtype=np.float64), 0, 1), c, 0.0, "generated")
             for im, c in zip(images, cameras)]
    res = optimize(views, pcfg, seed, log_every=0)
    return np.stack([np.clip(render_model(res.cloud, None, c, 0.0, background=pcfg.background,
                                          alpha_min=pcfg.alpha_min, backend=pcfg.backend), 0, 1)
                     for c in cameras])
