"""Completing a K x L multi-view video grid with a fixed-size denoiser.

A denoiser only produces N views per call, so the grid is filled with
sliding windows: multi-view passes sweep windows of cameras at each
timestamp, temporal passes sweep windows of timestamps at each camera, and
every cell becomes the pixel-wise median of the windows that covered it.
Passes after the first restart from the current grid at a reduced noise
level, which is how the two kinds of consistency get combined.
"""

from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Camera, Fill, View, ViewGrid
from .diffusion import (ConditioningSet, FromImages, GuidanceConfig, NoiseSchedule, PureNoise,
                        derive_seed, make_schedule, sample)
from .trajectory import TrajectoryPlan, is_stationary

log = logging.getLogger(__name__)

MULTIVIEW = "multiview"
TEMPORAL = "temporal"
DEFAULT_SCHEDULE = ((MULTIVIEW, 25), (TEMPORAL, 16), (MULTIVIEW, 8))


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 13
    K_prime: int = 128
    N: int = 8
    M: int = 9
    schedule: tuple = DEFAULT_SCHEDULE
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    mode: str = "grid"
    ddim_steps: int = 25

    def __post_init__(self):
        sched = tuple((str(p), int(k)) for p, k in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if self.mode not in ("grid", "bullet"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "grid" and self.M != self.N + 1:
            raise ValueError(f"grid mode needs M = N + 1, got M={self.M}, N={self.N}")
        if not sched:
            raise ValueError("schedule must not be empty")
        for p, k in sched:
            if p not in (MULTIVIEW, TEMPORAL):
                raise ValueError(f"unknown pass {p!r}")
            if not 1 <= k <= self.ddim_steps:
                raise ValueError(f"noise level {k} outside [1, {self.ddim_steps}]")
        if sched[0][1] != self.ddim_steps:
            raise ValueError("the first pass must start from pure noise")
        if self.K < 1 or self.N < 1 or self.M < 1 or self.K_prime < 0:
            raise ValueError("K, N, M must be positive and K_prime non-negative")

    @classmethod
    def bullet(cls, **kw) -> "SamplerConfig":
        kw.setdefault("N", 13)
        kw.setdefault("M", 3)
        return cls(mode="bullet", **kw)


def parse_schedule(text: str) -> tuple:
    """``"mv:25,t:16,mv:8"`` -> ((multiview, 25), (temporal, 16), (multiview, 8))."""
    names = {"mv": MULTIVIEW, "multiview": MULTIVIEW, "t": TEMPORAL, "temporal": TEMPORAL}
    out = []
    for item in text.split(","):
        name, _, level = item.strip().partition(":")
        if name not in names or not level:
            raise ValueError(f"bad schedule entry {item!r}")
        out.append((names[name], int(level)))
    return tuple(out)


def window_indices(j: int, n: int, size: int) -> list[int]:
    if size < 1 or n < 1 or not 0 <= j < size:
        raise ValueError(f"invalid window (j={j}, n={n}, size={size})")
    return [(j + i) % size for i in range(n)]


def pixel_median(images) -> np.ndarray:
    """Per-pixel median; even counts take the lower-middle order statistic."""
    stack = np.asarray(images if not isinstance(images, np.ndarray) else images)
    if stack.ndim == 0 or stack.shape[0] == 0:
        raise ValueError("pixel_median of an empty list")
    n = stack.shape[0]
    if n == 1:
        return stack[0].copy()
    k = (n - 1) // 2
    return np.partition(stack, k, axis=0)[k]


# ---------------------------------------------------------------- inputs

def column_views(input_video: Sequence[View]) -> list[View]:
    """The real input frames, one per grid column, in time order."""
    cols = [v for v in input_video if v.source == "input"]
    return cols


def row_view(input_video: Sequence[View], camera: Camera) -> View:
    """The conditioning frame captured at a grid row's camera (first match)."""
    for v in input_video:
        if v.camera.same_as(camera):
            return v
    raise ValueError("no input frame for anchor camera")


def column_view(input_video: Sequence[View], time: float) -> View:
    for v in input_video:
        if v.source == "input" and v.time == time:
            return v
    raise ValueError(f"no input frame at time {time}")


def pin_inputs(grid: ViewGrid, input_video: Sequence[View]) -> ViewGrid:
    """Overwrite cells whose (camera, time) coincides with a given view."""
    images = np.array(grid.images)
    fill = np.array(grid.fill)
    keys = [c.key() for c in grid.cameras]
    for v in input_video:
        ck = v.camera.key()
        if ck not in keys:
            continue
        k = keys.index(ck)
        hits = np.nonzero(grid.times == v.time)[0]
        for j in hits:
            if fill[k, j] == Fill.INPUT and v.source != "input":
                continue
            images[k, j] = v.image
            fill[k, j] = Fill.INPUT if v.source == "input" else Fill.GENERATED
    return grid.replace(images, fill)


def pinned_mask(grid: ViewGrid, input_video: Sequence[View]) -> np.ndarray:
    mask = np.zeros((grid.K, grid.L), dtype=bool)
    keys = [c.key() for c in grid.cameras]
    for v in input_video:
        if v.camera.key() in keys:
            mask[keys.index(v.camera.key()), grid.times == v.time] = True
    return mask


def _check_grid(grid: ViewGrid, input_video, cfg: SamplerConfig):
    if grid.K != cfg.K:
        raise ValueError(f"grid has {grid.K} rows but config says K={cfg.K}")
    for cam in grid.cameras:
        row_view(input_video, cam)
    for t in grid.times:
        column_view(input_video, t)


# ---------------------------------------------------------------- passes

def _init_for(grid: ViewGrid, rows, cols, level: int, cfg: SamplerConfig):
    if level >= cfg.ddim_steps:
        return PureNoise()
    cells = grid.fill[rows, cols]
    if np.any(cells == Fill.EMPTY):
        raise ValueError("SDEdit initialisation needs filled cells")
    return FromImages(grid.images[rows, cols], level)


def _map(executor, fn, items):
    if executor is None:
        return [fn(i) for i in items]
    return list(executor.map(fn, items))


def multiview_pass(grid: ViewGrid, input_video: Sequence[View], denoiser, cfg: SamplerConfig,
                   init_noise_level: int, *, pass_index: int = 0,
                   schedule: NoiseSchedule | None = None, executor: Executor | None = None,
                   record: dict | None = None) -> ViewGrid:
    """Regenerate every column from windows of cameras, median-fused per cell."""
    _check_grid(grid, input_video, cfg)
    schedule = schedule or make_schedule(ddim_steps=cfg.ddim_steps)
    n = min(cfg.N, grid.K)
    rows_in = [row_view(input_video, c) for c in grid.cameras]

    def column(j):
        t = float(grid.times[j])
        i_t = column_view(input_video, t)
        outs = [[] for _ in range(grid.K)]
        for w in range(grid.K):
            idx = window_indices(w, n, grid.K)
            cond = ConditioningSet([rows_in[k] for k in idx] + [i_t])
            init = _init_for(grid, idx, [j] * n, init_noise_level, cfg)
            seed = derive_seed(cfg.seed, pass_index, "col", j, w)
            res = sample(denoiser, cond, [grid.cameras[k] for k in idx], [t] * n, init, seed,
                         schedule=schedule, guidance=cfg.guidance)
            for k, img in zip(idx, res):
                outs[k].append(img)
        return outs

    per_col = _map(executor, column, range(grid.L))
    return _fuse(grid, input_video, {(k, j): per_col[j][k] for j in range(grid.L)
                                     for k in range(grid.K)}, record)


def temporal_pass(grid: ViewGrid, input_video: Sequence[View], denoiser, cfg: SamplerConfig,
                  init_noise_level: int, *, pass_index: int = 0,
                  schedule: NoiseSchedule | None = None, executor: Executor | None = None,
                  record: dict | None = None) -> ViewGrid:
    """Regenerate every row from windows of timestamps, median-fused per cell."""
    _check_grid(grid, input_video, cfg)
    schedule = schedule or make_schedule(ddim_steps=cfg.ddim_steps)
    n = min(cfg.N, grid.L)
    cols_in = [column_view(input_video, t) for t in grid.times]

    def row(k):
        cam = grid.cameras[k]
        i_k = row_view(input_video, cam)
        outs = [[] for _ in range(grid.L)]
        for w in range(grid.L):
            idx = window_indices(w, n, grid.L)
            cond = ConditioningSet([cols_in[j] for j in idx] + [i_k])
            init = _init_for(grid, [k] * n, idx, init_noise_level, cfg)
            seed = derive_seed(cfg.seed, pass_index, "row", k, w)
            res = sample(denoiser, cond, [cam] * n, [float(grid.times[j]) for j in idx], init,
                         seed, schedule=schedule, guidance=cfg.guidance)
            for j, img in zip(idx, res):
                outs[j].append(img)
        return outs

    per_row = _map(executor, row, range(grid.K))
    return _fuse(grid, input_video, {(k, j): per_row[k][j] for k in range(grid.K)
                                     for j in range(grid.L)}, record)


def _fuse(grid, input_video, candidates, record):
    images = np.empty_like(grid.images)
    for (k, j), outs in candidates.items():
        images[k, j] = np.clip(pixel_median(outs), 0.0, 1.0)
        if record is not None:
            record[(k, j)] = outs
    fill = np.full(grid.fill.shape, Fill.GENERATED, dtype=np.int8)
    return pin_inputs(grid.replace(images, fill), input_video)


def run_pass(kind: str, *args, **kw) -> ViewGrid:
    if kind == MULTIVIEW:
        return multiview_pass(*args, **kw)
    if kind == TEMPORAL:
        return temporal_pass(*args, **kw)
    raise ValueError(f"unknown pass {kind!r}")


def empty_grid_for(input_video: Sequence[View], plan: TrajectoryPlan) -> ViewGrid:
    cams = [input_video[i].camera for i in plan.anchor_indices]
    cols = column_views(input_video)
    times = [v.time for v in cols]
    return ViewGrid.empty(cams, times)


def alternate_sample(input_video: Sequence[View], plan: TrajectoryPlan, denoiser,
                     cfg: SamplerConfig, *, executor: Executor | None = None,
                     schedule: NoiseSchedule | None = None) -> ViewGrid:
    """Run ``cfg.schedule`` on a K x L grid built from the plan's anchor cameras."""
    if len(plan.anchor_indices) != cfg.K:
        raise ValueError(f"plan has {len(plan.anchor_indices)} anchors, config K={cfg.K}")
    schedule = schedule or make_schedule(ddim_steps=cfg.ddim_steps)
    grid = pin_inputs(empty_grid_for(input_video, plan), input_video)
    for i, (kind, level) in enumerate(cfg.schedule):
        log.info("pass %d: %s from level %d/%d", i, kind, level, cfg.ddim_steps)
        grid = run_pass(kind, grid, input_video, denoiser, cfg, level, pass_index=i,
                        schedule=schedule, executor=executor)
    return grid


# ---------------------------------------------------------------- anchored generation

def nearest_anchors(anchor_centers: np.ndarray, query_center: np.ndarray, m: int) -> list[int]:
    d = np.linalg.norm(np.asarray(anchor_centers) - query_center, axis=1)
    return [int(i) for i in np.argsort(d, kind="stable")[:m]]


def bullet_time_times(input_times: Sequence[float], target_index: int) -> list[float]:
    """Relabel times when true timestamps are unknown: target 0, others 1."""
    return [0.0 if i == target_index else 1.0 for i in range(len(input_times))]


def anchored_generate(cond_views: Sequence[View], anchor_cameras: Sequence[Camera],
                      rest_cameras: Sequence[Camera], time: float, denoiser, cfg: SamplerConfig,
                      *, seed_tag=(), schedule: NoiseSchedule | None = None,
                      min_anchors: int | None = None) -> tuple[list[View], list[View]]:
    """Generate anchors from ``cond_views`` then the rest in nearest-anchored batches."""
    schedule = schedule or make_schedule(ddim_steps=cfg.ddim_steps)
    anchors: list[View] = []
    if anchor_cameras:
        imgs = sample(denoiser, ConditioningSet(cond_views), anchor_cameras,
                      [time] * len(anchor_cameras), PureNoise(),
                      derive_seed(cfg.seed, *seed_tag, "anchors"), schedule=schedule,
                      guidance=cfg.guidance)
        anchors = [View(np.clip(im, 0, 1), c, time, "generated")
                   for im, c in zip(imgs, anchor_cameras)]
    return anchors, batched_from_anchors(anchors, rest_cameras, time, denoiser, cfg,
                                         seed_tag=seed_tag, schedule=schedule,
                                         min_anchors=min_anchors)


def batched_from_anchors(anchors: Sequence[View], cameras: Sequence[Camera], time: float,
                         denoiser, cfg: SamplerConfig, *, seed_tag=(),
                         schedule: NoiseSchedule | None = None,
                         min_anchors: int | None = None) -> list[View]:
    if not cameras:
        return []
    m = cfg.M if min_anchors is None else min_anchors
    if len(anchors) < m:
        raise ValueError(f"need {m} anchors to condition on, have {len(anchors)}")
    schedule = schedule or make_schedule(ddim_steps=cfg.ddim_steps)
    centers = np.array([a.camera.center for a in anchors])
    out = []
    for b, start in enumerate(range(0, len(cameras), cfg.N)):
        batch = list(cameras[start:start + cfg.N])
        mid = np.mean([c.center for c in batch], axis=0)
        cond = [anchors[i] for i in nearest_anchors(centers, mid, min(cfg.M, len(anchors)))]
        imgs = sample(denoiser, ConditioningSet(cond), batch, [time] * len(batch), PureNoise(),
                      derive_seed(cfg.seed, *seed_tag, "batch", b), schedule=schedule,
                      guidance=cfg.guidance)
        out.extend(View(np.clip(im, 0, 1), c, time, "generated") for im, c in zip(imgs, batch))
    return out


def bullet_time(inputs: Sequence[View], target_index: int, view_cameras: Sequence[Camera],
                denoiser, cfg: SamplerConfig | None = None, *, times_known: bool = True,
                schedule: NoiseSchedule | None = None) -> list[np.ndarray]:
    """Static snapshot at the time of ``inputs[target_index]`` from every camera.

    The first N cameras (chosen by farthest-point sampling when there are
    more than N) are generated in one call conditioned on the inputs; the
    rest follow in batches of N, each conditioned on its M nearest anchors.
    With ``times_known=False`` the target frame is labelled t=0 and the other
    inputs t=1.
    """
    from .trajectory import farthest_point_sample

    cfg = cfg or SamplerConfig.bullet()
    inputs = list(inputs)
    if times_known:
        target_time = inputs[target_index].time
    else:
        labels = bullet_time_times([v.time for v in inputs], target_index)
        inputs = [View(v.image, v.camera, t, v.source) for v, t in zip(inputs, labels)]
        target_time = 0.0
    cams = list(view_cameras)
    if len(cams) <= cfg.N:
        anchor_idx = list(range(len(cams)))
    else:
        anchor_idx = farthest_point_sample(cams, cfg.N)
    rest_idx = [i for i in range(len(cams)) if i not in set(anchor_idx)]
    anchors, rest = anchored_generate(inputs, [cams[i] for i in anchor_idx],
                                      [cams[i] for i in rest_idx], target_time, denoiser, cfg,
                                      seed_tag=("bullet",), schedule=schedule)
    out = [None] * len(cams)
    for i, v in zip(anchor_idx, anchors):
        out[i] = v.image
    for i, v in zip(rest_idx, rest):
        out[i] = v.image
    return out


def stationary_bootstrap(input_video: Sequence[View], path: Sequence[Camera], denoiser,
                         cfg: SamplerConfig, *, scene_diagonal: float | None = None,
                         schedule: NoiseSchedule | None = None) -> list[View]:
    """Add K generated t=0 views at ``path`` to a fixed-viewpoint input video.

    Returns the original frames followed by the generated views; row ``i`` of
    the subsequent grid uses index ``len(input_video) + i`` as its anchor.
    """
    cams = [v.camera for v in input_video]
    if scene_diagonal is None:
        pts = np.array([c.center for c in list(cams) + list(path)])
        scene_diagonal = float(np.linalg.norm(pts.max(0) - pts.min(0)))
    if not is_stationary(cams, scene_diagonal):
        raise ValueError("input video is not stationary; use farthest point sampling instead")
    bcfg = SamplerConfig.bullet(seed=cfg.seed, guidance=cfg.guidance,
                                ddim_steps=cfg.ddim_steps)
    first = input_video[0]
    imgs = bullet_time([first], 0, path, denoiser, bcfg, schedule=schedule)
    gen = [View(np.clip(im, 0, 1), c, 0.0, "generated") for im, c in zip(imgs, path)]
    return list(input_video) + gen


def bootstrap_plan(n_inputs: int, path: Sequence[Camera], kind: str = "orbit") -> TrajectoryPlan:
    return TrajectoryPlan(kind, range(n_inputs, n_inputs + len(path)), ())


def dense_views(grid: ViewGrid, plan: TrajectoryPlan, denoiser, cfg: SamplerConfig, *,
                schedule: NoiseSchedule | None = None) -> list[list[View]]:
    """K' extra views per timestamp, each batch anchored on the nearest grid views."""
    if not grid.complete:
        raise ValueError("dense view sampling needs a complete grid")
    novel = list(plan.novel_cameras)
    if not novel:
        return [[] for _ in range(grid.L)]
    out = []
    for j in range(grid.L):
        anchors = [View(grid.images[k, j], grid.cameras[k], float(grid.times[j]), "generated")
                   for k in range(grid.K)]
        out.append(batched_from_anchors(anchors, novel, float(grid.times[j]), denoiser, cfg,
                                        seed_tag=("dense", j), schedule=schedule,
                                        min_anchors=min(cfg.M, grid.K)))
    return out
