from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mv4d.core import Fill, View, normalize_times
from mv4d.diffusion import CorruptionSpec, GuidanceConfig, OracleDenoiser
from mv4d.gridsampler import (DEFAULT_SCHEDULE, MULTIVIEW, TEMPORAL, SamplerConfig,
                              alternate_sample, bootstrap_plan, bullet_time, bullet_time_times,
                              dense_views, empty_grid_for, multiview_pass, nearest_anchors,
                              parse_schedule, pin_inputs, pixel_median, stationary_bootstrap,
                              temporal_pass, window_indices)
from mv4d.metrics import psnr
from mv4d.toyworld import Motion, Primitive, SceneSpec, render, render_input_video
from mv4d.trajectory import TrajectoryPlan, make_path

UNIT = GuidanceConfig(1.0, 1.0)


# ---------------------------------------------------------------- windows and median

def test_window_examples():
    assert window_indices(2, 3, 4) == [2, 3, 0]
    assert window_indices(0, 5, 5) == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        window_indices(4, 3, 4)


@pytest.mark.parametrize("size,n", [(13, 8), (8, 8), (6, 6), (9, 2)])
def test_window_coverage(size, n):
    counts = np.zeros(size, dtype=int)
    for j in range(size):
        w = window_indices(j, n, size)
        assert len(w) == n == len(set(w))
        counts[w] += 1
    assert np.all(counts == n)


def test_median_single_and_outlier(rng):
    a = rng.uniform(0, 1, (5, 5, 3))
    assert np.array_equal(pixel_median([a]), a)
    c = a + rng.choice([-1, 1], a.shape) * rng.uniform(0.2, 1, a.shape)
    assert np.array_equal(pixel_median([a, a.copy(), c]), a)
    with pytest.raises(ValueError):
        pixel_median([])


def test_median_even_lower_middle():
    stack = np.array([[4.0], [1.0], [3.0], [2.0]])
    assert pixel_median(stack)[0] == 2.0


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 9), seed=st.integers(0, 10_000))
def test_median_permutation_invariant(n, seed):
    r = np.random.default_rng(seed)
    imgs = r.uniform(0, 1, (n, 3, 4, 3))
    ref = pixel_median(imgs)
    assert np.array_equal(pixel_median(imgs[r.permutation(n)]), ref)
    srt = np.sort(imgs, axis=0)
    assert np.array_equal(ref, srt[(n - 1) // 2])


# ---------------------------------------------------------------- config

def test_parse_schedule():
    assert parse_schedule("mv:25,t:16,mv:8") == DEFAULT_SCHEDULE
    assert parse_schedule("multiview:25") == ((MULTIVIEW, 25),)
    with pytest.raises(ValueError):
        parse_schedule("x:3")


def test_config_invariants():
    c = SamplerConfig()
    assert (c.K, c.K_prime, c.N, c.M) == (13, 128, 8, 9)
    assert c.schedule == ((MULTIVIEW, 25), (TEMPORAL, 16), (MULTIVIEW, 8))
    b = SamplerConfig.bullet()
    assert (b.N, b.M) == (13, 3)
    for bad in [dict(M=8), dict(schedule=()), dict(schedule=((MULTIVIEW, 16),)),
                dict(schedule=((MULTIVIEW, 25), (TEMPORAL, 0))), dict(mode="x")]:
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


# ---------------------------------------------------------------- small-scale passes

@pytest.fixture(scope="module")
def small(scene):
    cams = make_path("orbit", center=scene.center, radius=3.5, count=4, turns=0.3, elevation=0.8,
                     width=32, height=32)
    video = render_input_video(scene, cams, normalize_times(range(4)))
    return video, TrajectoryPlan("reuse_input", range(4))


def gt_grid(scene, grid):
    return np.stack([[render(scene, c, float(t)) for t in grid.times] for c in grid.cameras])


def test_multiview_single_window_exact(scene, small):
    video, plan = small
    cfg = SamplerConfig(K=4, N=4, M=5, guidance=UNIT, schedule=((MULTIVIEW, 25),))
    g = pin_inputs(empty_grid_for(video, plan), video)
    rec = {}
    out = multiview_pass(g, video, OracleDenoiser(scene), cfg, 25, record=rec)
    gt = gt_grid(scene, out)
    assert out.complete
    assert all(len(v) == 4 for v in rec.values())
    for k in range(4):
        for j in range(4):
            assert psnr(out.images[k, j], gt[k, j]) >= 60


def test_windows_agree_under_exact_oracle(scene, small):
    video, plan = small
    cfg = SamplerConfig(K=4, N=2, M=3, guidance=UNIT)
    g = pin_inputs(empty_grid_for(video, plan), video)
    rec = {}
    out = temporal_pass(g, video, OracleDenoiser(scene), cfg, 25, record=rec)
    for (k, j), outs in rec.items():
        assert len(outs) == 2
        assert np.abs(outs[0] - outs[1]).max() <= 1e-3
        if out.fill[k, j] != Fill.INPUT:
            assert np.array_equal(out.images[k, j], np.clip(pixel_median(outs), 0, 1))


def test_temporal_single_window_exact(scene, small):
    video, plan = small
    cfg = SamplerConfig(K=4, N=4, M=5, guidance=UNIT)
    g = pin_inputs(empty_grid_for(video, plan), video)
    out = temporal_pass(g, video, OracleDenoiser(scene), cfg, 25)
    gt = gt_grid(scene, out)
    assert min(psnr(out.images[k, j], gt[k, j]) for k in range(4) for j in range(4)) >= 60


def test_corrupted_median_beats_mean_window(scene, small):
    video, plan = small
    cfg = SamplerConfig(K=4, N=3, M=4, guidance=UNIT)
    g = pin_inputs(empty_grid_for(video, plan), video)
    rec = {}
    out = multiview_pass(g, video, OracleDenoiser(scene, CorruptionSpec(jitter=0.05, seed=3)),
                         cfg, 25, record=rec)
    gt = gt_grid(scene, out)
    med, mean = [], []
    for (k, j), outs in rec.items():
        med.append(np.linalg.norm(np.clip(pixel_median(outs), 0, 1) - gt[k, j]))
        mean.append(np.mean([np.linalg.norm(o - gt[k, j]) for o in outs]))
    assert np.mean(med) <= np.mean(mean)


def test_static_scene_temporal_pass_keeps_grid(small):
    video, plan = small
    still = SceneSpec(0, (Primitive("sphere", (0.0, 0.0, 0.0), 0.4, (0.8, 0.3, 0.2),
                                    Motion("static", (0, 0, 0))),))
    cams = [v.camera for v in video]
    vid = render_input_video(still, cams, [v.time for v in video])
    cfg = SamplerConfig(K=4, N=4, M=5, guidance=UNIT)
    den = OracleDenoiser(still)
    g = multiview_pass(pin_inputs(empty_grid_for(vid, plan), vid), vid, den, cfg, 25)
    g2 = temporal_pass(g, vid, den, cfg, 16, pass_index=1)
    assert np.abs(g2.images - g.images).max() <= 1e-3


def test_determinism_and_parallel_safety(scene, small):
    video, plan = small
    cfg = SamplerConfig(K=4, N=2, M=3, seed=5, schedule=((MULTIVIEW, 25), (TEMPORAL, 16)))
    den = OracleDenoiser(scene, CorruptionSpec(bias=0.03, jitter=0.05))
    a = alternate_sample(video, plan, den, cfg)
    b = alternate_sample(video, plan, OracleDenoiser(scene, CorruptionSpec(bias=0.03, jitter=0.05)),
                         cfg)
    assert a.equals(b)
    with ThreadPoolExecutor(4) as ex:
        c = alternate_sample(video, plan, den, cfg, executor=ex)
    assert a.equals(c)


def test_plan_config_mismatch(scene, small):
    video, plan = small
    with pytest.raises(ValueError):
        alternate_sample(video, plan, OracleDenoiser(scene), SamplerConfig(K=3, N=2, M=3))


# ---------------------------------------------------------------- full exact grid

def test_exact_grid_quality(scene, video, exact_grid):
    grid, plan, _ = exact_grid
    assert grid.complete and (grid.K, grid.L) == (6, 8)
    gt = gt_grid(scene, grid)
    ps = [psnr(grid.images[k, j], gt[k, j]) for k in range(6) for j in range(8)]
    assert np.mean(ps) >= 40


def test_exact_grid_input_pinning(video, exact_grid):
    grid, plan, _ = exact_grid
    for k, i in enumerate(plan.anchor_indices):
        j = int(np.nonzero(grid.times == video[i].time)[0][0])
        assert grid.fill[k, j] == Fill.INPUT
        assert np.array_equal(grid.images[k, j], video[i].image)
    assert (grid.fill == Fill.INPUT).sum() == len(plan.anchor_indices)


def test_extra_low_noise_pass_is_idempotent(scene, video, exact_grid):
    grid, _, cfg = exact_grid
    again = multiview_pass(grid, video, OracleDenoiser(scene), cfg, 1, pass_index=9)
    assert np.abs(again.images - grid.images).max() <= 1e-2


def test_dense_views(scene, exact_grid):
    grid, plan, cfg = exact_grid
    assert dense_views(grid, plan, OracleDenoiser(scene), cfg) == [[] for _ in range(grid.L)]
    novel = make_path("orbit", center=scene.center, radius=3.5, count=16, elevation=0.8)
    dense = dense_views(grid, TrajectoryPlan("orbit", plan.anchor_indices, novel),
                        OracleDenoiser(scene), cfg)
    assert [len(col) for col in dense] == [16] * grid.L
    ps = [psnr(v.image, render(scene, v.camera, v.time)) for col in dense[::3] for v in col]
    assert np.mean(ps) >= 40
    with pytest.raises(ValueError):
        dense_views(grid.replace(fill=np.zeros((grid.K, grid.L), dtype=np.int8)), plan,
                    OracleDenoiser(scene), cfg)


# ---------------------------------------------------------------- anchored generation

def test_nearest_anchors_example():
    centers = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    assert nearest_anchors(centers, np.array([2.1, 0, 0]), 2) == [2, 1]


def test_bullet_time_disentangles(scene):
    cams = make_path("orbit", center=scene.center, radius=3.5, count=3, turns=0.3, elevation=0.8,
                     width=32, height=32)
    inputs = [View(render(scene, c, t), c, t) for c, t in zip(cams, [0.0, 0.5, 1.0])]
    targets = make_path("orbit", center=scene.center, radius=3.5, count=5, elevation=0.8,
                        width=32, height=32) + cams
    cfg = SamplerConfig.bullet(N=4, guidance=UNIT)
    out = bullet_time(inputs, 1, targets, OracleDenoiser(scene), cfg)
    assert len(out) == len(targets)
    for img, c in zip(out, targets):
        assert psnr(img, render(scene, c, 0.5)) >= 60


def test_bullet_time_unknown_times(scene):
    assert bullet_time_times([0.2, 0.4, 0.9], 1) == [1.0, 0.0, 1.0]
    cams = make_path("orbit", center=scene.center, radius=3.5, count=3, turns=0.3, width=32,
                     height=32)
    inputs = [View(render(scene, c, t), c, t) for c, t in zip(cams, [0.0, 0.5, 1.0])]
    out = bullet_time(inputs, 1, cams[:2], OracleDenoiser(scene),
                      SamplerConfig.bullet(guidance=UNIT), times_known=False)
    # the relabelled target time is 0
    assert psnr(out[0], render(scene, cams[0], 0.0)) >= 60


def test_bullet_time_needs_anchors(scene):
    cams = make_path("orbit", center=scene.center, radius=3.5, count=6, width=16, height=16)
    inputs = [View(render(scene, cams[0], 0.0), cams[0], 0.0)]
    with pytest.raises(ValueError):
        bullet_time(inputs, 0, cams, OracleDenoiser(scene), SamplerConfig.bullet(N=2, M=3))


def test_stationary_bootstrap(scene):
    cam = make_path("orbit", center=scene.center, radius=3.5, count=1, width=32, height=32)[0]
    video = render_input_video(scene, [cam] * 4, normalize_times(range(4)))
    path = make_path("orbit", center=scene.center, radius=3.5, count=3, turns=0.4, elevation=0.5,
                     width=32, height=32)
    cfg = SamplerConfig(K=3, N=2, M=3, guidance=UNIT)
    aug = stationary_bootstrap(video, path, OracleDenoiser(scene), cfg)
    assert len(aug) == 4 + 3
    extra = aug[4:]
    assert all(v.time == 0.0 and v.source == "generated" for v in extra)
    for v in extra:
        assert psnr(v.image, render(scene, v.camera, 0.0)) >= 60
    grid = alternate_sample(aug, bootstrap_plan(4, path), OracleDenoiser(scene), cfg)
    assert grid.complete and grid.K == 3 and grid.L == 4
    with pytest.raises(ValueError):
        stationary_bootstrap(render_input_video(scene, path, [0.0, 0.5, 1.0]), path,
                             OracleDenoiser(scene), cfg)
