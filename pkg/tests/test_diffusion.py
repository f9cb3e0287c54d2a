import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mv4d.core import Camera, View
from mv4d.diffusion import (ConditioningSet, ConsistentEpsDenoiser, CorruptionSpec, FromImages,
                            GuidanceConfig, LatentBatch, OracleDenoiser, PureNoise, cfg_epsilon,
                            ddim_step, ddim_update, derive_seed, make_schedule, sample,
                            seeded_noise)
from mv4d.metrics import psnr
from mv4d.toyworld import render

UNIT = GuidanceConfig(1.0, 1.0)


# ---------------------------------------------------------------- schedule

def test_schedule_values():
    s = make_schedule()
    assert s.alpha_bar[0] == pytest.approx(0.9999, abs=1e-15)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    assert len(s.substep_indices) == 25
    assert set(np.diff(s.substep_indices[::-1])) == {40}
    assert np.all(np.diff(s.substep_indices) < 0)


def test_schedule_against_direct_product():
    s = make_schedule()
    betas = [1e-4 + (2e-2 - 1e-4) * i / 999 for i in range(1000)]
    prod = 1.0
    acc = []
    for b in betas:
        prod *= 1.0 - b
        acc.append(prod)
    assert np.allclose(s.alpha_bar, acc, rtol=1e-12, atol=0)


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule(T_train=10, ddim_steps=25)
    with pytest.raises(ValueError):
        make_schedule().start_position(0)
    with pytest.raises(ValueError):
        make_schedule().start_position(26)


# ---------------------------------------------------------------- guidance

def brute_cfg(u, i, f, si, st_):
    out = np.empty_like(u)
    for idx in np.ndindex(u.shape):
        out[idx] = u[idx] + si * (i[idx] - u[idx]) + st_ * (f[idx] - i[idx])
    return out


def test_cfg_identities(rng):
    u, i, f = rng.normal(size=(3, 4, 5, 5, 3))
    assert np.array_equal(cfg_epsilon(u, i, f, GuidanceConfig(1.0, 1.0)), f)
    assert np.array_equal(cfg_epsilon(u, i, f, GuidanceConfig(0.0, 0.0)), u)
    e = rng.normal(size=(2, 3))
    assert np.allclose(cfg_epsilon(e, e, e, GuidanceConfig(3.0, 4.5)), e, rtol=0, atol=1e-12)


def test_cfg_matches_brute_force(rng):
    u, i, f = rng.normal(size=(3, 2, 6, 6, 3))
    g = GuidanceConfig()
    assert (g.s_image, g.s_time) == (3.0, 4.5)
    assert np.allclose(cfg_epsilon(u, i, f, g), brute_cfg(u, i, f, 3.0, 4.5), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(si=st.floats(0, 10), seed=st.integers(0, 1000))
def test_cfg_time_scale_zero_ignores_full(si, seed):
    r = np.random.default_rng(seed)
    u, i, f, f2 = r.normal(size=(4, 3, 3))
    g = GuidanceConfig(si, 0.0)
    assert np.array_equal(cfg_epsilon(u, i, f, g), cfg_epsilon(u, i, f2, g))


def test_cfg_errors(rng):
    with pytest.raises(ValueError):
        cfg_epsilon(np.zeros(3), np.zeros(3), np.zeros(4), GuidanceConfig())
    with pytest.raises(ValueError):
        GuidanceConfig(-1.0, 1.0)


# ---------------------------------------------------------------- ddim

def test_ddim_update_noop_and_zero_eps(rng):
    x0 = rng.uniform(0, 1, (2, 4, 4, 3))
    a = 0.3
    z = np.sqrt(a) * x0 + np.sqrt(1 - a) * rng.normal(size=x0.shape)
    eps = (z - np.sqrt(a) * x0) / np.sqrt(1 - a)
    z2, _ = ddim_update(z, eps, a, a)
    assert np.allclose(z2, z, rtol=0, atol=1e-12)
    z3, _ = ddim_update(np.sqrt(a) * x0, np.zeros_like(x0), a, 0.8)
    assert np.allclose(z3, np.sqrt(0.8) * x0, rtol=0, atol=1e-12)


def _cams(n, size=8):
    return [Camera.look_at([np.cos(a) * 3, 0.3, np.sin(a) * 3], [0, 0, 0], width=size, height=size)
            for a in np.linspace(0, 1, n)]


@pytest.mark.parametrize("level", [1, 8, 16, 25])
def test_ddim_recovers_x0_double(rng, level):
    x0 = rng.uniform(0, 1, (3, 8, 8, 3))
    out = sample(ConsistentEpsDenoiser(x0), ConditioningSet([]), _cams(3), [0.0] * 3,
                 FromImages(rng.uniform(0, 1, x0.shape), level), seed=level)
    assert np.abs(out - x0).max() <= 1e-10


def test_ddim_recovers_x0_single_precision(rng):
    x0 = rng.uniform(0, 1, (2, 8, 8, 3)).astype(np.float32)
    out = sample(ConsistentEpsDenoiser(x0), ConditioningSet([]), _cams(2), [0.0] * 2, PureNoise(),
                 seed=3, dtype=np.float32)
    assert out.dtype == np.float32
    assert np.abs(out - x0).max() <= 1e-4


def test_ddim_step_terminal_error(rng):
    s = make_schedule()
    b = LatentBatch(np.zeros((1, 2, 2, 3)), tuple(_cams(1, 2)), (0.0,), s.ddim_steps, 1.0)
    with pytest.raises(ValueError):
        ddim_step(b, np.zeros((1, 2, 2, 3)), s)


def test_pure_noise_is_manual_loop(rng):
    x0 = rng.uniform(0, 1, (2, 8, 8, 3))
    den = ConsistentEpsDenoiser(x0)
    s = make_schedule()
    got = sample(den, ConditioningSet([]), _cams(2), [0.0, 0.0], PureNoise(), seed=11,
                 guidance=UNIT)
    z = seeded_noise(11, x0.shape)
    for p in range(25):
        a, a_next = s.alpha_at(p), s.alpha_at(p + 1)
        eps = (z - np.sqrt(a) * x0) / np.sqrt(1 - a)
        z, _ = ddim_update(z, eps, a, a_next)
    assert np.array_equal(got, z)


def test_sdedit_runs_k_substeps(rng):
    x0 = rng.uniform(0, 1, (1, 8, 8, 3))
    seen = []
    sample(ConsistentEpsDenoiser(x0), ConditioningSet([]), _cams(1), [0.0], FromImages(x0, 16),
           trace=lambda b, e, x: seen.append(b.step_index))
    assert seen == list(range(9, 25))


def test_sample_errors(rng):
    den = ConsistentEpsDenoiser(np.zeros((1, 8, 8, 3)))
    with pytest.raises(ValueError):
        sample(den, ConditioningSet([]), _cams(1), [0.0], FromImages(np.zeros((2, 8, 8, 3)), 5))
    with pytest.raises(ValueError):
        sample(den, ConditioningSet([]), _cams(1), [0.0], FromImages(np.zeros((1, 8, 8, 3)), 0))
    with pytest.raises(ValueError):
        ConditioningSet([], times_present=True, images_present=False)


def test_derive_seed_stable():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert 0 <= derive_seed("x") < 2**63


# ---------------------------------------------------------------- oracle

@pytest.fixture(scope="module")
def cams64(scene):
    return [Camera.look_at(scene.center + [np.sin(a) * 3.5, 0.8, -np.cos(a) * 3.5], scene.center)
            for a in (0.0, 0.7, 1.4)]


def test_oracle_full_conditioning_reproduces_truth(scene, cams64):
    den = OracleDenoiser(scene)
    cond = ConditioningSet([View(render(scene, cams64[0], 0.2), cams64[0], 0.2)])
    out = sample(den, cond, cams64, [0.1, 0.5, 0.9], PureNoise(), seed=2, guidance=UNIT)
    for img, c, t in zip(out, cams64, [0.1, 0.5, 0.9]):
        assert psnr(np.clip(img, 0, 1), render(scene, c, t)) >= 60


@pytest.mark.parametrize("level", [3, 16, 25])
def test_oracle_sdedit_any_level(scene, cams64, rng, level):
    den = OracleDenoiser(scene)
    cond = ConditioningSet([View(render(scene, cams64[0], 0.0), cams64[0], 0.0)])
    gt = np.stack([render(scene, c, 0.4) for c in cams64])
    out = sample(den, cond, cams64, [0.4] * 3, FromImages(rng.uniform(0, 1, gt.shape), level), 5,
                 guidance=UNIT)
    assert np.abs(out - gt).max() <= 1e-3


def test_default_guidance_extrapolates_exact_oracle(scene, cams64):
    # the dropped-condition estimates differ, so scales != 1 move away from the truth
    den = OracleDenoiser(scene)
    cond = ConditioningSet([View(render(scene, cams64[0], 0.0), cams64[0], 0.0)])
    out = sample(den, cond, cams64[1:2], [0.8], PureNoise(), seed=2)
    assert psnr(np.clip(out[0], 0, 1), render(scene, cams64[1], 0.8)) < 40


def test_oracle_dropped_time_uses_first_cond_time(scene, cams64):
    den = OracleDenoiser(scene)
    cond = ConditioningSet([View(render(scene, cams64[0], 0.3), cams64[0], 0.3)]).drop_time()
    z = seeded_noise(0, (2, 64, 64, 3))
    s = make_schedule()
    batch = LatentBatch(z, tuple(cams64[1:]), (0.9, 0.1), 4, s.alpha_at(4))
    x0 = den.clean_estimate(batch, cond)
    for img, c in zip(x0, cams64[1:]):
        assert np.array_equal(img, render(scene, c, 0.3))
    flat = den.clean_estimate(batch, cond.drop_all())
    assert np.ptp(flat.reshape(-1, 3), axis=0).max() == 0.0


def test_oracle_predict_eps_consistent(scene, cams64):
    den = OracleDenoiser(scene)
    s = make_schedule()
    x0 = np.stack([render(scene, c, 0.5) for c in cams64])
    a = s.alpha_at(10)
    n = seeded_noise(4, x0.shape)
    batch = LatentBatch(np.sqrt(a) * x0 + np.sqrt(1 - a) * n, tuple(cams64), (0.5,) * 3, 10, a)
    cond = ConditioningSet([View(x0[0], cams64[0], 0.5)])
    assert np.allclose(den.predict(batch, cond), n, atol=1e-9)


def test_oracle_corrupted_windows_and_median(scene, cams64):
    den = OracleDenoiser(scene, CorruptionSpec(bias=0.0, jitter=0.05, seed=1))
    cond = ConditioningSet([View(render(scene, cams64[0], 0.0), cams64[0], 0.0)])
    gt = render(scene, cams64[1], 0.5)
    outs = [sample(den, cond, cams64[1:2], [0.5], PureNoise(), seed=s)[0] for s in range(5)]
    assert not np.allclose(outs[0], outs[1])
    errs = [np.linalg.norm(o - gt) for o in outs]
    med = np.median(np.stack(outs), axis=0)
    assert np.linalg.norm(med - gt) < max(errs)


def test_sample_deterministic(scene, cams64):
    den = OracleDenoiser(scene, CorruptionSpec(bias=0.03, jitter=0.05))
    cond = ConditioningSet([View(render(scene, cams64[0], 0.0), cams64[0], 0.0)])
    a = sample(den, cond, cams64[1:], [0.2, 0.6], PureNoise(), seed=9)
    b = sample(OracleDenoiser(scene, CorruptionSpec(bias=0.03, jitter=0.05)), cond, cams64[1:],
               [0.2, 0.6], PureNoise(), seed=9)
    assert np.array_equal(a, b)


def test_noise_residual_monotone(scene, cams64):
    den = OracleDenoiser(scene)
    cond = ConditioningSet([View(render(scene, cams64[0], 0.0), cams64[0], 0.0)])
    for seed in range(10):
        var = []

        def trace(batch, eps, x0):
            var.append(np.var(batch.targets - np.sqrt(batch.alpha_bar) * x0))

        sample(den, cond, cams64[:1], [0.5], PureNoise(), seed=seed, trace=trace)
        assert np.all(np.diff(var) < 0)
