"""Pixel-space DDIM sampling with two-scale classifier-free guidance.

The denoiser is anything with a ``predict(batch, cond) -> eps`` method
(:class:`Denoiser`). :class:`OracleDenoiser` answers from an analytic toy scene
and can be corrupted to imitate an imperfect generative model.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .core import Camera, View
from .toyworld import SceneSpec, render

X0_CLIP = (-0.1, 1.1)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T_train: int
    alpha_bar: np.ndarray
    ddim_steps: int
    substep_indices: np.ndarray

    def alpha_at(self, position: int) -> float:
        """Cumulative signal coefficient at a substep position (0 = noisiest).

        ``position == ddim_steps`` is the clean terminal state (alpha_bar = 1).
        """
        if position == self.ddim_steps:
            return 1.0
        return float(self.alpha_bar[self.substep_indices[position]])

    def start_position(self, level: int) -> int:
        """Substep position at which an SDEdit run of ``level`` steps starts."""
        if not 1 <= level <= self.ddim_steps:
            raise ValueError(f"noise level {level} outside [1, {self.ddim_steps}]")
        return self.ddim_steps - level


def make_schedule(T_train: int = 1000, ddim_steps: int = 25,
                  beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if ddim_steps > T_train or ddim_steps < 1:
        raise ValueError(f"ddim_steps={ddim_steps} must be in [1, T_train={T_train}]")
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    stride = T_train // ddim_steps
    sub = np.arange(ddim_steps)[::-1] * stride
    alpha_bar.setflags(write=False)
    sub.setflags(write=False)
    return NoiseSchedule(T_train, alpha_bar, ddim_steps, sub)


@dataclass(frozen=True)
class GuidanceConfig:
    s_image: float = 3.0
    s_time: float = 4.5

    def __post_init__(self):
        if self.s_image < 0 or self.s_time < 0:
            raise ValueError("guidance scales must be non-negative")


def cfg_epsilon(eps_uncond, eps_image, eps_full, g: GuidanceConfig):
    """Two-scale guided noise prediction.

    Algebraically ``u + s_i (i - u) + s_t (f - i)``; evaluated with collected
    coefficients so that (1, 1) returns ``eps_full`` and (0, 0) returns
    ``eps_uncond`` bit for bit.
    """
    eps_uncond, eps_image, eps_full = (np.asarray(e) for e in (eps_uncond, eps_image, eps_full))
    if not (eps_uncond.shape == eps_image.shape == eps_full.shape):
        raise ValueError(f"shape mismatch: {eps_uncond.shape}, {eps_image.shape}, {eps_full.shape}")
    si, st = g.s_image, g.s_time
    out = eps_full * st
    if si != st:
        out = out + eps_image * (si - st)
    if si != 1.0:
        out = out + eps_uncond * (1.0 - si)
    return out


@dataclass(frozen=True, eq=False)
class LatentBatch:
    targets: np.ndarray
    target_cameras: tuple
    target_times: tuple
    step_index: int
    alpha_bar: float
    key: int = 0

    def __post_init__(self):
        n = self.targets.shape[0]
        if n < 1:
            raise ValueError("batch needs at least one target")
        if len(self.target_cameras) != n or len(self.target_times) != n:
            raise ValueError("targets, cameras and times disagree in length")


@dataclass(frozen=True, eq=False)
class ConditioningSet:
    cond_views: tuple
    times_present: bool = True
    images_present: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cond_views", tuple(self.cond_views))
        if not self.images_present and self.times_present:
            raise ValueError("time conditioning cannot be present without image conditioning")

    def drop_time(self) -> "ConditioningSet":
        return replace(self, times_present=False)

    def drop_all(self) -> "ConditioningSet":
        return replace(self, times_present=False, images_present=False)


class Denoiser(Protocol):
    def predict(self, batch: LatentBatch, cond: ConditioningSet) -> np.ndarray: ...


def ddim_update(z, eps, alpha, alpha_next, clip=X0_CLIP):
    """One deterministic (eta = 0) DDIM update; returns ``(z_next, x0_hat)``."""
    x0 = (z - np.sqrt(1.0 - alpha) * eps) / np.sqrt(alpha)
    if clip is not None:
        x0 = np.clip(x0, *clip)
    z_next = np.sqrt(alpha_next) * x0 + np.sqrt(1.0 - alpha_next) * eps
    return z_next.astype(z.dtype, copy=False), x0


def ddim_step(batch: LatentBatch, eps, schedule: NoiseSchedule) -> LatentBatch:
    """Advance ``batch`` one substep towards the clean image.

    Stepping from the last substep lands on the terminal position
    ``schedule.ddim_steps`` whose state is the clean estimate itself.
    """
    p = batch.step_index
    if p >= schedule.ddim_steps:
        raise ValueError("batch is already at the terminal position")
    a_next = schedule.alpha_at(p + 1)
    z_next, _ = ddim_update(batch.targets, eps, batch.alpha_bar, a_next)
    return replace(batch, targets=z_next, step_index=p + 1, alpha_bar=a_next)


@dataclass(frozen=True)
class PureNoise:
    pass


@dataclass(frozen=True, eq=False)
class FromImages:
    images: np.ndarray
    level: int


def seeded_noise(seed: int, shape, dtype=np.float64) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype, copy=False)


def sample(denoiser: Denoiser, cond: ConditioningSet, target_cameras: Sequence[Camera],
           target_times: Sequence[float], init=PureNoise(), seed: int = 0, *,
           schedule: NoiseSchedule | None = None, guidance: GuidanceConfig = GuidanceConfig(),
           dtype=np.float64, trace: Callable | None = None) -> np.ndarray:
    """Generate one image per target camera/time; returns (N, H, W, 3).

    Each substep calls the denoiser three times (full, time dropped, both
    dropped) and combines them with :func:`cfg_epsilon`.
    """
    schedule = schedule or make_schedule()
    cams = tuple(target_cameras)
    times = tuple(float(t) for t in target_times)
    if len(cams) != len(times):
        raise ValueError("one time per target camera required")
    h, w = cams[0].height, cams[0].width
    shape = (len(cams), h, w, 3)
    noise = seeded_noise(seed, shape, dtype)
    if isinstance(init, PureNoise):
        start, z = 0, noise
    elif isinstance(init, FromImages):
        x = np.asarray(init.images, dtype=dtype)
        if x.shape != shape:
            raise ValueError(f"init images shape {x.shape} != targets {shape}")
        start = schedule.start_position(init.level)
        a = schedule.alpha_at(start)
        z = (np.sqrt(a) * x + np.sqrt(1.0 - a) * noise).astype(dtype, copy=False)
    else:
        raise TypeError(f"unknown init {init!r}")

    batch = LatentBatch(z, cams, times, start, schedule.alpha_at(start), key=seed)
    variants = (cond.drop_all(), cond.drop_time(), cond)
    while batch.step_index < schedule.ddim_steps:
        eps_u, eps_i, eps_f = (np.asarray(denoiser.predict(batch, c), dtype=dtype) for c in variants)
        eps = cfg_epsilon(eps_u, eps_i, eps_f, guidance)
        if trace is not None:
            _, x0 = ddim_update(batch.targets, eps, batch.alpha_bar, batch.alpha_bar)
            trace(batch, eps, x0)
        batch = ddim_step(batch, eps, schedule)
    return batch.targets


# ---------------------------------------------------------------- oracles

def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


class ConsistentEpsDenoiser:
    """Predicts the exact noise that explains ``z`` given a fixed clean image."""

    def __init__(self, x0):
        self.x0 = np.asarray(x0)

    def predict(self, batch, cond):
        a = batch.alpha_bar
        z = batch.targets
        x0 = self.x0.astype(z.dtype, copy=False)
        return ((z - np.sqrt(a).astype(z.dtype) * x0) / np.sqrt(1.0 - a).astype(z.dtype)).astype(z.dtype)


@dataclass(frozen=True)
class CorruptionSpec:
    """Imperfections of the oracle, in image and time units.

    ``bias``: amplitude of a smooth per-camera colour field (affine in image
    coordinates, per channel). ``jitter``: bound on the per-window time
    offset. Both are drawn per (window, camera) and act as the prior mean of
    a Gaussian belief whose posterior is updated from the noisy input, so a
    corrupted oracle still honours what low-noise inputs already show.
    """

    bias: float = 0.0
    jitter: float = 0.0
    seed: int = 0
    prior_scale: float = 1.0

    @property
    def exact(self) -> bool:
        return self.bias == 0.0 and self.jitter == 0.0


def _bias_basis(h: int, w: int) -> np.ndarray:
    y, x = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    planes = np.stack([np.ones_like(x), x, y])  # (3, H, W)
    basis = np.zeros((9, h, w, 3))
    for c in range(3):
        basis[3 * c:3 * c + 3, :, :, c] = planes
    return basis


class OracleDenoiser:
    """Noise predictor whose clean-image estimate comes from the toy scene.

    Clean estimate per conditioning variant:

    * images and times present: render at the target camera and time;
    * time dropped: render at the target camera and the first conditioning
      view's time;
    * nothing present: a flat image of the scene's mean background colour.
    """

    def __init__(self, scene: SceneSpec, corruption: CorruptionSpec = CorruptionSpec(),
                 supersample: int = 2, cache_size: int = 768):
        self.scene = scene
        self.corruption = corruption
        self.supersample = supersample
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._basis = {}
        self._models: OrderedDict = OrderedDict()
        self.calls = 0

    def render(self, camera: Camera, time: float) -> np.ndarray:
        time = min(max(float(time), 0.0), 1.0)
        k = (camera.key(), time)
        img = self._cache.get(k)
        if img is None:
            img = render(self.scene, camera, time, self.supersample)
            img.setflags(write=False)
            self._cache[k] = img
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(k)
        return img

    def mean_color(self, h, w) -> np.ndarray:
        bg = self.scene.background
        c = 0.5 * (np.asarray(bg["top"]) + np.asarray(bg["bottom"]))
        return np.broadcast_to(c, (h, w, 3)).copy()

    def _render_times(self, batch, cond):
        if not cond.images_present:
            return None
        if cond.times_present:
            return list(batch.target_times)
        t_first = cond.cond_views[0].time
        return [t_first] * len(batch.target_times)

    def clean_estimate(self, batch: LatentBatch, cond: ConditioningSet) -> np.ndarray:
        n = len(batch.target_cameras)
        h, w = batch.targets.shape[1:3]
        times = self._render_times(batch, cond)
        if self.corruption.exact:
            if times is None:
                return np.broadcast_to(self.mean_color(h, w), (n, h, w, 3))
            return np.stack([self.render(c, t) for c, t in zip(batch.target_cameras, times)])
        return self._posterior_estimate(batch, times)

    def predict(self, batch: LatentBatch, cond: ConditioningSet) -> np.ndarray:
        self.calls += 1
        x0 = self.clean_estimate(batch, cond).astype(batch.targets.dtype, copy=False)
        a = batch.alpha_bar
        return (batch.targets - np.sqrt(a) * x0) / np.sqrt(1.0 - a)

    # corrupted path -------------------------------------------------

    def _window_prior(self, batch):
        c = self.corruption
        rng = np.random.default_rng(derive_seed("jitter", c.seed, batch.key))
        dt = float(rng.uniform(-c.jitter, c.jitter)) if c.jitter > 0 else 0.0
        biases = {}
        for cam in batch.target_cameras:
            ck = cam.key()
            if ck not in biases:
                r = np.random.default_rng(derive_seed("bias", c.seed, batch.key,
                                                      hashlib.blake2b(ck, digest_size=8).hexdigest()))
                biases[ck] = r.uniform(-c.bias, c.bias, 9) if c.bias > 0 else np.zeros(9)
        return dt, biases

    def _window_model(self, batch, times):
        """Prior mean, time-derivative images and Gram matrix of one window.

        Independent of the diffusion step, so cached across the substeps of
        a sampling run.
        """
        ck = (batch.key, None if times is None else tuple(times),
              tuple(c.key() for c in batch.target_cameras), batch.targets.shape)
        hit = self._models.get(ck)
        if hit is not None:
            return hit
        c = self.corruption
        n = len(batch.target_cameras)
        h, w = batch.targets.shape[1:3]
        if (h, w) not in self._basis:
            self._basis[(h, w)] = _bias_basis(h, w)
        basis = self._basis[(h, w)]
        bflat = basis.reshape(9, -1)
        dt, biases = self._window_prior(batch)

        use_dt = c.jitter > 0 and times is not None
        mus, ds = [], []
        step = max(c.jitter, 1e-3)
        for cam, t in zip(batch.target_cameras, times or [None] * n):
            if t is None:
                mus.append(self.mean_color(h, w))
                continue
            tc = t + dt
            mus.append(self.render(cam, tc))
            if use_dt:
                ds.append((self.render(cam, tc + step) - self.render(cam, tc - step)) / (2 * step))
        mu = np.stack(mus)
        d = np.stack(ds) if use_dt else None

        cam_keys = list(dict.fromkeys(cam.key() for cam in batch.target_cameras))
        cam_of = np.array([cam_keys.index(cam.key()) for cam in batch.target_cameras])
        prior_bias = np.stack([biases[k] for k in cam_keys])  # (C, 9)
        mean = mu + np.einsum("nb,bhwc->nhwc", prior_bias[cam_of], basis)
        if use_dt:
            mean = mean + dt * d

        # latent layout: [time offset] + 9 bias coefficients per distinct camera
        use_b = c.bias > 0
        nc = len(cam_keys)
        off = int(use_dt)
        dim = off + 9 * nc * int(use_b)
        prec = np.zeros((dim, dim))
        prior_var = np.zeros(dim)
        dflat = d.reshape(n, -1) if use_dt else None
        if use_dt:
            prec[0, 0] = np.einsum("np,np->", dflat, dflat)
            prior_var[0] = (c.prior_scale * c.jitter) ** 2
        if use_b:
            gram = bflat @ bflat.T
            cross = bflat @ dflat.T if use_dt else None  # (9, N)
            for i in range(n):
                j = off + 9 * cam_of[i]
                prec[j:j + 9, j:j + 9] += gram
                if use_dt:
                    prec[0, j:j + 9] += cross[:, i]
                    prec[j:j + 9, 0] += cross[:, i]
            prior_var[off:] = (c.prior_scale * c.bias) ** 2
        model = (mean, d, dflat, prec, prior_var, cam_of, nc, basis, bflat, use_dt, use_b)
        self._models[ck] = model
        if len(self._models) > 64:
            self._models.popitem(last=False)
        return model

    def _posterior_estimate(self, batch, times):
        (mean, d, dflat, prec, prior_var, cam_of, nc, basis, bflat,
         use_dt, use_b) = self._window_model(batch, times)
        if prec.shape[0] == 0:
            return mean
        n = mean.shape[0]
        a = batch.alpha_bar
        s, v = np.sqrt(a), 1.0 - a
        r = (np.asarray(batch.targets, dtype=np.float64) - s * mean).reshape(n, -1)
        off = int(use_dt)
        rhs = np.zeros(prec.shape[0])
        if use_dt:
            rhs[0] = np.einsum("np,np->", dflat, r)
        if use_b:
            br = bflat @ r.T  # (9, N)
            for i in range(n):
                j = off + 9 * cam_of[i]
                rhs[j:j + 9] += br[:, i]
        # posterior mean of the latent offsets under z = s*(mean + J theta) + sqrt(v)*noise
        A = prec * (a / v) + np.diag(1.0 / prior_var)
        theta = np.linalg.solve(A, rhs * (s / v))
        out = mean
        if use_dt:
            out = out + theta[0] * d
        if use_b:
            coeff = theta[off:].reshape(nc, 9)[cam_of]
            out = out + np.einsum("nb,bhwc->nhwc", coeff, basis)
        return out
