"""Procedural dynamic scenes and an analytic ray-cast renderer.

Scenes are a handful of spheres and axis-aligned cubes floating in front of a
soft vertical background gradient. Everything is a closed-form function of
(scene, camera, time), so renders are exactly reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import Camera, View

LIGHT_DIR = np.array([0.4, -0.8, -0.45]) / np.linalg.norm([0.4, -0.8, -0.45])
AMBIENT = 0.35
DIFFUSE = 0.65
MOTION_TYPES = ("static", "linear", "orbit", "bounce")
# fraction of a full revolution an orbiting primitive covers over t in [0, 1]
ORBIT_TURNS = 0.5


@dataclass(frozen=True)
class Motion:
    type: str
    amplitude: tuple
    phase: float = 0.0

    def offset(self, t):
        """Displacement from the base position at time(s) ``t``; shape (..., 3)."""
        t = np.asarray(t, dtype=np.float64)[..., None]
        a = np.asarray(self.amplitude, dtype=np.float64)
        if self.type == "static":
            return np.zeros(t.shape[:-1] + (3,))
        if self.type == "linear":
            return a * t
        if self.type == "orbit":
            th = 2 * np.pi * ORBIT_TURNS * t + self.phase
            th0 = self.phase
            # starts at the base position and sweeps an ellipse in the xz plane
            return np.concatenate([a[0] * (np.cos(th) - np.cos(th0)),
                                   a[1] * (np.sin(th) - np.sin(th0)),
                                   a[2] * (np.sin(th) - np.sin(th0))], axis=-1)
        if self.type == "bounce":
            return a * np.abs(np.sin(np.pi * t + self.phase))
        raise ValueError(f"unknown motion type {self.type!r}")


@dataclass(frozen=True)
class Primitive:
    shape: str
    base_position: tuple
    size: float
    albedo: tuple
    motion: Motion

    def position(self, t):
        return np.asarray(self.base_position) + self.motion.offset(t)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple
    background: dict = field(default_factory=lambda: {
        "top": (0.53, 0.53, 0.55), "bottom": (0.47, 0.48, 0.46)})
    bounds: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))

    def __post_init__(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        ts = np.linspace(0, 1, 257)
        for p in self.primitives:
            pos = p.position(ts)
            if np.any(pos < lo) or np.any(pos > hi):
                raise ValueError("primitive leaves scene bounds")

    @property
    def is_static(self) -> bool:
        return all(p.motion.type == "static" for p in self.primitives)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.bounds[0]) + np.asarray(self.bounds[1]))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(np.subtract(self.bounds[1], self.bounds[0])))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = tuple(
            Primitive(p["shape"], tuple(p["base_position"]), p["size"], tuple(p["albedo"]),
                      Motion(p["motion"]["type"], tuple(p["motion"]["amplitude"]),
                             p["motion"]["phase"]))
            for p in d["primitives"])
        bg = {k: tuple(v) for k, v in d["background"].items()}
        return cls(d["seed"], prims, bg, tuple(tuple(b) for b in d["bounds"]))


def motion_bounds(primitives: Sequence[Primitive], pad: float = 0.05):
    ts = np.linspace(0, 1, 1001)
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for p in primitives:
        pos = p.position(ts)
        lo = np.minimum(lo, pos.min(0) - p.size - pad)
        hi = np.maximum(hi, pos.max(0) + p.size + pad)
    return tuple(lo.tolist()), tuple(hi.tolist())


def generate_scene(seed: int, n_primitives: int = 3, *, shapes=("sphere", "box"),
                   extent: float = 0.7, amplitude: float = 0.35) -> SceneSpec:
    if n_primitives < 1:
        raise ValueError("n_primitives must be >= 1")
    rng = np.random.default_rng(seed)
    phases = rng.permutation(n_primitives) * (2 * np.pi / n_primitives) + rng.uniform(0, 0.5)
    prims = []
    for i in range(n_primitives):
        shape = str(rng.choice(shapes))
        size = float(rng.uniform(0.18, 0.32))
        base = rng.uniform(-extent, extent, 3)
        hue = rng.uniform(0, 1)
        albedo = tuple(float(x) for x in _hue_to_rgb(hue) * 0.7 + 0.25)
        if i == 0:
            mtype = str(rng.choice(MOTION_TYPES[1:]))
        else:
            mtype = str(rng.choice(MOTION_TYPES, p=[0.25, 0.25, 0.25, 0.25]))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        amp = direction * amplitude
        if mtype == "orbit":
            amp = np.abs(amp) * 0.6 + 0.1
        elif mtype == "bounce":
            amp = np.array([0.0, -abs(amp[1]) - 0.1, 0.0])
        prims.append(Primitive(shape, tuple(base.tolist()), size, albedo,
                               Motion(mtype, tuple(amp.tolist()), float(phases[i]))))
    return SceneSpec(int(seed), tuple(prims), bounds=motion_bounds(prims))


def _hue_to_rgb(h: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


# ---------------------------------------------------------------- rendering

def _sphere_hit(o, d, c, r):
    oc = o - c
    b = d @ oc
    disc = b * b - (oc @ oc - r * r)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(t > 1e-6, t, -b + sq)
    hit &= t > 1e-6
    p = o + t[:, None] * d
    n = (p - c) / r
    return np.where(hit, t, np.inf), n


def _box_hit(o, d, c, h):
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    inv = 1.0 / d
    t0 = (c - h - o) * inv
    t1 = (c + h - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    hit = (tn <= tf) & (tf > 1e-6)
    t = np.where(tn > 1e-6, tn, tf)
    axis = np.argmax(tmin, axis=1)
    n = np.zeros_like(d)
    rows = np.arange(d.shape[0])
    n[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, t, np.inf), n


def _bound_radius(p: Primitive) -> float:
    return p.size * (np.sqrt(3.0) if p.shape == "box" else 1.0)


def _candidates(o, d, c, radius):
    """Indices of rays passing within ``radius`` of ``c`` in front of ``o``."""
    oc = c - o
    b = d @ oc
    perp2 = oc @ oc - b * b
    return np.nonzero((perp2 <= radius * radius * (1 + 1e-9)) & (b > -radius))[0]


def background(scene: SceneSpec, dirs: np.ndarray) -> np.ndarray:
    top = np.asarray(scene.background["top"])
    bottom = np.asarray(scene.background["bottom"])
    w = 0.5 * (1.0 + dirs[..., 1:2])
    return bottom + (top - bottom) * w


def _shade_rays(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray, time: float) -> np.ndarray:
    depth = np.full(dirs.shape[0], np.inf)
    color = background(scene, dirs)
    for p in scene.primitives:
        c = p.position(time)
        idx = _candidates(origin, dirs, c, _bound_radius(p))
        if idx.size == 0:
            continue
        sub = dirs[idx]
        if p.shape == "sphere":
            t, n = _sphere_hit(origin, sub, c, p.size)
        elif p.shape == "box":
            t, n = _box_hit(origin, sub, c, p.size)
        else:
            raise ValueError(f"unknown shape {p.shape!r}")
        closer = t < depth[idx]
        if not closer.any():
            continue
        lam = np.clip(n[closer] @ -LIGHT_DIR, 0.0, None)
        sel = idx[closer]
        color[sel] = np.asarray(p.albedo) * (AMBIENT + DIFFUSE * lam)[:, None]
        depth[sel] = t[closer]
    return color


_RAY_CACHE: dict = {}


def _camera_rays(camera: Camera, s: int) -> np.ndarray:
    key = (camera.key(), s)
    d = _RAY_CACHE.get(key)
    if d is None:
        offs = (np.arange(s) + 0.5) / s - 0.5
        u = (np.arange(camera.width)[None, :, None] + offs[None, None, :])
        v = (np.arange(camera.height)[:, None, None] + offs[None, None, :])
        uu = np.broadcast_to(u[:, :, None, :], (camera.height, camera.width, s, s))
        vv = np.broadcast_to(v[:, :, :, None], (camera.height, camera.width, s, s))
        d = np.stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy,
                      np.ones(uu.shape)], axis=-1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d = d @ camera.rotation.T
        d.setflags(write=False)
        if len(_RAY_CACHE) > 256:
            _RAY_CACHE.clear()
        _RAY_CACHE[key] = d
    return d


def render(scene: SceneSpec, camera: Camera, time: float, supersample: int = 2) -> np.ndarray:
    """Render ``scene`` at ``time`` through ``camera``; returns (H, W, 3) in [0, 1].

    ``supersample`` fires a fixed s x s grid of rays per pixel and box-filters
    them, which keeps the image a smooth-ish function of sub-pixel motion.
    """
    if not 0.0 <= time <= 1.0:
        raise ValueError(f"time {time} outside [0, 1]")
    s = int(supersample)
    d = _camera_rays(camera, s)
    col = _shade_rays(scene, camera.center, d, time)
    img = col.reshape(camera.height, camera.width, s * s, 3).mean(axis=2)
    return np.clip(img, 0.0, 1.0)


def object_mask(scene: SceneSpec, camera: Camera, time: float, index: int | None = None) -> np.ndarray:
    """Boolean (H, W) mask of pixel centres hitting any primitive (or just ``index``)."""
    d = camera.ray_directions().reshape(-1, 3)
    depth = np.full(d.shape[0], np.inf)
    owner = np.full(d.shape[0], -1)
    for i, p in enumerate(scene.primitives):
        c = p.position(time)
        hit = _sphere_hit if p.shape == "sphere" else _box_hit
        t, _ = hit(camera.center, d, c, p.size)
        closer = t < depth
        depth[closer] = t[closer]
        owner[closer] = i
    m = owner >= 0 if index is None else owner == index
    return m.reshape(camera.height, camera.width)


def render_input_video(scene: SceneSpec, trajectory: Sequence[Camera], times: Sequence[float],
                       supersample: int = 2) -> list[View]:
    if len(trajectory) != len(times):
        raise ValueError(f"{len(trajectory)} cameras but {len(times)} timestamps")
    return [View(render(scene, c, t, supersample), c, t) for c, t in zip(trajectory, times)]
