"""Anchor-camera selection and novel-view camera paths."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Camera

PATH_KINDS = ("reuse_input", "forward_spiral", "inout_spiral", "orbit")


@dataclass(frozen=True)
class TrajectoryPlan:
    kind: str
    anchor_indices: tuple
    novel_cameras: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        idx = tuple(int(i) for i in self.anchor_indices)
        if len(set(idx)) != len(idx):
            raise ValueError("anchor indices must be distinct")
        object.__setattr__(self, "anchor_indices", idx)
        object.__setattr__(self, "novel_cameras", tuple(self.novel_cameras))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "anchor_indices": list(self.anchor_indices),
                "novel_cameras": [c.to_dict() for c in self.novel_cameras]}

    @classmethod
    def from_dict(cls, d) -> "TrajectoryPlan":
        return cls(d["kind"], d["anchor_indices"],
                   tuple(Camera.from_dict(c) for c in d.get("novel_cameras", ())))


def farthest_point_sample(cameras: Sequence[Camera], k: int) -> list[int]:
    """Greedy farthest-point selection over camera centres, seeded at index 0.

    Ties go to the lowest index.
    """
    centers = np.array([c.center for c in cameras])
    n_distinct = len(np.unique(centers, axis=0))
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct camera centres")
    chosen = [0]
    dmin = np.linalg.norm(centers - centers[0], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dmin))  # argmax returns the first maximum
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(centers - centers[nxt], axis=1))
    return chosen


def rotation_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def is_stationary(cameras: Sequence[Camera], scene_diagonal: float,
                  dist_frac: float = 1e-3, max_angle_deg: float = 1.0) -> bool:
    if len(cameras) == 0:
        raise ValueError("empty camera list")
    centers = np.array([c.center for c in cameras])
    dists = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    if dists.max() >= dist_frac * scene_diagonal:
        return False
    limit = np.deg2rad(max_angle_deg)
    rots = [c.rotation for c in cameras]
    for i in range(len(rots)):
        for j in range(i + 1, len(rots)):
            if rotation_angle(rots[i], rots[j]) >= limit:
                return False
    return True


def make_path(kind: str, *, center=(0.0, 0.0, 0.0), radius: float = 3.0, turns: float = 1.0,
              count: int = 8, elevation: float = 0.0, spiral_amp: float = 0.3,
              base: Sequence[Camera] | None = None, fx: float = 70.0,
              width: int = 64, height: int = 64, up=(0.0, 1.0, 0.0)) -> list[Camera]:
    """Novel-view camera paths.

    ``orbit``: horizontal circle (world y is up) at height ``elevation`` above
    ``center``, evenly spaced over ``turns`` revolutions, looking at the
    centre. ``inout_spiral``: the orbit with radius modulated as
    ``radius * (1 + spiral_amp * sin(azimuth))``. ``forward_spiral``: a helix
    of radius ``spiral_amp`` around the centres of ``base`` (an input
    trajectory), looking ``radius`` ahead along the base path.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if kind in ("orbit", "inout_spiral") and radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    kw = dict(fx=fx, width=width, height=height, up=up)
    az = 2 * np.pi * turns * np.arange(count) / count
    if kind == "orbit":
        return [Camera.look_at(center + [radius * np.sin(a), elevation, -radius * np.cos(a)],
                               center, **kw) for a in az]
    if kind == "inout_spiral":
        rs = radius * (1.0 + spiral_amp * np.sin(az))
        if np.any(rs <= 0):
            raise ValueError("spiral_amp too large: radius becomes non-positive")
        return [Camera.look_at(center + [r * np.sin(a), elevation, -r * np.cos(a)], center, **kw)
                for r, a in zip(rs, az)]
    if kind == "forward_spiral":
        if not base:
            raise ValueError("forward_spiral needs the input trajectory as base")
        centers = np.array([c.center for c in base])
        fwd = np.array([c.forward for c in base])
        s = np.linspace(0, len(base) - 1, count)
        out = []
        for i, si in enumerate(s):
            lo = int(np.floor(si))
            hi = min(lo + 1, len(base) - 1)
            w = si - lo
            p = (1 - w) * centers[lo] + w * centers[hi]
            f = (1 - w) * fwd[lo] + w * fwd[hi]
            f /= np.linalg.norm(f)
            r_ax = np.cross(f, up)
            if np.linalg.norm(r_ax) < 1e-9:
                r_ax = np.cross(f, [1.0, 0.0, 0.0])
            r_ax /= np.linalg.norm(r_ax)
            u_ax = np.cross(r_ax, f)
            ang = 2 * np.pi * turns * i / count
            eye = p + spiral_amp * (np.cos(ang) * r_ax + np.sin(ang) * u_ax)
            out.append(Camera.look_at(eye, p + radius * f, **kw))
        return out
    if kind == "reuse_input":
        return list(base or [])
    raise ValueError(f"unknown path kind {kind!r}")


def plan_trajectory(cameras: Sequence[Camera], k: int, kind: str = "reuse_input",
                    **path_kw) -> TrajectoryPlan:
    anchors = farthest_point_sample(cameras, k)
    novel = [] if kind == "reuse_input" else make_path(kind, base=cameras, **path_kw)
    return TrajectoryPlan(kind, anchors, novel)
