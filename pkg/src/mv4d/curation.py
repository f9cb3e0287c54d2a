"""Training-data curation: the fixed-viewpoint video filter and the source mixture."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PATCH = 10
STATIC_THRESHOLD = 0.05

DEFAULT_SOURCES = (
    ("objaverse", 2.5),
    ("kubric", 2.5),
    ("re10k", 1.0),
    ("mvimgnet", 1.0),
    ("co3d", 1.0),
    ("mq4k", 1.0),
    ("static_view_video", 5.0),
    ("augmented_co3d", 1.0),
    ("augmented_video", 1.0),
)


def corner_patches(frame: np.ndarray, size: int = PATCH) -> list[np.ndarray]:
    h, w = frame.shape[:2]
    return [frame[:size, :size], frame[:size, w - size:], frame[h - size:, :size],
            frame[h - size:, w - size:]]


def corner_motion(video: Sequence[np.ndarray], size: int = PATCH) -> np.ndarray:
    """Per corner: mean over time of the RMS difference between consecutive patches."""
    frames = [np.asarray(f, dtype=np.float64) for f in video]
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if any(f.shape != frames[0].shape for f in frames):
        raise ValueError("frames differ in shape")
    if min(frames[0].shape[:2]) < size:
        raise ValueError(f"frames smaller than the {size}x{size} corner patch")
    dist = np.zeros((len(frames) - 1, 4))
    prev = corner_patches(frames[0], size)
    for i, f in enumerate(frames[1:]):
        cur = corner_patches(f, size)
        dist[i] = [np.sqrt(np.mean((a - b) ** 2)) for a, b in zip(cur, prev)]
        prev = cur
    return dist.mean(axis=0)


def static_view_filter(video: Sequence[np.ndarray], threshold: float = STATIC_THRESHOLD,
                       size: int = PATCH) -> bool:
    """True when all four corner patches stay (nearly) constant over time."""
    return bool(corner_motion(video, size).max() < threshold)


@dataclass(frozen=True)
class MixtureSpec:
    sources: tuple = DEFAULT_SOURCES
    single_image_prob: float = 0.01

    def __post_init__(self):
        if not self.sources:
            raise ValueError("mixture needs at least one source")
        names = [n for n, _ in self.sources]
        if len(set(names)) != len(names):
            raise ValueError("duplicate source names")
        if any(w <= 0 for _, w in self.sources):
            raise ValueError("weights must be > 0")
        if not 0.0 <= self.single_image_prob <= 1.0:
            raise ValueError("single_image_prob must lie in [0, 1]")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.sources]

    @property
    def probabilities(self) -> np.ndarray:
        w = np.array([w for _, w in self.sources], dtype=np.float64)
        return w / w.sum()


@dataclass(frozen=True)
class BatchDescriptor:
    source: str
    degenerate_single_image: bool = False


def mixture_sample(spec: MixtureSpec, seed: int | np.random.Generator,
                   n: int | None = None):
    """Draw one descriptor (or ``n`` of them) from the training mixture."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    count = 1 if n is None else int(n)
    idx = rng.choice(len(spec.sources), size=count, p=spec.probabilities)
    degenerate = rng.random(count) < spec.single_image_prob
    out = [BatchDescriptor(spec.names[i], bool(d)) for i, d in zip(idx, degenerate)]
    return out[0] if n is None else out
