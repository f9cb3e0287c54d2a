"""Canonical Gaussian cloud, model rendering and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..core import Camera
from .deform import DeformationField
from .rasterize import BACKGROUND, rasterize

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("positions", "log_scales", "opacity_logits", "colors")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1 - 1e-12)
    return np.log(p / (1 - p))


@dataclass
class GaussianCloud:
    """Isotropic Gaussians in canonical space, stored as unconstrained parameters."""

    positions: np.ndarray       # (N, 3)
    log_scales: np.ndarray      # (N,)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3) RGB

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite {name}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @classmethod
    def random(cls, n: int, bounds, rng: np.random.Generator, *, scale: float | None = None,
               opacity: float = 0.1) -> "GaussianCloud":
        """Uniform random points inside ``bounds`` with grey colour."""
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        pos = rng.uniform(lo, hi, (n, 3))
        if scale is None:
            # roughly the spacing of n points filling the box
            scale = float(np.prod(hi - lo) / max(n, 1)) ** (1 / 3) * 0.5
        return cls(pos, np.full(n, np.log(scale)), np.full(n, float(logit(opacity))),
                   rng.uniform(0.3, 0.7, (n, 3)))

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, k)[idx] for k in PARAM_NAMES))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, k).copy() for k in PARAM_NAMES))


def render_model(cloud: GaussianCloud, field: DeformationField | None, camera: Camera, t: float,
                 *, background=BACKGROUND, alpha_min: float = 0.0, backend=None) -> np.ndarray:
    """Rasterize the cloud after moving it with ``field`` to time ``t``."""
    pos = cloud.positions if field is None else field.deform(cloud.positions, t)
    img, _ = rasterize(pos, cloud.scales, cloud.opacities, cloud.colors, camera,
                       background=background, alpha_min=alpha_min, backend=backend)
    return img


def save_checkpoint(path, cloud: GaussianCloud, field: DeformationField | None,
                    meta: dict | None = None) -> None:
    arrays = {f"cloud_{k}": v for k, v in cloud.params().items()}
    if field is not None:
        arrays.update({f"field_{k}": v for k, v in field.state().items()})
    header = {"version": CHECKPOINT_VERSION, "has_field": field is not None, "meta": meta or {}}
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (cloud, field or None, meta)."""
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        cloud = GaussianCloud(*(z[f"cloud_{k}"] for k in PARAM_NAMES))
        field = None
        if header["has_field"]:
            field = DeformationField.from_state(
                {k[len("field_"):]: z[k] for k in z.files if k.startswith("field_")})
    return cloud, field, header["meta"]
