"""Cameras, views, view grids and the on-disk grid format.

Conventions used everywhere in the package:

* ``world_from_camera`` maps camera coordinates to world coordinates.
* Camera frame is right-handed with +z forward, +x right, +y down the image.
* Pixel ``(u, v)`` refers to column ``u`` and row ``v``; integer coordinates
  are pixel centres, so image pixel ``img[v, u]`` sits at ``(u, v)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

GRID_FORMAT_VERSION = 1


class BehindCameraError(ValueError):
    pass


class OrderingError(ValueError):
    pass


class GridFormatError(ValueError):
    pass


class MissingCellError(GridFormatError):
    pass


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Camera:
    world_from_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        m = _frozen(self.world_from_camera)
        if m.shape != (4, 4):
            raise ValueError(f"world_from_camera must be 4x4, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("rotation block is not a proper orthonormal matrix")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("last row of world_from_camera must be [0, 0, 0, 1]")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        object.__setattr__(self, "world_from_camera", m)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, fx=70.0, fy=None,
                width=64, height=64, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` whose optical axis passes through ``target``.

        ``up`` is the approximate world direction that should appear at the
        top of the image.
        """
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        n = np.linalg.norm(right)
        if n < 1e-12:
            # looking straight along up; pick any perpendicular
            alt = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
            right = np.cross(forward, alt)
            n = np.linalg.norm(right)
        right /= n
        down = np.cross(forward, right)
        m = np.eye(4)
        m[:3, 0] = right
        m[:3, 1] = down
        m[:3, 2] = forward
        m[:3, 3] = eye
        fy = fx if fy is None else fy
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls(m, fx, fy, cx, cy, width, height)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return self.world_from_camera[:3, 2]

    @property
    def focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def to_camera(self, points) -> np.ndarray:
        """World points (..., 3) to camera coordinates."""
        p = np.asarray(points, dtype=np.float64) - self.center
        return p @ self.rotation

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray directions for every pixel, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy,
                      np.ones_like(uu)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation.T

    def key(self) -> bytes:
        """Hashable identity of the full camera record."""
        head = np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height])
        return self.world_from_camera.tobytes() + head.tobytes()

    def same_as(self, other: "Camera") -> bool:
        return self.key() == other.key()

    def to_dict(self) -> dict:
        return {
            "world_from_camera": self.world_from_camera.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["world_from_camera"]), d["fx"], d["fy"], d["cx"], d["cy"],
                   d["width"], d["height"])


def project(point, camera: Camera):
    """Pinhole projection of a world point. Returns ``((u, v), depth)``."""
    x, y, z = camera.to_camera(point)
    if z <= 1e-8:
        raise BehindCameraError(f"point at depth {z:.3g} is not in front of the camera")
    return (camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy), z


def unproject(uv, depth: float, camera: Camera) -> np.ndarray:
    u, v = uv
    pc = np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])
    return camera.rotation @ pc + camera.center


def normalize_times(raw_times: Sequence[float]) -> list[float]:
    t = np.asarray(raw_times, dtype=np.float64)
    if t.size == 0:
        raise ValueError("empty time list")
    if np.any(np.diff(t) < 0):
        raise OrderingError("timestamps must be non-decreasing")
    span = t[-1] - t[0]
    if span == 0:
        return [0.0] * t.size
    out = (t - t[0]) / span
    out[-1] = 1.0
    return out.tolist()


@dataclass(frozen=True, eq=False)
class View:
    image: np.ndarray
    camera: Camera
    time: float
    source: str = "input"

    def __post_init__(self):
        img = _frozen(self.image)
        if img.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(f"image shape {img.shape} does not match camera "
                             f"{self.camera.height}x{self.camera.width}")
        if img.size and (img.min() < 0 or img.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"time {self.time} outside [0, 1]")
        if self.source not in ("input", "generated"):
            raise ValueError(f"unknown view source {self.source!r}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "time", float(self.time))


class Fill(IntEnum):
    EMPTY = 0
    GENERATED = 1
    INPUT = 2


@dataclass(frozen=True, eq=False)
class ViewGrid:
    """K stationary cameras (rows) by L timestamps (columns)."""

    cameras: tuple
    times: np.ndarray
    images: np.ndarray
    fill: np.ndarray
    raw_times: np.ndarray = field(default=None)

    def __post_init__(self):
        cams = tuple(self.cameras)
        times = _frozen(self.times)
        k, l = len(cams), times.size
        if k == 0 or l == 0:
            raise ValueError("grid needs at least one row and one column")
        if np.any(np.diff(times) <= 0):
            raise OrderingError("grid timestamps must be strictly increasing")
        h, w = cams[0].height, cams[0].width
        if any((c.height, c.width) != (h, w) for c in cams):
            raise ValueError("all grid cameras must share one image size")
        keys = [c.key() for c in cams]
        if len(set(keys)) != k:
            raise ValueError("grid row cameras must be pairwise distinct")
        images = _frozen(self.images)
        if images.shape != (k, l, h, w, 3):
            raise ValueError(f"images shape {images.shape} != {(k, l, h, w, 3)}")
        fill = _frozen(self.fill, dtype=np.int8)
        if fill.shape != (k, l):
            raise ValueError("fill state shape mismatch")
        raw = times if self.raw_times is None else _frozen(self.raw_times)
        if raw.shape != times.shape:
            raise ValueError("raw_times length mismatch")
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "fill", fill)
        object.__setattr__(self, "raw_times", raw)

    @classmethod
    def empty(cls, cameras, times, raw_times=None) -> "ViewGrid":
        cams = tuple(cameras)
        h, w = cams[0].height, cams[0].width
        return cls(cams, times, np.zeros((len(cams), len(times), h, w, 3)),
                   np.zeros((len(cams), len(times)), dtype=np.int8), raw_times)

    @property
    def K(self) -> int:
        return len(self.cameras)

    @property
    def L(self) -> int:
        return self.times.size

    @property
    def shape(self):
        return self.images.shape[2:4]

    @property
    def complete(self) -> bool:
        return bool(np.all(self.fill != Fill.EMPTY))

    def cell(self, k: int, j: int) -> View:
        return View(self.images[k, j], self.cameras[k], self.times[j],
                    "input" if self.fill[k, j] == Fill.INPUT else "generated")

    def replace(self, images=None, fill=None) -> "ViewGrid":
        return ViewGrid(self.cameras, self.times,
                        self.images if images is None else images,
                        self.fill if fill is None else fill, self.raw_times)

    def equals(self, other: "ViewGrid", float_tol: float = 0.0) -> bool:
        if self.K != other.K or self.L != other.L:
            return False
        for a, b in zip(self.cameras, other.cameras):
            if not (np.allclose(a.world_from_camera, b.world_from_camera, rtol=0, atol=float_tol)
                    and np.allclose([a.fx, a.fy, a.cx, a.cy], [b.fx, b.fy, b.cx, b.cy],
                                    rtol=0, atol=float_tol)
                    and (a.width, a.height) == (b.width, b.height)):
                return False
        return (np.allclose(self.times, other.times, rtol=0, atol=float_tol)
                and np.allclose(self.raw_times, other.raw_times, rtol=0, atol=float_tol)
                and np.array_equal(self.fill, other.fill)
                and np.array_equal(self.images, other.images))


# ---------------------------------------------------------------- grid io

def quantize16(image: np.ndarray) -> np.ndarray:
    """Snap an image onto the 16-bit lattice that PNG storage preserves."""
    return np.round(np.clip(image, 0, 1) * 65535.0) / 65535.0


def write_png16(path, image: np.ndarray) -> None:
    import cv2

    q = np.round(np.clip(image, 0, 1) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), q[..., ::-1]):
        raise OSError(f"could not write {path}")


def read_png16(path) -> np.ndarray:
    import cv2

    a = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if a is None:
        raise OSError(f"could not read {path}")
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=-1)
    a = a[..., :3][..., ::-1]
    scale = 65535.0 if a.dtype == np.uint16 else 255.0
    return a.astype(np.float64) / scale


def cell_path(root, k: int, j: int) -> str:
    return os.path.join(root, f"cam{k:03d}", f"t{j:04d}.png")


def save_grid(grid: ViewGrid, path) -> str:
    os.makedirs(path, exist_ok=True)
    h, w = grid.shape
    manifest = {
        "version": GRID_FORMAT_VERSION,
        "image_size": [int(h), int(w)],
        "cameras": [c.to_dict() for c in grid.cameras],
        "raw_times": grid.raw_times.tolist(),
        "normalized_times": grid.times.tolist(),
        "fill_state": grid.fill.astype(int).tolist(),
    }
    for k in range(grid.K):
        os.makedirs(os.path.join(path, f"cam{k:03d}"), exist_ok=True)
        for j in range(grid.L):
            if grid.fill[k, j] != Fill.EMPTY:
                write_png16(cell_path(path, k, j), grid.images[k, j])
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return path


def load_grid(path) -> ViewGrid:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise GridFormatError(f"no manifest.json in {path}")
    with open(mpath) as f:
        m = json.load(f)
    cams = [Camera.from_dict(d) for d in m["cameras"]]
    h, w = m["image_size"]
    fill = np.array(m["fill_state"], dtype=np.int8)
    k, l = len(cams), len(m["normalized_times"])
    if fill.shape != (k, l):
        raise GridFormatError("fill_state shape disagrees with cameras/times")
    images = np.zeros((k, l, h, w, 3))
    for i in range(k):
        for j in range(l):
            if fill[i, j] == Fill.EMPTY:
                continue
            p = cell_path(path, i, j)
            if not os.path.exists(p):
                raise MissingCellError(f"cell ({i}, {j}) is marked filled but {p} is missing")
            img = read_png16(p)
            if img.shape != (h, w, 3):
                raise GridFormatError(f"{p} has shape {img.shape}, manifest says {(h, w, 3)}")
            images[i, j] = img
    return ViewGrid(cams, m["normalized_times"], images, fill, m["raw_times"])


def save_views(views: Sequence[View], path) -> str:
    """Flat view list: ``path/views.json`` plus ``path/vNNNNN.png``."""
    os.makedirs(path, exist_ok=True)
    records = []
    for i, v in enumerate(views):
        name = f"v{i:05d}.png"
        write_png16(os.path.join(path, name), v.image)
        records.append({"file": name, "camera": v.camera.to_dict(), "time": v.time,
                        "source": v.source})
    with open(os.path.join(path, "views.json"), "w") as f:
        json.dump({"version": GRID_FORMAT_VERSION, "views": records}, f, indent=1)
    return path


def load_views(path) -> list[View]:
    with open(os.path.join(path, "views.json")) as f:
        m = json.load(f)
    return [View(read_png16(os.path.join(path, r["file"])), Camera.from_dict(r["camera"]),
                 r["time"], r.get("source", "input")) for r in m["views"]]
