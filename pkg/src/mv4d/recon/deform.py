"""Hex-plane deformation field: position offsets from six factorised feature planes."""

from __future__ import annotations

import numpy as np

# coordinate pairs over (x, y, z, t); the last three planes carry time
PLANES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")


class DeformationField:
    """Six (R, R, F) planes, combined by elementwise product, then a linear head.

    Spatial planes start uniform in [0.1, 0.5] and time planes at 1, so the
    product is initially time-independent; the head starts at zero, giving a
    zero offset everywhere.
    """

    def __init__(self, bounds, resolution: int = 32, features: int = 8, seed: int = 0):
        if resolution < 2:
            raise ValueError("resolution must be >= 2")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        if np.any(hi <= lo):
            raise ValueError("bounds must satisfy lo < hi")
        self.lo, self.hi = lo, hi
        self.R, self.F = int(resolution), int(features)
        rng = np.random.default_rng(seed)
        planes = np.empty((6, self.R, self.R, self.F))
        planes[:3] = rng.uniform(0.1, 0.5, (3, self.R, self.R, self.F))
        planes[3:] = 1.0
        self.params = {"planes": planes, "head_w": np.zeros((self.F, 3)), "head_b": np.zeros(3)}

    # ------------------------------------------------------------ evaluation
    def normalized(self, positions, t: float):
        """(N, 4) coordinates in [0, 1] and a mask of which were not clamped."""
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        c = np.empty((p.shape[0], 4))
        c[:, :3] = (p - self.lo) / (self.hi - self.lo)
        c[:, 3] = t
        inside = (c >= 0.0) & (c <= 1.0)
        return np.clip(c, 0.0, 1.0), inside

    def _sample(self, plane, ca, cb):
        g = self.R - 1
        xa, xb = ca * g, cb * g
        ia = np.minimum(np.floor(xa).astype(int), g - 1)
        ib = np.minimum(np.floor(xb).astype(int), g - 1)
        fa, fb = (xa - ia)[:, None], (xb - ib)[:, None]
        p00, p10 = plane[ia, ib], plane[ia + 1, ib]
        p01, p11 = plane[ia, ib + 1], plane[ia + 1, ib + 1]
        val = (1 - fa) * (1 - fb) * p00 + fa * (1 - fb) * p10 + (1 - fa) * fb * p01 + fa * fb * p11
        d_a = ((1 - fb) * (p10 - p00) + fb * (p11 - p01)) * g
        d_b = ((1 - fa) * (p01 - p00) + fa * (p11 - p10)) * g
        return val, d_a, d_b, (ia, ib, fa, fb)

    def forward(self, positions, t: float):
        """Offsets (N, 3) plus a cache for :meth:`backward`."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} outside [0, 1]")
        c, inside = self.normalized(positions, t)
        vals, samples = [], []
        for k, (a, b) in enumerate(PLANES):
            val, d_a, d_b, idx = self._sample(self.params["planes"][k], c[:, a], c[:, b])
            vals.append(val)
            samples.append((d_a, d_b, idx))
        vals = np.stack(vals)  # (6, N, F)
        feat = np.prod(vals, axis=0)
        out = feat @ self.params["head_w"] + self.params["head_b"]
        return out, (vals, feat, samples, inside)

    def deform(self, positions, t: float) -> np.ndarray:
        return np.asarray(positions, dtype=np.float64) + self.forward(positions, t)[0]

    def backward(self, cache, grad_offsets):
        """Gradients of sum(grad_offsets * offsets): (param grads, d/d positions)."""
        vals, feat, samples, inside = cache
        g = np.asarray(grad_offsets, dtype=np.float64)
        n = feat.shape[0]
        grads = {"head_w": feat.T @ g, "head_b": g.sum(axis=0),
                 "planes": np.zeros_like(self.params["planes"])}
        d_feat = g @ self.params["head_w"].T  # (N, F)
        # product rule with prefix/suffix products, safe when a factor is zero
        pre = np.ones_like(vals)
        suf = np.ones_like(vals)
        for k in range(1, 6):
            pre[k] = pre[k - 1] * vals[k - 1]
            suf[5 - k] = suf[6 - k] * vals[6 - k]
        d_pos = np.zeros((n, 3))
        R, F = self.R, self.F
        for k, (a, b) in enumerate(PLANES):
            d_val = d_feat * pre[k] * suf[k]
            d_a, d_b, (ia, ib, fa, fb) = samples[k]
            cells = np.concatenate([(ia + i) * R + ib + j for i, j in ((0, 0), (1, 0), (0, 1), (1, 1))])
            w = np.concatenate([(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb])
            slots = (cells[:, None] * F + np.arange(F)).ravel()
            grads["planes"][k] = np.bincount(slots, weights=(w * np.tile(d_val, (4, 1))).ravel(),
                                             minlength=R * R * F).reshape(R, R, F)
            for axis, d in ((a, d_a), (b, d_b)):
                if axis < 3:
                    d_pos[:, axis] += (d_val * d).sum(axis=1) * inside[:, axis] / (
                        self.hi[axis] - self.lo[axis])
        return grads, d_pos

    # ------------------------------------------------------------ io
    def state(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, **self.params}

    @classmethod
    def from_state(cls, st: dict) -> "DeformationField":
        planes = np.asarray(st["planes"])
        f = cls((st["lo"], st["hi"]), planes.shape[1], planes.shape[3])
        f.params = {"planes": planes.copy(), "head_w": np.asarray(st["head_w"]).copy(),
                    "head_b": np.asarray(st["head_b"]).copy()}
        return f
