"""Photometric reconstruction loss: weighted L1 plus DSSIM, with its gradient."""

from __future__ import annotations

import numpy as np

from ..metrics import ssim_map

W_L1 = 0.8
W_DSSIM = 0.2


def photometric_loss(render, target, multiplier: float = 1.0, *, w_l1: float = W_L1,
                     w_dssim: float = W_DSSIM):
    """multiplier * (w_l1 * L1 + w_dssim * (1 - SSIM) / 2); returns (loss, d loss / d render).

    SSIM here is the mean of the per-channel local SSIM maps.
    """
    r = np.asarray(render, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    diff = r - t
    l1 = float(np.abs(diff).mean())
    g = w_l1 * np.sign(diff) / diff.size
    loss = w_l1 * l1
    if w_dssim:
        s, ds = ssim_map(r, t, grad=True)
        loss += w_dssim * (1.0 - float(s.mean())) / 2.0
        g = g - (w_dssim / 2.0) * ds
    return multiplier * loss, multiplier * g
