"""Pure NumPy splatting kernel; same contract as the compiled ``_raster``.

Gaussians arrive already projected and sorted front to back: screen centre
``(u, v)``, footprint ``sig`` in pixels, opacity ``op`` and colour ``col``.
"""

import numpy as np

ALPHA_MAX = 0.99
TILE = 8
_CHUNK = 1 << 22  # max Gaussian x pixel entries per dense block


def _blocks(u, v, sig, op, h, w, alpha_min):
    """Yield (pixel indices, Gaussian indices) pairs covering the image.

    Without truncation every block sees every Gaussian; with it, 8x8 tiles
    see only the Gaussians whose cut-off footprint reaches them.
    """
    g = u.shape[0]
    if alpha_min <= 0:
        n = h * w
        step = max(1, _CHUNK // max(g, 1))
        every = np.arange(g)
        for s in range(0, n, step):
            yield np.arange(s, min(s + step, n)), every
        return
    keep = op >= alpha_min
    r = np.where(keep, sig * np.sqrt(2.0 * np.log(np.where(keep, op, alpha_min) / alpha_min)), 0)
    x0, x1 = np.floor((u - r) / TILE), np.floor((u + r) / TILE)
    y0, y1 = np.floor((v - r) / TILE), np.floor((v + r) / TILE)
    for ty in range((h + TILE - 1) // TILE):
        for tx in range((w + TILE - 1) // TILE):
            ids = np.nonzero(keep & (x0 <= tx) & (x1 >= tx) & (y0 <= ty) & (y1 >= ty))[0]
            ys = np.arange(ty * TILE, min(ty * TILE + TILE, h))
            xs = np.arange(tx * TILE, min(tx * TILE + TILE, w))
            yield (ys[:, None] * w + xs[None, :]).ravel(), ids


def _alphas(u, v, sig, op, px, py, alpha_min):
    dx = px[None, :] - u[:, None]
    dy = py[None, :] - v[:, None]
    inv2 = 1.0 / (sig * sig)
    q = (dx * dx + dy * dy) * inv2[:, None]
    raw = op[:, None] * np.exp(-0.5 * q)
    a = np.minimum(raw, ALPHA_MAX)
    live = raw <= ALPHA_MAX
    if alpha_min > 0:
        keep = raw >= alpha_min
        a = np.where(keep, a, 0.0)
        live &= keep
    return a, live, dx, dy, q


def _transmittance(a):
    t = np.cumprod(1.0 - a, axis=0)
    excl = np.empty_like(t)
    excl[0] = 1.0
    excl[1:] = t[:-1]
    return excl, t[-1]


def forward(u, v, sig, op, col, height, width, bg, alpha_min=0.0):
    """Composite; returns (image (H, W, 3), final transmittance (H, W))."""
    g = u.shape[0]
    img = np.empty((height * width, 3))
    tf = np.empty(height * width)
    ys, xs = np.divmod(np.arange(height * width), width)
    if g == 0:
        img[:] = bg
        tf[:] = 1.0
        return img.reshape(height, width, 3), tf.reshape(height, width)
    for pix, ids in _blocks(u, v, sig, op, height, width, alpha_min):
        if ids.size == 0:
            img[pix] = bg
            tf[pix] = 1.0
            continue
        a, _, _, _, _ = _alphas(u[ids], v[ids], sig[ids], op[ids], xs[pix].astype(float),
                                ys[pix].astype(float), alpha_min)
        t, t_last = _transmittance(a)
        w = a * t
        img[pix] = w.T @ col[ids] + t_last[:, None] * bg
        tf[pix] = t_last
    return img.reshape(height, width, 3), tf.reshape(height, width)


def backward(u, v, sig, op, col, height, width, bg, grad_image, alpha_min=0.0):
    """Gradients of sum(grad_image * image) w.r.t. u, v, sig, op, col."""
    g = u.shape[0]
    du, dv, dsig, dop = (np.zeros(g) for _ in range(4))
    dcol = np.zeros((g, 3))
    if g == 0:
        return du, dv, dsig, dop, dcol
    gimg = grad_image.reshape(-1, 3)
    ys, xs = np.divmod(np.arange(height * width), width)
    for pix, ids in _blocks(u, v, sig, op, height, width, alpha_min):
        if ids.size == 0:
            continue
        px, py = xs[pix].astype(float), ys[pix].astype(float)
        a, live, dx, dy, q = _alphas(u[ids], v[ids], sig[ids], op[ids], px, py, alpha_min)
        t, t_last = _transmittance(a)
        gp = gimg[pix]
        w = a * t
        dcol[ids] += w @ gp
        cg = col[ids] @ gp.T
        ws = w * cg
        after = np.cumsum(ws[::-1], axis=0)[::-1]
        behind = np.empty_like(after)
        behind[:-1] = after[1:]
        behind[-1] = 0.0
        behind += (t_last * (gp @ bg))[None, :]
        da = t * cg - behind / (1.0 - a)
        da = np.where(live, da, 0.0)
        gauss = np.exp(-0.5 * q)
        dop[ids] += (da * gauss).sum(axis=1)
        k = da * a / (sig[ids] * sig[ids])[:, None]
        du[ids] += (k * dx).sum(axis=1)
        dv[ids] += (k * dy).sum(axis=1)
        dsig[ids] += (da * a * q).sum(axis=1) / sig[ids]
    return du, dv, dsig, dop, dcol
