# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled splatting kernel; mirrors ``_raster_py`` exactly.

Pixels are processed per 8x8 tile; each tile composites only the Gaussians
whose truncated footprint touches it (all Gaussians when alpha_min == 0).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, log, floor, ceil, INFINITY

cnp.import_array()

cdef enum:
    TILE = 8
cdef double ALPHA_MAX = 0.99


cdef int _bin(const double[::1] u, const double[::1] v, const double[::1] sig,
              const double[::1] op, double alpha_min, int height, int width,
              int[::1] offsets) noexcept nogil:
    """Count tile lists (CSR layout, depth order kept). Returns total entries."""
    cdef int g = u.shape[0]
    cdef int tw = (width + TILE - 1) // TILE
    cdef int th = (height + TILE - 1) // TILE
    cdef int ntiles = tw * th
    cdef int i, tx, ty, t, x0, x1, y0, y1, n = 0
    cdef double r
    for t in range(ntiles + 1):
        offsets[t] = 0
    # count
    for i in range(g):
        if alpha_min > 0:
            if op[i] < alpha_min:
                continue
            r = sig[i] * sqrt(2.0 * log(op[i] / alpha_min))
            x0 = <int>floor((u[i] - r) / TILE)
            x1 = <int>floor((u[i] + r) / TILE)
            y0 = <int>floor((v[i] - r) / TILE)
            y1 = <int>floor((v[i] + r) / TILE)
            if x0 < 0: x0 = 0
            if y0 < 0: y0 = 0
            if x1 > tw - 1: x1 = tw - 1
            if y1 > th - 1: y1 = th - 1
        else:
            x0 = 0; y0 = 0; x1 = tw - 1; y1 = th - 1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                offsets[ty * tw + tx + 1] += 1
    for t in range(ntiles):
        offsets[t + 1] += offsets[t]
    n = offsets[ntiles]
    return n


cdef void _fill(const double[::1] u, const double[::1] v, const double[::1] sig,
                const double[::1] op, double alpha_min, int height, int width,
                int[::1] offsets, int[::1] cursor, int[::1] ids) noexcept nogil:
    cdef int g = u.shape[0]
    cdef int tw = (width + TILE - 1) // TILE
    cdef int th = (height + TILE - 1) // TILE
    cdef int i, tx, ty, t, x0, x1, y0, y1
    cdef double r
    for t in range(tw * th):
        cursor[t] = offsets[t]
    for i in range(g):
        if alpha_min > 0:
            if op[i] < alpha_min:
                continue
            r = sig[i] * sqrt(2.0 * log(op[i] / alpha_min))
            x0 = <int>floor((u[i] - r) / TILE)
            x1 = <int>floor((u[i] + r) / TILE)
            y0 = <int>floor((v[i] - r) / TILE)
            y1 = <int>floor((v[i] + r) / TILE)
            if x0 < 0: x0 = 0
            if y0 < 0: y0 = 0
            if x1 > tw - 1: x1 = tw - 1
            if y1 > th - 1: y1 = th - 1
        else:
            x0 = 0; y0 = 0; x1 = tw - 1; y1 = th - 1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                t = ty * tw + tx
                ids[cursor[t]] = i
                cursor[t] += 1


def _qcut(op, sig, double alpha_min):
    """Squared-distance bound (in sigma units) beyond which alpha < alpha_min.

    Padded slightly so the exact alpha test below stays the deciding one.
    """
    if alpha_min <= 0:
        return np.full(op.shape[0], INFINITY)
    with np.errstate(divide="ignore"):
        r = 2.0 * np.log(np.maximum(op, 1e-300) / alpha_min)
    return r * (1.0 + 1e-9) + 1e-9


def _tiles(const double[::1] u, const double[::1] v, const double[::1] sig,
           const double[::1] op, double alpha_min, int height, int width):
    cdef int tw = (width + TILE - 1) // TILE
    cdef int th = (height + TILE - 1) // TILE
    offsets = np.zeros(tw * th + 1, dtype=np.intc)
    cursor = np.zeros(tw * th, dtype=np.intc)
    cdef int[::1] off_v = offsets
    cdef int n
    with nogil:
        n = _bin(u, v, sig, op, alpha_min, height, width, off_v)
    ids = np.empty(max(n, 1), dtype=np.intc)
    cdef int[::1] ids_v = ids
    cdef int[::1] cur_v = cursor
    with nogil:
        _fill(u, v, sig, op, alpha_min, height, width, off_v, cur_v, ids_v)
    return offsets, ids


def forward(u, v, sig, op, col, int height, int width, bg, double alpha_min=0.0):
    u = np.ascontiguousarray(u, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    sig = np.ascontiguousarray(sig, dtype=np.float64)
    op = np.ascontiguousarray(op, dtype=np.float64)
    col = np.ascontiguousarray(col, dtype=np.float64).reshape(-1, 3)
    bgv = np.ascontiguousarray(bg, dtype=np.float64).reshape(3)
    img = np.empty((height, width, 3))
    tf = np.empty((height, width))
    offsets, ids = _tiles(u, v, sig, op, alpha_min, height, width)
    cdef const double[::1] uu = u, vv = v, ss = sig, oo = op, bb = bgv
    cdef const double[:, ::1] cc = col
    cdef double[:, :, ::1] out = img
    cdef double[:, ::1] tout = tf
    cdef const int[::1] off = offsets, gid = ids
    cdef int tw = (width + TILE - 1) // TILE
    cdef int th = (height + TILE - 1) // TILE
    cdef int tx, ty, px, py, k, i, t
    cdef double T, a, raw, dx, dy, q, r0, r1, r2
    qcut_arr = _qcut(op, sig, alpha_min)
    cdef const double[::1] qc = qcut_arr
    with nogil:
        for ty in range(th):
            for tx in range(tw):
                t = ty * tw + tx
                for py in range(ty * TILE, min(ty * TILE + TILE, height)):
                    for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                        T = 1.0
                        r0 = 0.0; r1 = 0.0; r2 = 0.0
                        for k in range(off[t], off[t + 1]):
                            i = gid[k]
                            dx = px - uu[i]
                            dy = py - vv[i]
                            q = (dx * dx + dy * dy) / (ss[i] * ss[i])
                            if q > qc[i]:
                                continue
                            raw = oo[i] * exp(-0.5 * q)
                            if alpha_min > 0 and raw < alpha_min:
                                continue
                            a = raw if raw < ALPHA_MAX else ALPHA_MAX
                            r0 += cc[i, 0] * a * T
                            r1 += cc[i, 1] * a * T
                            r2 += cc[i, 2] * a * T
                            T *= 1.0 - a
                        out[py, px, 0] = r0 + T * bb[0]
                        out[py, px, 1] = r1 + T * bb[1]
                        out[py, px, 2] = r2 + T * bb[2]
                        tout[py, px] = T
    return img, tf


def backward(u, v, sig, op, col, int height, int width, bg, grad_image, double alpha_min=0.0):
    u = np.ascontiguousarray(u, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    sig = np.ascontiguousarray(sig, dtype=np.float64)
    op = np.ascontiguousarray(op, dtype=np.float64)
    col = np.ascontiguousarray(col, dtype=np.float64).reshape(-1, 3)
    bgv = np.ascontiguousarray(bg, dtype=np.float64).reshape(3)
    gimg = np.ascontiguousarray(grad_image, dtype=np.float64).reshape(height, width, 3)
    cdef int g = u.shape[0]
    du = np.zeros(g); dv = np.zeros(g); dsig = np.zeros(g); dop = np.zeros(g)
    dcol = np.zeros((g, 3))
    offsets, ids = _tiles(u, v, sig, op, alpha_min, height, width)
    cdef const double[::1] uu = u, vv = v, ss = sig, oo = op, bb = bgv
    cdef const double[:, ::1] cc = col
    cdef const double[:, :, ::1] gg = gimg
    cdef double[::1] gu = du, gv = dv, gs = dsig, go = dop
    cdef double[:, ::1] gc = dcol
    cdef const int[::1] off = offsets, gid = ids
    cdef int tw = (width + TILE - 1) // TILE
    cdef int th = (height + TILE - 1) // TILE
    cdef int tx, ty, px, py, k, i, t, e, longest = 1
    cdef double T, a, raw, dx, dy, q, gauss, g0, g1, g2, cg, behind, da, w, inv2
    for t in range(tw * th):
        longest = max(longest, off[t + 1] - off[t])
    # per-entry transmittance in front, raw alpha (-1 when skipped) and kernel value
    tbuf_arr = np.empty(longest)
    rbuf_arr = np.empty(longest)
    gbuf_arr = np.empty(longest)
    cdef double[::1] tbuf = tbuf_arr, rbuf = rbuf_arr, gbuf = gbuf_arr
    qcut_arr = _qcut(op, sig, alpha_min)
    cdef const double[::1] qc = qcut_arr
    with nogil:
        for ty in range(th):
            for tx in range(tw):
                t = ty * tw + tx
                for py in range(ty * TILE, min(ty * TILE + TILE, height)):
                    for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                        g0 = gg[py, px, 0]; g1 = gg[py, px, 1]; g2 = gg[py, px, 2]
                        T = 1.0
                        for k in range(off[t], off[t + 1]):
                            i = gid[k]
                            e = k - off[t]
                            rbuf[e] = -1.0
                            dx = px - uu[i]
                            dy = py - vv[i]
                            q = (dx * dx + dy * dy) / (ss[i] * ss[i])
                            if q > qc[i]:
                                continue
                            gauss = exp(-0.5 * q)
                            raw = oo[i] * gauss
                            if alpha_min > 0 and raw < alpha_min:
                                continue
                            rbuf[e] = raw
                            gbuf[e] = gauss
                            tbuf[e] = T
                            a = raw if raw < ALPHA_MAX else ALPHA_MAX
                            T *= 1.0 - a
                        behind = T * (bb[0] * g0 + bb[1] * g1 + bb[2] * g2)
                        for k in range(off[t + 1] - 1, off[t] - 1, -1):
                            e = k - off[t]
                            raw = rbuf[e]
                            if raw < 0:
                                continue
                            i = gid[k]
                            gauss = gbuf[e]
                            T = tbuf[e]
                            dx = px - uu[i]
                            dy = py - vv[i]
                            inv2 = 1.0 / (ss[i] * ss[i])
                            q = (dx * dx + dy * dy) * inv2
                            a = raw if raw < ALPHA_MAX else ALPHA_MAX
                            w = a * T
                            cg = cc[i, 0] * g0 + cc[i, 1] * g1 + cc[i, 2] * g2
                            gc[i, 0] += w * g0
                            gc[i, 1] += w * g1
                            gc[i, 2] += w * g2
                            if raw <= ALPHA_MAX:
                                da = T * cg - behind / (1.0 - a)
                                go[i] += da * gauss
                                gu[i] += da * a * dx * inv2
                                gv[i] += da * a * dy * inv2
                                gs[i] += da * a * q / ss[i]
                            behind += w * cg
    return du, dv, dsig, dop, dcol
