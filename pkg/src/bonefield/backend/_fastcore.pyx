# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled grid kernels: trilinear gather/scatter and the fused per-bone
softmax weight query. Semantics match `reference.py`; see that module for the
contracts."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fmax

cnp.import_array()


cdef inline Py_ssize_t _cell(double u, Py_ssize_t dim, double* frac) nogil:
    cdef Py_ssize_t i = <Py_ssize_t>u
    if i > dim - 2:
        i = dim - 2
    if i < 0:
        i = 0
    frac[0] = u - i
    return i


def tri_gather(double[:, :, :, ::1] grid, double[:, ::1] pts):
    cdef Py_ssize_t P = pts.shape[0]
    cdef Py_ssize_t X = grid.shape[0], Y = grid.shape[1]
    cdef Py_ssize_t Z = grid.shape[2], C = grid.shape[3]
    out_np = np.empty((P, C))
    cdef double[:, ::1] out = out_np
    cdef Py_ssize_t p, c, ix, iy, iz
    cdef double fx, fy, fz
    cdef double c00, c01, c10, c11, c0, c1
    with nogil:
        for p in range(P):
            ix = _cell(pts[p, 0], X, &fx)
            iy = _cell(pts[p, 1], Y, &fy)
            iz = _cell(pts[p, 2], Z, &fz)
            for c in range(C):
                c00 = grid[ix, iy, iz, c] * (1 - fz) + grid[ix, iy, iz + 1, c] * fz
                c01 = grid[ix, iy + 1, iz, c] * (1 - fz) + grid[ix, iy + 1, iz + 1, c] * fz
                c10 = grid[ix + 1, iy, iz, c] * (1 - fz) + grid[ix + 1, iy, iz + 1, c] * fz
                c11 = grid[ix + 1, iy + 1, iz, c] * (1 - fz) + grid[ix + 1, iy + 1, iz + 1, c] * fz
                c0 = c00 * (1 - fy) + c01 * fy
                c1 = c10 * (1 - fy) + c11 * fy
                out[p, c] = c0 * (1 - fx) + c1 * fx
    return out_np


def tri_gather_vjp(double[:, :, :, ::1] grid, double[:, ::1] pts,
                   double[:, ::1] g):
    cdef Py_ssize_t P = pts.shape[0]
    cdef Py_ssize_t X = grid.shape[0], Y = grid.shape[1]
    cdef Py_ssize_t Z = grid.shape[2], C = grid.shape[3]
    grad_grid_np = np.zeros((X, Y, Z, C))
    grad_pts_np = np.zeros((P, 3))
    cdef double[:, :, :, ::1] gg = grad_grid_np
    cdef double[:, ::1] gp = grad_pts_np
    cdef Py_ssize_t p, c, ix, iy, iz, dx, dy, dz
    cdef double fx, fy, fz, wx, wy, wz, sx, sy, sz, w, gc, val, dot
    with nogil:
        for p in range(P):
            ix = _cell(pts[p, 0], X, &fx)
            iy = _cell(pts[p, 1], Y, &fy)
            iz = _cell(pts[p, 2], Z, &fz)
            for dx in range(2):
                wx = fx if dx == 1 else 1 - fx
                sx = 1.0 if dx == 1 else -1.0
                for dy in range(2):
                    wy = fy if dy == 1 else 1 - fy
                    sy = 1.0 if dy == 1 else -1.0
                    for dz in range(2):
                        wz = fz if dz == 1 else 1 - fz
                        sz = 1.0 if dz == 1 else -1.0
                        w = wx * wy * wz
                        dot = 0.0
                        for c in range(C):
                            gc = g[p, c]
                            val = grid[ix + dx, iy + dy, iz + dz, c]
                            gg[ix + dx, iy + dy, iz + dz, c] += gc * w
                            dot += gc * val
                        gp[p, 0] += dot * sx * wy * wz
                        gp[p, 1] += dot * wx * sy * wz
                        gp[p, 2] += dot * wx * wy * sz
    return grad_grid_np, grad_pts_np


def bone_weight(double[:, :, :, ::1] logits, double[:, :, ::1] pts):
    cdef Py_ssize_t P = pts.shape[0], K = pts.shape[1]
    cdef Py_ssize_t X = logits.shape[0], Y = logits.shape[1]
    cdef Py_ssize_t Z = logits.shape[2], C = logits.shape[3]
    out_np = np.empty((P, K))
    cdef double[:, ::1] out = out_np
    row_np = np.empty(C)
    cdef double[::1] row = row_np
    cdef Py_ssize_t p, k, c, ix, iy, iz
    cdef double fx, fy, fz, c00, c01, c10, c11, c0, c1, m, s
    with nogil:
        for p in range(P):
            for k in range(K):
                ix = _cell(pts[p, k, 0], X, &fx)
                iy = _cell(pts[p, k, 1], Y, &fy)
                iz = _cell(pts[p, k, 2], Z, &fz)
                m = -1e300
                for c in range(C):
                    c00 = logits[ix, iy, iz, c] * (1 - fz) + logits[ix, iy, iz + 1, c] * fz
                    c01 = logits[ix, iy + 1, iz, c] * (1 - fz) + logits[ix, iy + 1, iz + 1, c] * fz
                    c10 = logits[ix + 1, iy, iz, c] * (1 - fz) + logits[ix + 1, iy, iz + 1, c] * fz
                    c11 = logits[ix + 1, iy + 1, iz, c] * (1 - fz) + logits[ix + 1, iy + 1, iz + 1, c] * fz
                    c0 = c00 * (1 - fy) + c01 * fy
                    c1 = c10 * (1 - fy) + c11 * fy
                    row[c] = c0 * (1 - fx) + c1 * fx
                    m = fmax(m, row[c])
                s = 0.0
                for c in range(C):
                    row[c] = exp(row[c] - m)
                    s += row[c]
                out[p, k] = row[k] / s
    return out_np


def bone_weight_vjp(double[:, :, :, ::1] logits, double[:, :, ::1] pts,
                    double[:, ::1] g):
    cdef Py_ssize_t P = pts.shape[0], K = pts.shape[1]
    cdef Py_ssize_t X = logits.shape[0], Y = logits.shape[1]
    cdef Py_ssize_t Z = logits.shape[2], C = logits.shape[3]
    grad_logits_np = np.zeros((X, Y, Z, C))
    grad_pts_np = np.zeros((P, K, 3))
    cdef double[:, :, :, ::1] gl = grad_logits_np
    cdef double[:, :, ::1] gp = grad_pts_np
    row_np = np.empty(C)
    gv_np = np.empty(C)
    cdef double[::1] row = row_np
    cdef double[::1] gv = gv_np
    cdef Py_ssize_t p, k, c, ix, iy, iz, dx, dy, dz
    cdef double fx, fy, fz, c00, c01, c10, c11, c0, c1, m, s
    cdef double picked, gk, wx, wy, wz, sx, sy, sz, w, dot, val
    with nogil:
        for p in range(P):
            for k in range(K):
                ix = _cell(pts[p, k, 0], X, &fx)
                iy = _cell(pts[p, k, 1], Y, &fy)
                iz = _cell(pts[p, k, 2], Z, &fz)
                m = -1e300
                for c in range(C):
                    c00 = logits[ix, iy, iz, c] * (1 - fz) + logits[ix, iy, iz + 1, c] * fz
                    c01 = logits[ix, iy + 1, iz, c] * (1 - fz) + logits[ix, iy + 1, iz + 1, c] * fz
                    c10 = logits[ix + 1, iy, iz, c] * (1 - fz) + logits[ix + 1, iy, iz + 1, c] * fz
                    c11 = logits[ix + 1, iy + 1, iz, c] * (1 - fz) + logits[ix + 1, iy + 1, iz + 1, c] * fz
                    c0 = c00 * (1 - fy) + c01 * fy
                    c1 = c10 * (1 - fy) + c11 * fy
                    row[c] = c0 * (1 - fx) + c1 * fx
                    m = fmax(m, row[c])
            # softmax and upstream-through-softmax gradient for this (p, k)
                s = 0.0
                for c in range(C):
                    row[c] = exp(row[c] - m)
                    s += row[c]
                for c in range(C):
                    row[c] /= s
                picked = row[k]
                gk = g[p, k] * picked
                for c in range(C):
                    gv[c] = -gk * row[c]
                gv[k] += gk
                for dx in range(2):
                    wx = fx if dx == 1 else 1 - fx
                    sx = 1.0 if dx == 1 else -1.0
                    for dy in range(2):
                        wy = fy if dy == 1 else 1 - fy
                        sy = 1.0 if dy == 1 else -1.0
                        for dz in range(2):
                            wz = fz if dz == 1 else 1 - fz
                            sz = 1.0 if dz == 1 else -1.0
                            w = wx * wy * wz
                            dot = 0.0
                            for c in range(C):
                                val = logits[ix + dx, iy + dy, iz + dz, c]
                                gl[ix + dx, iy + dy, iz + dz, c] += gv[c] * w
                                dot += gv[c] * val
                            gp[p, k, 0] += dot * sx * wy * wz
                            gp[p, k, 1] += dot * wx * sy * wz
                            gp[p, k, 2] += dot * wx * wy * sz
    return grad_logits_np, grad_pts_np
