"""Pure numpy implementations of the grid kernels.

These are the always-available fallback for the compiled `_fastcore`
extension. Both backends implement the same contracts:

  tri_gather(grid, pts)        grid (X,Y,Z,C) f64, pts (P,3) continuous voxel
                               coordinates in [0, dim-1] -> (P,C)
  tri_gather_vjp(grid, pts, g) -> (grad_grid, grad_pts)
  bone_weight(logits, pts)     logits (X,Y,Z,C), pts (P,K,3), C == K+1
                               -> (P,K) where out[p,k] is channel k of the
                               softmax over C of the interpolated logits
  bone_weight_vjp(...)         -> (grad_logits, grad_pts)

Callers are responsible for clipping coordinates into range.
"""

import numpy as np

_CHUNK = 4096  # bounds the (chunk, K, C) temporaries in bone_weight


def _corners(grid, pts):
    X, Y, Z, _ = grid.shape
    ix = np.minimum(pts[:, 0].astype(np.int64), X - 2)
    iy = np.minimum(pts[:, 1].astype(np.int64), Y - 2)
    iz = np.minimum(pts[:, 2].astype(np.int64), Z - 2)
    ix = np.maximum(ix, 0)
    iy = np.maximum(iy, 0)
    iz = np.maximum(iz, 0)
    fx = pts[:, 0] - ix
    fy = pts[:, 1] - iy
    fz = pts[:, 2] - iz
    return ix, iy, iz, fx, fy, fz


def tri_gather(grid, pts):
    ix, iy, iz, fx, fy, fz = _corners(grid, pts)
    g000 = grid[ix, iy, iz]
    g001 = grid[ix, iy, iz + 1]
    g010 = grid[ix, iy + 1, iz]
    g011 = grid[ix, iy + 1, iz + 1]
    g100 = grid[ix + 1, iy, iz]
    g101 = grid[ix + 1, iy, iz + 1]
    g110 = grid[ix + 1, iy + 1, iz]
    g111 = grid[ix + 1, iy + 1, iz + 1]
    fx, fy, fz = fx[:, None], fy[:, None], fz[:, None]
    c00 = g000 * (1 - fz) + g001 * fz
    c01 = g010 * (1 - fz) + g011 * fz
    c10 = g100 * (1 - fz) + g101 * fz
    c11 = g110 * (1 - fz) + g111 * fz
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fx) + c1 * fx


def tri_gather_vjp(grid, pts, g):
    X, Y, Z, C = grid.shape
    ix, iy, iz, fx, fy, fz = _corners(grid, pts)
    wx0, wx1 = 1 - fx, fx
    wy0, wy1 = 1 - fy, fy
    wz0, wz1 = 1 - fz, fz

    grad_grid = np.zeros_like(grid).reshape(-1, C)
    grad_pts = np.zeros_like(pts)

    # accumulated spatial derivatives: d out / d fx etc., contracted with g
    gx = np.zeros(pts.shape[0])
    gy = np.zeros(pts.shape[0])
    gz = np.zeros(pts.shape[0])

    for dx, wx, sx in ((0, wx0, -1.0), (1, wx1, 1.0)):
        for dy, wy, sy in ((0, wy0, -1.0), (1, wy1, 1.0)):
            for dz, wz, sz in ((0, wz0, -1.0), (1, wz1, 1.0)):
                lin = ((ix + dx) * Y + (iy + dy)) * Z + (iz + dz)
                w = wx * wy * wz
                np.add.at(grad_grid, lin, g * w[:, None])
                vals = grid.reshape(-1, C)[lin]
                dot = np.einsum("pc,pc->p", g, vals)
                gx += dot * sx * wy * wz
                gy += dot * wx * sy * wz
                gz += dot * wx * wy * sz

    grad_pts[:, 0] = gx
    grad_pts[:, 1] = gy
    grad_pts[:, 2] = gz
    return grad_grid.reshape(grid.shape), grad_pts


def _softmax_rows(vals):
    m = vals.max(axis=-1, keepdims=True)
    e = np.exp(vals - m)
    return e / e.sum(axis=-1, keepdims=True)


def bone_weight(logits, pts):
    P, K, _ = pts.shape
    out = np.empty((P, K))
    kk = np.arange(K)
    for lo in range(0, P, _CHUNK):
        hi = min(lo + _CHUNK, P)
        flat = pts[lo:hi].reshape(-1, 3)
        vals = tri_gather(logits, flat).reshape(hi - lo, K, -1)
        sm = _softmax_rows(vals)
        out[lo:hi] = sm[:, kk, kk]
    return out


def bone_weight_vjp(logits, pts, g):
    P, K, _ = pts.shape
    grad_logits = np.zeros_like(logits)
    grad_pts = np.empty_like(pts)
    kk = np.arange(K)
    for lo in range(0, P, _CHUNK):
        hi = min(lo + _CHUNK, P)
        flat = pts[lo:hi].reshape(-1, 3)
        vals = tri_gather(logits, flat).reshape(hi - lo, K, -1)
        sm = _softmax_rows(vals)
        picked = sm[:, kk, kk]                      # (chunk, K)
        # d out[p,k] / d vals[p,k,c] = picked * (1[c==k] - sm[p,k,c])
        gv = -sm * (g[lo:hi] * picked)[:, :, None]
        gv[:, kk, kk] += g[lo:hi] * picked
        gg, gp = tri_gather_vjp(logits, flat, gv.reshape(-1, logits.shape[3]))
        grad_logits += gg
        grad_pts[lo:hi] = gp.reshape(hi - lo, K, 3)
    return grad_logits, grad_pts
