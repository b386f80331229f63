"""Compiled ray-march kernels (numba). render.py falls back to a pure-numpy
path when numba is unavailable; semantics are identical.

Accumulation is sequential within each ray (deterministic) and parallel
across pixels. The workqueue threading layer keeps the kernels fork-safe
under the CLI's process pool.
"""

from __future__ import annotations

import math
import os

import numpy as np

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap

    prange = range


@njit(inline="always", cache=True)
def _tl_scalar(grid, x, y, z):
    """Trilinear read in voxel-center coordinates, zero beyond the lattice."""
    nx, ny, nz = grid.shape
    ix = int(math.floor(x))
    iy = int(math.floor(y))
    iz = int(math.floor(z))
    fx = x - ix
    fy = y - iy
    fz = z - iz
    s = 0.0
    for a in range(2):
        jx = ix + a
        if jx < 0 or jx >= nx:
            continue
        wx = fx if a == 1 else 1.0 - fx
        for b in range(2):
            jy = iy + b
            if jy < 0 or jy >= ny:
                continue
            wy = fy if b == 1 else 1.0 - fy
            for c in range(2):
                jz = iz + c
                if jz < 0 or jz >= nz:
                    continue
                wz = fz if c == 1 else 1.0 - fz
                s += wx * wy * wz * grid[jx, jy, jz]
    return s


@njit(inline="always", cache=True)
def _tl_vec_add(chan, x, y, z, w, out, p):
    """out[p] += w * trilinear(chan) with the same padding rules."""
    nx, ny, nz, nc = chan.shape
    ix = int(math.floor(x))
    iy = int(math.floor(y))
    iz = int(math.floor(z))
    fx = x - ix
    fy = y - iy
    fz = z - iz
    for a in range(2):
        jx = ix + a
        if jx < 0 or jx >= nx:
            continue
        wx = fx if a == 1 else 1.0 - fx
        for b in range(2):
            jy = iy + b
            if jy < 0 or jy >= ny:
                continue
            wy = fy if b == 1 else 1.0 - fy
            for c in range(2):
                jz = iz + c
                if jz < 0 or jz >= nz:
                    continue
                wz = fz if c == 1 else 1.0 - fz
                ww = w * wx * wy * wz
                for k in range(nc):
                    out[p, k] += ww * chan[jx, jy, jz, k]


@njit(parallel=True, cache=True)
def march_density(density, pmin, inv_h, origins, dirs, t0, t1, n):
    npx = origins.shape[0]
    nx, ny, nz = density.shape
    mask = np.zeros(npx)
    depth = np.zeros(npx)
    tfinal = np.ones(npx)
    for p in prange(npx):
        seg = t1[p] - t0[p]
        if seg <= 0.0:
            continue
        delta = seg / n
        trans = 1.0
        accw = 0.0
        accwt = 0.0
        for i in range(n):
            t = t0[p] + (i + 0.5) * delta
            qx = (origins[p, 0] + dirs[p, 0] * t - pmin[0]) * inv_h[0]
            qy = (origins[p, 1] + dirs[p, 1] * t - pmin[1]) * inv_h[1]
            qz = (origins[p, 2] + dirs[p, 2] * t - pmin[2]) * inv_h[2]
            if 0.0 <= qx <= nx and 0.0 <= qy <= ny and 0.0 <= qz <= nz:
                sigma = _tl_scalar(density, qx - 0.5, qy - 0.5, qz - 0.5)
            else:
                sigma = 0.0
            alpha = 1.0 - math.exp(-sigma * delta)
            w = trans * alpha
            accw += w
            accwt += w * t
            trans *= 1.0 - alpha
        mask[p] = accw
        tfinal[p] = trans
        depth[p] = accwt / accw if accw > 1e-12 else 0.0
    return mask, depth, tfinal


@njit(parallel=True, cache=True)
def march_channel(density, chan, pmin, inv_h, origins, dirs, t0, t1, n):
    npx = origins.shape[0]
    nx, ny, nz = density.shape
    nc = chan.shape[3]
    mask = np.zeros(npx)
    depth = np.zeros(npx)
    tfinal = np.ones(npx)
    acc = np.zeros((npx, nc))
    for p in prange(npx):
        seg = t1[p] - t0[p]
        if seg <= 0.0:
            continue
        delta = seg / n
        trans = 1.0
        accw = 0.0
        accwt = 0.0
        for i in range(n):
            t = t0[p] + (i + 0.5) * delta
            qx = (origins[p, 0] + dirs[p, 0] * t - pmin[0]) * inv_h[0]
            qy = (origins[p, 1] + dirs[p, 1] * t - pmin[1]) * inv_h[1]
            qz = (origins[p, 2] + dirs[p, 2] * t - pmin[2]) * inv_h[2]
            inside = 0.0 <= qx <= nx and 0.0 <= qy <= ny and 0.0 <= qz <= nz
            sigma = _tl_scalar(density, qx - 0.5, qy - 0.5, qz - 0.5) if inside else 0.0
            alpha = 1.0 - math.exp(-sigma * delta)
            w = trans * alpha
            if w > 0.0:
                _tl_vec_add(chan, qx - 0.5, qy - 0.5, qz - 0.5, w, acc, p)
            accw += w
            accwt += w * t
            trans *= 1.0 - alpha
        mask[p] = accw
        tfinal[p] = trans
        depth[p] = accwt / accw if accw > 1e-12 else 0.0
    return mask, depth, tfinal, acc


@njit(parallel=True, cache=True)
def march_nocs(density, bmin, binv, pmin, inv_h, origins, dirs, t0, t1, n):
    """Like march_channel but the integrand is the clamped affine NOCS value."""
    npx = origins.shape[0]
    nx, ny, nz = density.shape
    mask = np.zeros(npx)
    depth = np.zeros(npx)
    tfinal = np.ones(npx)
    acc = np.zeros((npx, 3))
    for p in prange(npx):
        seg = t1[p] - t0[p]
        if seg <= 0.0:
            continue
        delta = seg / n
        trans = 1.0
        accw = 0.0
        accwt = 0.0
        for i in range(n):
            t = t0[p] + (i + 0.5) * delta
            px = origins[p, 0] + dirs[p, 0] * t
            py = origins[p, 1] + dirs[p, 1] * t
            pz = origins[p, 2] + dirs[p, 2] * t
            qx = (px - pmin[0]) * inv_h[0]
            qy = (py - pmin[1]) * inv_h[1]
            qz = (pz - pmin[2]) * inv_h[2]
            inside = 0.0 <= qx <= nx and 0.0 <= qy <= ny and 0.0 <= qz <= nz
            sigma = _tl_scalar(density, qx - 0.5, qy - 0.5, qz - 0.5) if inside else 0.0
            alpha = 1.0 - math.exp(-sigma * delta)
            w = trans * alpha
            if w > 0.0:
                vx = (px - bmin[0]) * binv[0]
                vy = (py - bmin[1]) * binv[1]
                vz = (pz - bmin[2]) * binv[2]
                acc[p, 0] += w * min(max(vx, 0.0), 1.0)
                acc[p, 1] += w * min(max(vy, 0.0), 1.0)
                acc[p, 2] += w * min(max(vz, 0.0), 1.0)
            accw += w
            accwt += w * t
            trans *= 1.0 - alpha
        mask[p] = accw
        tfinal[p] = trans
        depth[p] = accwt / accw if accw > 1e-12 else 0.0
    return mask, depth, tfinal, acc
