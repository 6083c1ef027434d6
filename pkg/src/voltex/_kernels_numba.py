"""Numba-jitted voxel kernels. See _kernels_numpy for the reference
semantics; the two modules must stay bit-for-bit interchangeable."""

import numpy as np
from numba import njit, prange

# splitmix64 finalizer constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 2.0 ** -53


@njit(cache=True, parallel=True)
def _conv_x(vol, w):
    nx, ny, nz = vol.shape
    k = w.shape[0]
    r = (k - 1) // 2
    out = np.empty_like(vol)
    for z in prange(nz):
        for y in range(ny):
            for x in range(nx):
                acc = 0.0
                for i in range(k):
                    xx = x + i - r
                    if xx < 0:
                        xx = 0
                    elif xx >= nx:
                        xx = nx - 1
                    acc += w[i] * vol[xx, y, z]
                out[x, y, z] = acc
    return out


@njit(cache=True, parallel=True)
def _conv_y(vol, w):
    nx, ny, nz = vol.shape
    k = w.shape[0]
    r = (k - 1) // 2
    out = np.empty_like(vol)
    for z in prange(nz):
        for y in range(ny):
            for x in range(nx):
                acc = 0.0
                for i in range(k):
                    yy = y + i - r
                    if yy < 0:
                        yy = 0
                    elif yy >= ny:
                        yy = ny - 1
                    acc += w[i] * vol[x, yy, z]
                out[x, y, z] = acc
    return out


@njit(cache=True, parallel=True)
def _conv_z(vol, w):
    nx, ny, nz = vol.shape
    k = w.shape[0]
    r = (k - 1) // 2
    out = np.empty_like(vol)
    for z in prange(nz):
        for y in range(ny):
            for x in range(nx):
                acc = 0.0
                for i in range(k):
                    zz = z + i - r
                    if zz < 0:
                        zz = 0
                    elif zz >= nz:
                        zz = nz - 1
                    acc += w[i] * vol[x, y, zz]
                out[x, y, z] = acc
    return out


def conv1d(vol, w, axis):
    """Clamp-boundary 1D convolution along one axis of a 3D array."""
    if axis == 0:
        return _conv_x(vol, w)
    if axis == 1:
        return _conv_y(vol, w)
    return _conv_z(vol, w)


@njit(cache=True, parallel=True)
def median3d(vol, size):
    """Cubic-window median with symmetric-reflect boundary.

    Per-axis window offsets are [-(size-1)//2, +size//2]; the output is
    the element at 0-based rank n//2 of the sorted window (n = size**3).
    """
    nx, ny, nz = vol.shape
    lo = (size - 1) // 2
    hi = size // 2
    n = size * size * size
    rank = n // 2
    out = np.empty_like(vol)
    for z in prange(nz):
        buf = np.empty(n, np.float64)
        for y in range(ny):
            for x in range(nx):
                m = 0
                for dz in range(-lo, hi + 1):
                    zz = z + dz
                    while zz < 0 or zz >= nz:
                        if zz < 0:
                            zz = -1 - zz
                        else:
                            zz = 2 * nz - 1 - zz
                    for dy in range(-lo, hi + 1):
                        yy = y + dy
                        while yy < 0 or yy >= ny:
                            if yy < 0:
                                yy = -1 - yy
                            else:
                                yy = 2 * ny - 1 - yy
                        for dx in range(-lo, hi + 1):
                            xx = x + dx
                            while xx < 0 or xx >= nx:
                                if xx < 0:
                                    xx = -1 - xx
                                else:
                                    xx = 2 * nx - 1 - xx
                            buf[m] = vol[xx, yy, zz]
                            m += 1
                out[x, y, z] = np.partition(buf, rank)[rank]
    return out


@njit(cache=True, parallel=True)
def salt_pepper_paint(vol, prob, seed, black, white):
    """Counter-based salt-and-pepper: the uniform draw for a voxel is a
    pure function of (seed, x-fastest linear index), so output does not
    depend on evaluation order or thread count."""
    nx, ny, nz = vol.shape
    out = np.empty_like(vol)
    for z in prange(nz):
        for y in range(ny):
            base = np.uint64(nx) * (np.uint64(y) + np.uint64(ny) * np.uint64(z))
            for x in range(nx):
                idx = np.uint64(x) + base
                h = seed ^ (idx * _GOLDEN)
                h = (h ^ (h >> np.uint64(30))) * _MIX1
                h = (h ^ (h >> np.uint64(27))) * _MIX2
                h = h ^ (h >> np.uint64(31))
                u = (h >> np.uint64(11)) * _INV_2_53
                v = vol[x, y, z]
                if u < prob:
                    v = black
                elif u > 1.0 - prob:
                    v = white
                out[x, y, z] = v
    return out
