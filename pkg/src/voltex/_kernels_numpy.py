"""Pure-numpy voxel kernels, the fallback when numba is unavailable.

These define the reference semantics. Accumulation order and integer
mixing match the numba flavour exactly, so the two backends return
bit-identical arrays.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 2.0 ** -53

# cap on the materialized window copies used by median3d
_MEDIAN_CHUNK_ELEMS = 4 * 1024 * 1024


def conv1d(vol, w, axis):
    """Clamp-boundary 1D convolution along one axis of a 3D array."""
    k = w.shape[0]
    r = (k - 1) // 2
    n = vol.shape[axis]
    pad = [(0, 0), (0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(vol, pad, mode="edge")
    sl = [slice(None)] * 3
    sl[axis] = slice(0, n)
    out = w[0] * padded[tuple(sl)]
    for i in range(1, k):
        sl[axis] = slice(i, i + n)
        out += w[i] * padded[tuple(sl)]
    return np.asfortranarray(out)


def median3d(vol, size):
    """Cubic-window median with symmetric-reflect boundary.

    Same offsets/rank convention as the numba flavour. Windows are
    materialized in z-chunks to bound memory.
    """
    nx, ny, nz = vol.shape
    lo = (size - 1) // 2
    hi = size // 2
    n = size * size * size
    rank = n // 2
    padded = np.pad(vol, ((lo, hi), (lo, hi), (lo, hi)), mode="symmetric")
    windows = sliding_window_view(padded, (size, size, size))
    out = np.empty((nx, ny, nz), dtype=np.float64, order="F")
    step = max(1, _MEDIAN_CHUNK_ELEMS // max(1, nx * ny * n))
    for z0 in range(0, nz, step):
        z1 = min(nz, z0 + step)
        chunk = windows[:, :, z0:z1].reshape(nx, ny, z1 - z0, n)
        out[:, :, z0:z1] = np.partition(chunk, rank, axis=-1)[..., rank]
    return out


def _uniforms(shape, seed):
    """Per-voxel uniforms in [0, 1) from the counter-based mix."""
    nvox = shape[0] * shape[1] * shape[2]
    idx = np.arange(nvox, dtype=np.uint64).reshape(shape, order="F")
    h = np.uint64(seed) ^ (idx * _GOLDEN)
    h = (h ^ (h >> np.uint64(30))) * _MIX1
    h = (h ^ (h >> np.uint64(27))) * _MIX2
    h = h ^ (h >> np.uint64(31))
    return (h >> np.uint64(11)) * _INV_2_53


def salt_pepper_paint(vol, prob, seed, black, white):
    u = _uniforms(vol.shape, seed)
    out = vol.copy(order="F")
    out[u < prob] = black
    out[u > 1.0 - prob] = white
    return out
