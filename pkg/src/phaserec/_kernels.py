"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PHASEREC_DISABLE_NUMBA`` is not set to a truthy value.  Both
paths perform the same floating point operations in the same order, so
their outputs are bit-identical; the flag only changes speed.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("PHASEREC_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by PHASEREC_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def axis_coords(n_in: int, n_out: int):
    """Source positions for half-pixel-centred resampling of one axis."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


# --------------------------------------------------------------------------
# numpy implementations (always available; also the reference for tests)
# --------------------------------------------------------------------------


def _lerp_np(a, b, f):
    v = a + (b - a) * f
    # same comparisons as the scalar kernel (np.clip differs on signed zeros)
    lo = np.where(a < b, a, b)
    hi = np.where(a < b, b, a)
    return np.where(v < lo, lo, np.where(v > hi, hi, v))


def resize_bilinear_np(img, r0, r1, fr, c0, c1, fc):
    img = np.asarray(img, dtype=np.float64)
    horiz = _lerp_np(img[:, c0], img[:, c1], fc[None, :])
    return _lerp_np(horiz[r0, :], horiz[r1, :], fr[:, None])


def region_histograms_np(img, bins: int, grid: int):
    rows, cols = img.shape
    out = np.zeros((grid * grid, bins), dtype=np.float64)
    for gr in range(grid):
        ra, rb = gr * rows // grid, (gr + 1) * rows // grid
        for gc in range(grid):
            ca, cb = gc * cols // grid, (gc + 1) * cols // grid
            v = img[ra:rb, ca:cb].ravel()
            v = v[~np.isnan(v)]
            if v.size == 0:
                continue
            idx = np.clip(np.floor(v * bins), 0, bins - 1).astype(np.int64)
            counts = np.bincount(idx, minlength=bins).astype(np.float64)
            out[gr * grid + gc] = counts / v.size
    return out


def splitmix64_next(state: int):
    """One SplitMix64 step on Python ints: returns (new_state, output)."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return state, z ^ (z >> 31)


def sample_without_replacement_py(n: int, k: int, seed: int):
    pool = list(range(n))
    state = seed & MASK64
    for i in range(k):
        bound = n - i
        threshold = (-bound) % (1 << 64) % bound
        while True:
            state, x = splitmix64_next(state)
            if x >= threshold:
                break
        j = i + x % bound
        pool[i], pool[j] = pool[j], pool[i]
    return np.sort(np.asarray(pool[:k], dtype=np.int64))


def bootstrap_counts_np(codes, idx, n_cells: int):
    n_boot = idx.shape[0]
    flat = (np.arange(n_boot, dtype=np.int64)[:, None] * n_cells + codes[idx]).ravel()
    return np.bincount(flat, minlength=n_boot * n_cells).reshape(n_boot, n_cells)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _lerp_nb(a, b, f):
        v = a + (b - a) * f
        lo = a if a < b else b
        hi = b if a < b else a
        if v < lo:
            v = lo
        elif v > hi:
            v = hi
        return v

    @njit(cache=True)
    def resize_bilinear_nb(img, r0, r1, fr, c0, c1, fc):
        n_rows = r0.shape[0]
        n_cols = c0.shape[0]
        out = np.empty((n_rows, n_cols), dtype=np.float64)
        for i in range(n_rows):
            ya = r0[i]
            yb = r1[i]
            fy = fr[i]
            for j in range(n_cols):
                xa = c0[j]
                xb = c1[j]
                fx = fc[j]
                top = _lerp_nb(img[ya, xa], img[ya, xb], fx)
                bot = _lerp_nb(img[yb, xa], img[yb, xb], fx)
                out[i, j] = _lerp_nb(top, bot, fy)
        return out

    @njit(cache=True)
    def region_histograms_nb(img, bins, grid):
        rows, cols = img.shape
        out = np.zeros((grid * grid, bins), dtype=np.float64)
        for gr in range(grid):
            ra = gr * rows // grid
            rb = (gr + 1) * rows // grid
            for gc in range(grid):
                ca = gc * cols // grid
                cb = (gc + 1) * cols // grid
                reg = gr * grid + gc
                count = 0
                for r in range(ra, rb):
                    for c in range(ca, cb):
                        v = img[r, c]
                        if v != v:
                            continue
                        b = np.floor(v * bins)
                        if b > bins - 1:
                            b = bins - 1
                        elif b < 0:
                            b = 0
                        out[reg, int(b)] += 1.0
                        count += 1
                if count > 0:
                    for b in range(bins):
                        out[reg, b] = out[reg, b] / count
        return out

    @njit(cache=True)
    def _splitmix_nb(state):
        state = state + np.uint64(GOLDEN_GAMMA)
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return state, z ^ (z >> np.uint64(31))

    @njit(cache=True)
    def sample_without_replacement_nb(n, k, seed):
        pool = np.arange(n)
        state = np.uint64(seed)
        for i in range(k):
            bound = np.uint64(n - i)
            threshold = (np.uint64(0) - bound) % bound
            x = np.uint64(0)
            while True:
                state, x = _splitmix_nb(state)
                if x >= threshold:
                    break
            j = i + np.int64(x % bound)
            tmp = pool[i]
            pool[i] = pool[j]
            pool[j] = tmp
        out = pool[:k].copy()
        out.sort()
        return out

    @njit(cache=True)
    def bootstrap_counts_nb(codes, idx, n_cells):
        n_boot, n = idx.shape
        out = np.zeros((n_boot, n_cells), dtype=np.int64)
        for b in range(n_boot):
            for t in range(n):
                out[b, codes[idx[b, t]]] += 1
        return out


def resize_bilinear(img, rows: int, cols: int):
    img = np.ascontiguousarray(img, dtype=np.float64)
    r0, r1, fr = axis_coords(img.shape[0], rows)
    c0, c1, fc = axis_coords(img.shape[1], cols)
    if HAS_NUMBA:
        return resize_bilinear_nb(img, r0, r1, fr, c0, c1, fc)
    return resize_bilinear_np(img, r0, r1, fr, c0, c1, fc)


def region_histograms(img, bins: int, grid: int):
    img = np.ascontiguousarray(img, dtype=np.float64)
    if HAS_NUMBA:
        return region_histograms_nb(img, bins, grid)
    return region_histograms_np(img, bins, grid)


def sample_without_replacement(n: int, k: int, seed: int):
    if HAS_NUMBA:
        return sample_without_replacement_nb(n, k, np.uint64(seed & MASK64))
    return sample_without_replacement_py(n, k, seed)


def bootstrap_counts(codes, idx, n_cells: int):
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if HAS_NUMBA:
        return bootstrap_counts_nb(codes, idx, n_cells)
    return bootstrap_counts_np(codes, idx, n_cells)
