"""Hot loops with a numba implementation and a pure-numpy fallback.

Set ``HYPERSDE_DISABLE_NUMBA=1`` to force the numpy path.  Both paths
compute the same quantities in the same order of operations up to floating
point reassociation, so results agree to round-off.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get('HYPERSDE_DISABLE_NUMBA', '') not in ('1', 'true', 'yes')

# Above this many lags the O(K log K) FFT beats the O(K L) direct loop
# (measured crossover near 8 lags, see benchmarks/bench_accel.py).
DIRECT_LAG_LIMIT = 8

__all__ = ['USE_NUMBA', 'tri_interp', 'segment_integrals', 'causal_convolve',
           'segment_integrals_numpy', 'causal_convolve_numpy']


def tri_interp(field, xs, ys):
    """Piecewise-linear interpolation on the uniform unit-square grid.

    Each cell is split along its ``y = x`` diagonal so that points on or below
    the mesh diagonal only use vertices with ``q <= p``.
    """
    npts = field.shape[0]
    step = 1.0 / (npts - 1)
    fx = np.clip(xs / step, 0.0, npts - 1.0)
    fy = np.clip(ys / step, 0.0, npts - 1.0)
    ix = np.minimum(fx.astype(np.int64), npts - 2)
    iy = np.minimum(fy.astype(np.int64), npts - 2)
    wx = fx - ix
    wy = fy - iy
    base = field[ix, iy]
    corner = field[ix + 1, iy + 1]
    lower = base + wx * (field[ix + 1, iy] - base) + wy * (corner - field[ix + 1, iy])
    upper = base + wy * (field[ix, iy + 1] - base) + wx * (corner - field[ix, iy + 1])
    return np.where(wy <= wx, lower, upper)


def segment_integrals_numpy(field, x0, y0, dir_x, dir_y, lengths, nsub):
    """Trapezoid integral of ``field`` along straight segments.

    Segment ``k`` starts at ``(x0[k], y0[k])`` and runs for arc parameter
    ``s`` in ``[0, lengths[k]]`` along ``(dir_x, dir_y)``; ``nsub`` nodes are
    used for every segment.
    """
    frac = np.linspace(0.0, 1.0, nsub)
    s = lengths[:, None] * frac[None, :]
    vals = tri_interp(field, x0[:, None] + dir_x * s, y0[:, None] + dir_y * s)
    weights = np.full(nsub, 1.0)
    weights[0] = weights[-1] = 0.5
    return (vals @ weights) * lengths / (nsub - 1)


def causal_convolve_numpy(weights, noise):
    """``out[p, k] = sum_{l=1}^{min(L, k)} weights[l-1] * noise[p, k-l]``.

    ``weights`` has shape ``(L, d)``, ``noise`` shape ``(P, K)``; the result
    has shape ``(P, K + 1, d)`` so that ``out[:, k]`` only uses increments
    strictly before step ``k``.  Evaluated with an FFT.
    """
    nlag, dim = weights.shape
    npaths, nsteps = noise.shape
    size = 1 << int(np.ceil(np.log2(nsteps + nlag + 1)))
    noise_hat = np.fft.rfft(noise, size, axis=1)
    out = np.empty((npaths, nsteps + 1, dim))
    shifted = np.zeros((nlag + 1,))
    for c in range(dim):
        shifted[1:] = weights[:, c]
        full = np.fft.irfft(noise_hat * np.fft.rfft(shifted, size)[None, :],
                            size, axis=1)
        out[:, :, c] = full[:, :nsteps + 1]
    return out


if numba is not None:
    @numba.njit(cache=True)
    def _segment_integrals_jit(field, x0, y0, dir_x, dir_y, lengths, nsub):
        npts = field.shape[0]
        step = 1.0 / (npts - 1)
        out = np.empty(x0.shape[0])
        for k in range(x0.shape[0]):
            total = 0.0
            ds = lengths[k] / (nsub - 1)
            for j in range(nsub):
                s = ds * j
                fx = min(max((x0[k] + dir_x * s) / step, 0.0), npts - 1.0)
                fy = min(max((y0[k] + dir_y * s) / step, 0.0), npts - 1.0)
                ix = min(int(fx), npts - 2)
                iy = min(int(fy), npts - 2)
                wx = fx - ix
                wy = fy - iy
                if wy <= wx:
                    val = (field[ix, iy] + wx * (field[ix + 1, iy] - field[ix, iy])
                           + wy * (field[ix + 1, iy + 1] - field[ix + 1, iy]))
                else:
                    val = (field[ix, iy] + wy * (field[ix, iy + 1] - field[ix, iy])
                           + wx * (field[ix + 1, iy + 1] - field[ix, iy + 1]))
                if j == 0 or j == nsub - 1:
                    val *= 0.5
                total += val
            out[k] = total * ds
        return out

    @numba.njit(cache=True)
    def _causal_convolve_jit(weights, noise):
        nlag, dim = weights.shape
        npaths, nsteps = noise.shape
        out = np.zeros((npaths, nsteps + 1, dim))
        for p in range(npaths):
            for k in range(1, nsteps + 1):
                for lag in range(1, min(nlag, k) + 1):
                    w = noise[p, k - lag]
                    for c in range(dim):
                        out[p, k, c] += weights[lag - 1, c] * w
        return out


def segment_integrals(field, x0, y0, dir_x, dir_y, lengths, nsub):
    args = (np.ascontiguousarray(field, dtype=float),
            np.ascontiguousarray(x0, dtype=float),
            np.ascontiguousarray(y0, dtype=float),
            float(dir_x), float(dir_y),
            np.ascontiguousarray(lengths, dtype=float), int(max(nsub, 2)))
    if USE_NUMBA:
        return _segment_integrals_jit(*args)
    return segment_integrals_numpy(*args)


def causal_convolve(weights, noise):
    """Dispatch to the direct numba loop for short kernels, FFT otherwise."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        weights = weights[:, None]
    weights = np.ascontiguousarray(weights)
    noise = np.ascontiguousarray(np.atleast_2d(noise), dtype=float)
    if USE_NUMBA and weights.shape[0] <= DIRECT_LAG_LIMIT:
        return _causal_convolve_jit(weights, noise)
    return causal_convolve_numpy(weights, noise)
