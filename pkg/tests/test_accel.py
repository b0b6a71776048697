import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hypersde import _accel

needs_numba = pytest.mark.skipif(_accel.numba is None, reason='numba not installed')


def _loop_convolution(weights, noise):
    out = np.zeros((noise.shape[0], noise.shape[1] + 1, weights.shape[1]))
    for k in range(1, noise.shape[1] + 1):
        for lag in range(1, min(weights.shape[0], k) + 1):
            out[:, k] += noise[:, k - lag, None] * weights[lag - 1]
    return out


@given(st.integers(1, 40), st.integers(1, 3), st.integers(1, 60), st.integers(0, 10**6))
def test_fft_convolution_matches_loop(nlag, dim, nsteps, seed):
    rng = np.random.default_rng(seed)
    weights, noise = rng.standard_normal((nlag, dim)), rng.standard_normal((2, nsteps))
    assert np.allclose(_accel.causal_convolve_numpy(weights, noise),
                       _loop_convolution(weights, noise), atol=1e-12)


@needs_numba
@given(st.integers(1, 40), st.integers(1, 3), st.integers(1, 60), st.integers(0, 10**6))
def test_jit_convolution_matches_fft(nlag, dim, nsteps, seed):
    rng = np.random.default_rng(seed)
    weights, noise = rng.standard_normal((nlag, dim)), rng.standard_normal((3, nsteps))
    assert np.allclose(_accel._causal_convolve_jit(weights, noise),
                       _accel.causal_convolve_numpy(weights, noise), atol=1e-12)


@needs_numba
@given(st.integers(3, 30), st.floats(0.0, 1.0), st.floats(-1.0, 1.0), st.integers(2, 12),
       st.integers(0, 10**6))
def test_jit_segment_integrals_match_numpy(npts, start, slope, nsub, seed):
    rng = np.random.default_rng(seed)
    field = rng.standard_normal((npts, npts))
    x0 = rng.uniform(0.0, 1.0, 7)
    y0 = np.minimum(x0, start)
    lengths = rng.uniform(0.0, 0.5, 7)
    args = (field, x0, y0, 1.0, slope, lengths, nsub)
    assert np.allclose(_accel._segment_integrals_jit(*args),
                       _accel.segment_integrals_numpy(*args), atol=1e-12)


def test_segment_integral_of_linear_field_is_exact():
    grid = np.linspace(0.0, 1.0, 11)
    field = 2.0 * grid[:, None] + 3.0 * grid[None, :]
    # from (0.1, 0) along (1, 0.5) for length 0.4: integral of 2x + 3y
    value = _accel.segment_integrals(field, np.array([0.1]), np.array([0.0]), 1.0, 0.5,
                                     np.array([0.4]), 9)
    s = np.linspace(0.0, 0.4, 100001)
    expected = np.trapezoid(2 * (0.1 + s) + 3 * 0.5 * s, s)
    assert value[0] == pytest.approx(expected, rel=1e-12)


def test_dispatch_uses_both_paths_consistently():
    rng = np.random.default_rng(0)
    noise = rng.standard_normal((2, 50))
    for nlag in (_accel.DIRECT_LAG_LIMIT, _accel.DIRECT_LAG_LIMIT + 1):
        weights = rng.standard_normal(nlag)
        assert np.allclose(_accel.causal_convolve(weights, noise),
                           _loop_convolution(weights[:, None], noise), atol=1e-12)


def test_environment_switch_disables_numba():
    code = 'from hypersde import _accel; print(_accel.USE_NUMBA)'
    out = subprocess.run([sys.executable, '-c', code], capture_output=True, text=True,
                         env={'HYPERSDE_DISABLE_NUMBA': '1', 'PATH': ''}, check=True)
    assert out.stdout.strip() == 'False'
