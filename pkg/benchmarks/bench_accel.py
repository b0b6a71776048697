"""Compare the numba and numpy paths of the hot loops.

Usage: python benchmarks/bench_accel.py [--nx 128] [--repeat 5]

Times the two kernels of ``hypersde._accel`` directly and then the kernel
solver end to end, once with numba and once with HYPERSDE_DISABLE_NUMBA=1
(in a subprocess, since the switch is read at import time).
"""
import argparse
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from hypersde import _accel

SOLVE_SNIPPET = """
import time
from hypersde.model import load_config
from hypersde.kernels import solve_kernels
system = load_config({config!r}).system
solve_kernels(system, nx=16)
start = time.perf_counter()
kernels = solve_kernels(system, nx={nx})
print(time.perf_counter() - start, kernels.residual_norm)
"""


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def bench_segments(nx, repeat):
    rng = np.random.default_rng(0)
    field = rng.standard_normal((nx, nx))
    count = nx * nx // 2
    x0 = rng.uniform(0.0, 1.0, count)
    y0 = x0 * rng.uniform(0.0, 1.0, count)
    lengths = rng.uniform(0.0, 0.5, count)
    args = (field, x0, y0, -1.0, -0.5, lengths, 9)
    fast = _accel._segment_integrals_jit(*args)
    slow = _accel.segment_integrals_numpy(*args)
    return (best_time(lambda: _accel._segment_integrals_jit(*args), repeat),
            best_time(lambda: _accel.segment_integrals_numpy(*args), repeat),
            float(np.max(np.abs(fast - slow))))


def bench_convolution(repeat):
    rng = np.random.default_rng(1)
    weights = rng.standard_normal((_accel.DIRECT_LAG_LIMIT, 2))
    noise = rng.standard_normal((250, 5000))
    fast = _accel._causal_convolve_jit(weights, noise)
    slow = _accel.causal_convolve_numpy(weights, noise)
    return (best_time(lambda: _accel._causal_convolve_jit(weights, noise), repeat),
            best_time(lambda: _accel.causal_convolve_numpy(weights, noise), repeat),
            float(np.max(np.abs(fast - slow))))


def bench_solver(nx, disable):
    config = Path(__file__).resolve().parent.parent / 'configs' / 'smooth_scalar.json'
    env = dict(os.environ, HYPERSDE_DISABLE_NUMBA='1' if disable else '0')
    out = subprocess.run([sys.executable, '-c', SOLVE_SNIPPET.format(config=str(config), nx=nx)],
                         env=env, capture_output=True, text=True, check=True)
    seconds, residual = out.stdout.split()
    return float(seconds), float(residual)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument('--nx', type=int, default=128)
    parser.add_argument('--repeat', type=int, default=5)
    args = parser.parse_args()
    if _accel.numba is None:
        sys.exit('numba is not installed; nothing to compare')
    print('%-26s %12s %12s %9s %12s' % ('kernel', 'numba [s]', 'numpy [s]', 'speedup', 'max |diff|'))
    for name, (fast, slow, diff) in (
            ('segment integrals', bench_segments(args.nx, args.repeat)),
            ('causal convolution', bench_convolution(args.repeat))):
        print('%-26s %12.4g %12.4g %9.2f %12.3g' % (name, fast, slow, slow / fast, diff))
    fast, res_fast = bench_solver(args.nx, False)
    slow, res_slow = bench_solver(args.nx, True)
    print('%-26s %12.4g %12.4g %9.2f %12.3g' % ('solve_kernels nx=%d' % args.nx, fast, slow,
                                               slow / fast, abs(res_fast - res_slow)))


if __name__ == '__main__':
    main()
