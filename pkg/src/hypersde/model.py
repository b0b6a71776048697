"""Domain types for the coupled transport-PDE / SDE plant.

The plant couples ``n`` rightward and ``m`` leftward transport equations on
``[0, 1]`` with an ``N``-dimensional linear SDE driven by a scalar Wiener
process.  Space- and time-dependent coefficients are stored as samples on
uniform grids and evaluated by linear interpolation.

Configuration files are JSON.  Functional coefficients are given either as a
tagged closed form (``{"tag": "const", "value": ...}`` or
``{"tag": "exp_decay(0.2)", "value": ...}``) or as raw samples
(``{"samples": [...]}``, uniformly spaced over the function's domain).
"""
import json
import re
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DimensionError, HyperSdeValueError, NonFiniteSampleError

RANK_RTOL = 1e-9

__all__ = ['GridFunction', 'CoupledSystem', 'CheckResult', 'ValidationReport',
           'ExperimentConfig', 'IsometryResult', 'controllability_rank',
           'validate', 'ito_isometry_check', 'snap_steps', 'parse_function',
           'system_from_dict', 'load_config']


class GridFunction:
    """Array-valued function sampled on a uniform grid, linearly interpolated.

    Parameters
    ----------
    grid : array_like
        Strictly increasing, uniformly spaced abscissae.
    values : array_like
        Samples with shape ``(len(grid),) + value_shape``.
    """

    def __init__(self, grid, values):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise HyperSdeValueError('grid needs at least two points')
        if values.shape[0] != grid.size:
            raise DimensionError('values and grid lengths differ: %d vs %d'
                                 % (values.shape[0], grid.size))
        self.grid = grid
        self.values = values
        self.value_shape = values.shape[1:]

    @classmethod
    def constant(cls, value, lo=0.0, hi=1.0):
        value = np.asarray(value, dtype=float)
        return cls([lo, hi], np.stack([value, value]))

    @classmethod
    def from_callable(cls, func, lo, hi, npoints):
        grid = np.linspace(lo, hi, npoints)
        return cls(grid, np.stack([np.asarray(func(x), dtype=float)
                                   for x in grid]))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        flat = self.values.reshape(self.grid.size, -1)
        out = np.empty(x.shape + (flat.shape[1],))
        for k in range(flat.shape[1]):
            out[..., k] = np.interp(x, self.grid, flat[:, k])
        return out.reshape(x.shape + self.value_shape)

    def resample(self, grid):
        """Return a new GridFunction sampled on ``grid``."""
        return GridFunction(grid, self(np.asarray(grid, dtype=float)))


@dataclass(frozen=True)
class CoupledSystem:
    """Coefficients of the interconnected hyperbolic PDE + SDE plant.

    ``sigma_pp`` etc. are GridFunctions on ``[0, 1]``; ``sigma_t`` is a
    GridFunction on ``[0, T]`` with values in ``R^N``; ``u0`` and ``v0`` are
    GridFunctions on ``[0, 1]`` with values in ``R^n`` and ``R^m``.
    """
    lam: np.ndarray
    mu: np.ndarray
    sigma_pp: GridFunction
    sigma_pm: GridFunction
    sigma_mp: GridFunction
    sigma_mm: GridFunction
    Qb: np.ndarray
    Rb: np.ndarray
    Mb: np.ndarray
    A: np.ndarray
    B: np.ndarray
    sigma_t: GridFunction
    T: float
    X0: np.ndarray
    u0: GridFunction
    v0: GridFunction

    @property
    def n(self):
        return self.lam.size

    @property
    def m(self):
        return self.mu.size

    @property
    def N(self):
        return self.A.shape[0]

    def check_shapes(self):
        n, m, N = self.n, self.m, self.N
        expected = {
            'sigma_pp': (self.sigma_pp.value_shape, (n, n)),
            'sigma_pm': (self.sigma_pm.value_shape, (n, m)),
            'sigma_mp': (self.sigma_mp.value_shape, (m, n)),
            'sigma_mm': (self.sigma_mm.value_shape, (m, m)),
            'Qb': (self.Qb.shape, (n, m)),
            'Rb': (self.Rb.shape, (m, n)),
            'Mb': (self.Mb.shape, (n, N)),
            'A': (self.A.shape, (N, N)),
            'B': (self.B.shape, (N, m)),
            'sigma_t': (self.sigma_t.value_shape, (N,)),
            'X0': (self.X0.shape, (N,)),
            'u0': (self.u0.value_shape, (n,)),
            'v0': (self.v0.value_shape, (m,)),
        }
        for name, (got, want) in expected.items():
            if tuple(got) != want:
                raise DimensionError('%s has shape %s, expected %s'
                                     % (name, tuple(got), want))


class CheckResult(NamedTuple):
    name: str
    passed: bool
    measured: str
    diagnostic: bool = False


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def ok(self):
        return all(c.passed for c in self.checks if not c.diagnostic)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self):
        out = []
        for c in self.checks:
            tag = 'info' if c.diagnostic else ('PASS' if c.passed else 'FAIL')
            out.append('%-4s %-28s %s' % (tag, c.name, c.measured))
        return out


def controllability_rank(A, B, rtol=RANK_RTOL):
    """Numerical rank of ``[B, AB, ..., A^{N-1} B]``.

    Returns
    -------
    rank : int
    singular_values : ndarray
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    ctrb = np.hstack(blocks)
    sv = np.linalg.svd(ctrb, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0, sv
    return int(np.sum(sv > rtol * sv[0])), sv


def _strictly_increasing_positive(name, speeds):
    speeds = np.asarray(speeds, dtype=float)
    ok = bool(speeds.size > 0 and speeds[0] > 0
              and np.all(np.diff(speeds) > 0))
    return CheckResult(name, ok, 'values=%s' % np.array2string(speeds))


def validate(system):
    """Check the structural assumptions of a CoupledSystem.

    Never raises on a failed invariant; every check is reported with the
    quantity that was measured.
    """
    report = ValidationReport()
    report.checks.append(_strictly_increasing_positive('rightward speeds',
                                                        system.lam))
    report.checks.append(_strictly_increasing_positive('leftward speeds',
                                                        system.mu))
    for name, fn in (('zero diagonal sigma_pp', system.sigma_pp),
                     ('zero diagonal sigma_mm', system.sigma_mm)):
        diag = np.diagonal(fn.values, axis1=1, axis2=2)
        worst = float(np.max(np.abs(diag))) if diag.size else 0.0
        report.checks.append(CheckResult(name, worst == 0.0,
                                         'max |diag|=%.3g' % worst))
    rank, sv = controllability_rank(system.A, system.B)
    smallest = float(sv[min(system.N, sv.size) - 1]) if sv.size else 0.0
    report.checks.append(CheckResult(
        'controllable (A, B)', rank == system.N,
        'rank=%d of %d, smallest sv=%.3g' % (rank, system.N, smallest)))
    loop = np.asarray(system.Qb) @ np.asarray(system.Rb)
    radius = float(np.max(np.abs(np.linalg.eigvals(loop)))) if loop.size else 0.0
    report.checks.append(CheckResult('reflection loop radius', True,
                                     'rho(Qb Rb)=%.4g' % radius,
                                     diagnostic=True))
    return report


class IsometryResult(NamedTuple):
    mc_estimate: float
    quadrature: float
    stderr: float


def ito_isometry_check(f1, f2, t, Mpaths, seed, n_steps=200):
    """Compare E[(int f1 dW)(int f2 dW)] by Monte Carlo with int f1 f2 ds.

    The stochastic integrals are Ito sums with the integrands sampled at the
    midpoint of each step; the deterministic side is a composite trapezoid
    rule on the same ``n_steps + 1`` point grid.
    """
    if Mpaths < 100:
        raise HyperSdeValueError('Mpaths must be at least 100')
    grid = np.linspace(0.0, t, n_steps + 1)
    dt = t / n_steps
    mid = grid[:-1] + 0.5 * dt
    g1 = np.broadcast_to(np.asarray(f1(mid), dtype=float), mid.shape)
    g2 = np.broadcast_to(np.asarray(f2(mid), dtype=float), mid.shape)
    rng = np.random.default_rng(seed)
    dW = rng.standard_normal((Mpaths, n_steps)) * np.sqrt(dt)
    products = (dW @ g1) * (dW @ g2)
    bad = np.flatnonzero(~np.isfinite(products))
    if bad.size:
        raise NonFiniteSampleError('non-finite sample on path %d' % bad[0],
                                   path_index=int(bad[0]))
    quad = float(np.trapezoid(np.asarray(f1(grid), dtype=float)
                              * np.asarray(f2(grid), dtype=float), grid))
    return IsometryResult(float(products.mean()), quad,
                          float(products.std(ddof=1) / np.sqrt(Mpaths)))


def snap_steps(delay, dt):
    """Number of time steps closest to ``delay``."""
    return int(round(float(delay) / dt))


@dataclass
class ExperimentConfig:
    nx: int = 64
    dt: float = 1e-3
    T: float = 10.0
    paths: int = 2000
    seed: int = 0
    controller: str = 'feedback'
    params: dict = field(default_factory=dict)
    out_dir: str = 'out'

    def __post_init__(self):
        if not self.dt > 0:
            raise HyperSdeValueError('dt must be positive')
        if self.nx < 2:
            raise HyperSdeValueError('nx must be at least 2')
        if self.paths < 1:
            raise HyperSdeValueError('paths must be at least 1')

    def delay_steps(self, delays, rtol=1e-12):
        """Snap delays to whole steps, refusing delays dt does not divide."""
        steps = []
        for h in np.atleast_1d(delays):
            k = snap_steps(h, self.dt)
            if abs(k * self.dt - h) > rtol * max(abs(h), 1.0) or k < 1:
                raise HyperSdeValueError(
                    'dt=%g does not divide delay %g' % (self.dt, h))
            steps.append(k)
        return steps


_TAG_RE = re.compile(r'^\s*(const|exp_decay)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*$')


def parse_function(spec, lo, hi):
    """Build a GridFunction on ``[lo, hi]`` from a JSON function description.

    Accepted forms: a bare array (constant), ``{"tag": "const", "value": v}``,
    ``{"tag": "exp_decay(theta)", "value": v}`` meaning ``v * exp(-theta (x - lo))``,
    and ``{"samples": [...]}`` uniformly spaced on ``[lo, hi]``.
    """
    if not isinstance(spec, dict):
        return GridFunction.constant(spec, lo, hi)
    if 'samples' in spec:
        samples = np.asarray(spec['samples'], dtype=float)
        return GridFunction(np.linspace(lo, hi, samples.shape[0]), samples)
    match = _TAG_RE.match(spec.get('tag', ''))
    if not match:
        raise HyperSdeValueError('unknown function tag %r' % spec.get('tag'))
    value = np.asarray(spec['value'], dtype=float)
    if match.group(1) == 'const':
        return GridFunction.constant(value, lo, hi)
    if match.group(2) is None:
        raise HyperSdeValueError('exp_decay needs a rate, e.g. exp_decay(0.2)')
    rate = float(match.group(2))
    npoints = int(spec.get('npoints', 513))
    grid = np.linspace(lo, hi, npoints)
    decay = np.exp(-rate * (grid - lo)).reshape((-1,) + (1,) * value.ndim)
    return GridFunction(grid, decay * value)


def _matrix(data, rows, cols):
    arr = np.asarray(data if data is not None else np.zeros((rows, cols)),
                     dtype=float)
    if arr.size != rows * cols:
        raise DimensionError('matrix has %d entries, expected %dx%d'
                             % (arr.size, rows, cols))
    return arr.reshape(rows, cols)


def system_from_dict(d):
    """Construct a CoupledSystem from a parsed JSON object."""
    lam = np.atleast_1d(np.asarray(d['lambda'], dtype=float))
    mu = np.atleast_1d(np.asarray(d['mu'], dtype=float))
    A = np.atleast_2d(np.asarray(d['A'], dtype=float))
    n, m, N = lam.size, mu.size, A.shape[0]
    T = float(d.get('T', 10.0))

    def space_fn(key, shape):
        if key not in d:
            return GridFunction.constant(np.zeros(shape))
        fn = parse_function(d[key], 0.0, 1.0)
        return GridFunction(fn.grid, fn.values.reshape((-1,) + shape))

    system = CoupledSystem(
        lam=lam, mu=mu,
        sigma_pp=space_fn('sigma_pp', (n, n)),
        sigma_pm=space_fn('sigma_pm', (n, m)),
        sigma_mp=space_fn('sigma_mp', (m, n)),
        sigma_mm=space_fn('sigma_mm', (m, m)),
        Qb=_matrix(d.get('Qb'), n, m), Rb=_matrix(d.get('Rb'), m, n),
        Mb=_matrix(d.get('Mb'), n, N), A=A, B=_matrix(d['B'], N, m),
        sigma_t=parse_function(d.get('sigma_t', np.zeros(N)), 0.0, T),
        T=T,
        X0=np.asarray(d.get('X0', np.zeros(N)), dtype=float).reshape(N),
        u0=space_fn('u0', (n,)), v0=space_fn('v0', (m,)))
    system.check_shapes()
    return system


class LoadedConfig(NamedTuple):
    system: CoupledSystem
    delayed: dict
    experiment: ExperimentConfig
    raw: dict


def load_config(path):
    """Read a JSON experiment file.

    Returns a LoadedConfig whose ``system`` is None when the file only
    describes a delayed SDE, and whose ``delayed`` is the raw delayed-SDE
    object (or None).
    """
    with open(path) as fh:
        raw = json.load(fh)
    system = system_from_dict(raw['system']) if 'system' in raw else None
    experiment = ExperimentConfig(**raw.get('experiment', {}))
    return LoadedConfig(system, raw.get('delayed_sde'), experiment, raw)
