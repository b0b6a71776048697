"""Euler-Maruyama integrators and the seeded Monte Carlo engine.

Three integrators are provided: the delayed SDE, the coupled transport PDE
with its ODE, and the backstepping target system.  All of them work on a
batch of paths at once (leading axis = path) and take the Wiener increments
as an input array, so a run is fully determined by the noise it is given.

The Monte Carlo engine gives every path its own substream of the master
seed, processes paths in fixed-size chunks and merges chunk statistics in
chunk order.  Results are therefore identical for any worker count.
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from ._accel import causal_convolve
from .errors import DimensionError, DivergenceError, HyperSdeValueError
from .model import snap_steps

DIVERGENCE_LIMIT = 1e8
MAX_DIVERGENT_FRACTION = 0.01
CHUNK_SIZE = 250

__all__ = ['PathState', 'init_delayed_state', 'step_delayed', 'memory_drift',
           'DelayedRun', 'simulate_delayed', 'ChunkOutput',
           'MonteCarloSummary', 'monte_carlo', 'wiener_increments',
           'worker_count', 'CoupledRun', 'simulate_coupled', 'TargetRun',
           'simulate_target', 'write_summary_csv', 'write_manifest',
           'delayed_chunk_runner', 'simulate_closed_loop', 'transform_equivalence']


def worker_count():
    """Thread count from ``HYPERSDE_THREADS`` (default 1)."""
    raw = os.environ.get('HYPERSDE_THREADS', '1')
    try:
        return max(1, int(raw))
    except ValueError:
        raise HyperSdeValueError('HYPERSDE_THREADS must be an integer, got %r' % raw)


def wiener_increments(seeds, nsteps, dt):
    """One row of ``N(0, dt)`` increments per seed sequence."""
    return np.sqrt(dt) * np.stack(
        [np.random.default_rng(ss).standard_normal(nsteps) for ss in seeds])


# ---------------------------------------------------------------- delayed SDE

@dataclass
class PathState:
    """Single-batch state of the delayed SDE with explicit ring buffers.

    This is the straightforward step-by-step integrator; ``simulate_delayed``
    is the batched production path and is tested against it.
    """
    k: int
    X: np.ndarray
    inputs: np.ndarray        # ring of past inputs, shape (depth, P, m)
    noise: np.ndarray         # ring of past sigma*dW, shape (memory, P, N)
    dt: float
    delay_steps: list = field(default_factory=list)


def init_delayed_state(sde, dt, npaths=1):
    delay_steps = [snap_steps(h, dt) for h in sde.h]
    depth = max(delay_steps) + 1
    inputs = np.zeros((depth, npaths, sde.n_inputs))
    for j in range(1, depth):
        inputs[(-j) % depth] = sde.past(-j * dt)
    memory = snap_steps(sde.h[-1], dt)
    return PathState(k=0, X=np.tile(sde.X0, (npaths, 1)), inputs=inputs,
                     noise=np.zeros((memory, npaths, sde.N)), dt=dt,
                     delay_steps=delay_steps)


def step_delayed(state, sde, U, dW):
    """Advance one Euler-Maruyama step; ``U`` is applied at the current time."""
    dt = state.dt
    k = state.k
    depth = state.inputs.shape[0]
    state.inputs[k % depth] = U
    drive = np.zeros_like(state.X)
    for steps, cols, sl in zip(state.delay_steps, sde.Bcols, sde.input_slices):
        drive += state.inputs[(k - steps) % depth][:, sl] @ cols.T
    memory = state.noise.shape[0]
    r = np.zeros_like(state.X)
    for lag in range(1, min(memory, k) + 1):
        r += state.noise[(k - lag) % memory] @ sde.Gmem(lag * dt).T
    xi = np.outer(np.atleast_1d(dW), sde.sigma_t(k * dt))
    state.X = state.X + (state.X @ sde.A.T + drive + r) * dt + xi
    if memory:
        state.noise[k % memory] = xi
    state.k = k + 1
    return state


def memory_drift(sde, dt, xi):
    """``r_k = sum_{l=1}^{L} Gmem(l dt) xi_{k-l}`` for every step of a batch.

    ``xi`` holds ``sigma(t_j) dW_j`` with shape ``(P, K, N)``; the result has
    shape ``(P, K + 1, N)``.
    """
    npaths, nsteps, N = xi.shape
    memory = snap_steps(sde.h[-1], dt)
    out = np.zeros((npaths, nsteps + 1, N))
    if memory == 0:
        return out
    weights = sde.Gmem(dt * np.arange(1, memory + 1))  # (L, N, N)
    if not np.any(weights):
        return out
    for c in range(N):
        out += causal_convolve(weights[:, :, c], xi[:, :, c])
    return out


class DelayedRun(NamedTuple):
    t: np.ndarray
    X: np.ndarray
    U: np.ndarray
    r: np.ndarray


@dataclass
class SimContext:
    """What a controller may look at when it is started on a batch."""
    sde: object
    dt: float
    t: np.ndarray
    dW: np.ndarray
    xi: np.ndarray


def simulate_delayed(sde, dt, T, dW, controller=None):
    """Integrate the delayed SDE for a batch of paths.

    ``controller``, if given, must provide ``start(context)`` and
    ``__call__(k, X_hist, U_hist)`` returning the ``(P, m)`` input applied at
    step ``k``.  ``X_hist`` covers steps ``0..k`` and ``U_hist`` steps
    ``0..k-1``.
    """
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    npaths, nsteps = dW.shape
    if nsteps != snap_steps(T, dt):
        raise DimensionError('noise has %d steps, horizon needs %d'
                             % (nsteps, snap_steps(T, dt)))
    N = sde.N
    t = dt * np.arange(nsteps + 1)
    xi = dW[:, :, None] * sde.sigma_t(t[:-1])[None]
    r = memory_drift(sde, dt, xi)
    delay_steps = [snap_steps(h, dt) for h in sde.h]
    depth = max(delay_steps)
    past = np.array([sde.past(-j * dt) for j in range(depth, 0, -1)]).reshape(depth, -1)
    X = np.zeros((npaths, nsteps + 1, N))
    X[:, 0] = sde.X0
    U = np.zeros((npaths, nsteps + 1, sde.n_inputs))
    if controller is not None:
        controller.start(SimContext(sde, dt, t, dW, xi))
    A_T = sde.A.T
    for k in range(nsteps):
        if controller is not None:
            U[:, k] = controller(k, X[:, :k + 1], U[:, :k])
        drive = r[:, k].copy()
        for steps, cols, sl in zip(delay_steps, sde.Bcols, sde.input_slices):
            src = k - steps
            delayed = U[:, src, sl] if src >= 0 else past[depth + src, sl]
            drive += delayed @ cols.T
        X[:, k + 1] = X[:, k] + (X[:, k] @ A_T + drive) * dt + xi[:, k]
    return DelayedRun(t, X, U, r)


# ---------------------------------------------------------------- Monte Carlo

class ChunkOutput(NamedTuple):
    t: np.ndarray
    observables: np.ndarray          # (P, K, d)
    path_values: dict                # name -> (P,)


@dataclass
class MonteCarloSummary:
    t: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    Mpaths: int
    used: int
    divergent: int
    seed: int
    path_values: dict = field(default_factory=dict)
    names: list = None

    @property
    def variance(self):
        return np.diagonal(self.cov, axis1=1, axis2=2)

    @property
    def deviation(self):
        return np.sqrt(np.maximum(self.variance, 0.0))

    @property
    def stderr(self):
        return self.deviation / np.sqrt(self.used)

    def variance_stderr(self):
        """Approximate standard error of the per-component sample variance."""
        return self.variance * np.sqrt(2.0 / max(self.used - 1, 1))


def _chunk_stats(obs):
    count = obs.shape[0]
    if count == 0:
        return 0, np.zeros(obs.shape[1:]), np.zeros(obs.shape[1:2] + obs.shape[2:] * 2)
    mean = obs.mean(axis=0)
    centred = obs - mean
    m2 = np.einsum('pka,pkb->kab', centred, centred)
    return count, mean, m2


def _merge(acc, part):
    if acc is None:
        return part
    n_a, mean_a, m2_a = acc
    n_b, mean_b, m2_b = part
    if n_b == 0:
        return acc
    if n_a == 0:
        return part
    total = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / total)
    m2 = m2_a + m2_b + np.einsum('ka,kb->kab', delta, delta) * (n_a * n_b / total)
    return total, mean, m2


def monte_carlo(chunk_runner, Mpaths, seed, chunk_size=CHUNK_SIZE, threads=None,
                names=None):
    """Run ``chunk_runner`` over all paths and aggregate moments per step.

    ``chunk_runner(seeds)`` receives the list of per-path SeedSequences for
    one chunk and returns a ChunkOutput.  Paths whose observables leave
    ``[-1e8, 1e8]`` or become non-finite are excluded and counted.
    """
    if Mpaths < 2:
        raise HyperSdeValueError('Monte Carlo needs at least two paths')
    seeds = np.random.SeedSequence(seed).spawn(Mpaths)
    chunks = [seeds[i:i + chunk_size] for i in range(0, Mpaths, chunk_size)]
    threads = worker_count() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(chunk_runner, chunks))
    else:
        outputs = [chunk_runner(c) for c in chunks]
    acc = None
    divergent = 0
    values = {}
    t = outputs[0].t
    for out in outputs:
        obs = out.observables
        finite = np.all(np.isfinite(obs), axis=(1, 2))
        bounded = np.zeros_like(finite)
        bounded[finite] = np.max(np.abs(obs[finite]), axis=(1, 2)) <= DIVERGENCE_LIMIT
        divergent += int(np.sum(~bounded))
        acc = _merge(acc, _chunk_stats(obs[bounded]))
        for name, vals in out.path_values.items():
            values.setdefault(name, []).append(np.asarray(vals)[bounded])
    if divergent > MAX_DIVERGENT_FRACTION * Mpaths:
        raise DivergenceError('%d of %d paths diverged' % (divergent, Mpaths))
    used, mean, m2 = acc
    cov = m2 / max(used - 1, 1)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return MonteCarloSummary(
        t=t, mean=mean, cov=cov, Mpaths=Mpaths, used=used, divergent=divergent,
        seed=seed, path_values={k: np.concatenate(v) for k, v in values.items()},
        names=names)


def write_summary_csv(summary, path, names=None):
    """CSV columns: t, mean_*, dev_*, stderr_*."""
    dim = summary.mean.shape[1]
    names = names or summary.names or ['x%d' % (i + 1) for i in range(dim)]
    header = (['t'] + ['mean_%s' % n for n in names]
              + ['dev_%s' % n for n in names] + ['stderr_%s' % n for n in names])
    table = np.column_stack([summary.t, summary.mean, summary.deviation,
                             summary.stderr])
    np.savetxt(path, table, delimiter=',', header=','.join(header),
               comments='', fmt='%.10g')
    return table.shape[0]


def write_manifest(path, manifest):
    with open(path, 'w') as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError('cannot serialise %r' % type(obj))


# ------------------------------------------------------------ coupled PDE/ODE

def _check_cfl(speeds, dt, dx):
    courant = float(np.max(speeds)) * dt / dx
    if courant > 1.0 + 1e-12:
        raise HyperSdeValueError('CFL violated: max speed * dt / dx = %.4g > 1'
                                 % courant)


class CoupledRun(NamedTuple):
    t: np.ndarray
    X: np.ndarray                  # (P, K+1, N)
    u_left: np.ndarray             # u(t, 0), (P, K+1, n)
    v_left: np.ndarray             # v(t, 0), (P, K+1, m)
    V: np.ndarray                  # applied boundary input, (P, K+1, m)
    snapshots: dict                # step -> (u, v) at that step


def simulate_coupled(system, nx, dt, T, dW, boundary_control=None,
                     snapshot_steps=()):
    """First-order upwind / Euler-Maruyama scheme for the coupled plant.

    ``boundary_control(k, t, X, u, v)`` returns the input ``V`` at step ``k``
    given the state at that step; ``v[:, -1]`` is the value from the previous
    step and is overwritten with ``R u(1) + V`` afterwards.
    """
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    npaths, nsteps = dW.shape
    dx = 1.0 / (nx - 1)
    _check_cfl(np.concatenate([system.lam, system.mu]), dt, dx)
    x = np.linspace(0.0, 1.0, nx)
    lam, mu = system.lam, system.mu
    s_pp, s_pm = system.sigma_pp(x), system.sigma_pm(x)
    s_mp, s_mm = system.sigma_mp(x), system.sigma_mm(x)
    t = dt * np.arange(nsteps + 1)
    sig = system.sigma_t(t)
    u = np.tile(system.u0(x), (npaths, 1, 1))
    v = np.tile(system.v0(x), (npaths, 1, 1))
    X = np.zeros((npaths, nsteps + 1, system.N))
    X[:, 0] = system.X0
    u_left = np.zeros((npaths, nsteps + 1, system.n))
    v_left = np.zeros((npaths, nsteps + 1, system.m))
    V_rec = np.zeros((npaths, nsteps + 1, system.m))
    snaps = {}

    def apply_boundary(k, u, v, Xk):
        u[:, 0] = v[:, 0] @ system.Qb.T + Xk @ system.Mb.T
        V = (np.zeros((npaths, system.m)) if boundary_control is None
             else boundary_control(k, t[k], Xk, u, v))
        v[:, -1] = u[:, -1] @ system.Rb.T + V
        return V

    V_rec[:, 0] = apply_boundary(0, u, v, X[:, 0])
    for k in range(nsteps):
        u_left[:, k], v_left[:, k] = u[:, 0], v[:, 0]
        if k in snapshot_steps:
            snaps[k] = (u.copy(), v.copy())
        coupling_u = (np.einsum('xij,pxj->pxi', s_pp, u)
                      + np.einsum('xij,pxj->pxi', s_pm, v))
        coupling_v = (np.einsum('xij,pxj->pxi', s_mp, u)
                      + np.einsum('xij,pxj->pxi', s_mm, v))
        u_new = u.copy()
        v_new = v.copy()
        u_new[:, 1:] = (u[:, 1:] - (lam * dt / dx) * (u[:, 1:] - u[:, :-1])
                        + dt * coupling_u[:, 1:])
        v_new[:, :-1] = (v[:, :-1] + (mu * dt / dx) * (v[:, 1:] - v[:, :-1])
                         + dt * coupling_v[:, :-1])
        X[:, k + 1] = (X[:, k] + (X[:, k] @ system.A.T + v[:, 0] @ system.B.T) * dt
                       + dW[:, k, None] * sig[k])
        u, v = u_new, v_new
        V_rec[:, k + 1] = apply_boundary(k + 1, u, v, X[:, k + 1])
    u_left[:, -1], v_left[:, -1] = u[:, 0], v[:, 0]
    if nsteps in snapshot_steps:
        snaps[nsteps] = (u.copy(), v.copy())
    return CoupledRun(t, X, u_left, v_left, V_rec, snaps)


class TargetRun(NamedTuple):
    t: np.ndarray
    X: np.ndarray
    beta_left: np.ndarray
    snapshots: dict


def simulate_target(system, kernels, nx, dt, T, dW, effective_input=None,
                    alpha0=None, beta0=None, snapshot_steps=()):
    """Upwind scheme for the backstepping target system.

    ``effective_input(k, t)`` is the ``(P, m)`` (or ``(m,)``) value imposed at
    ``beta(t, 1)``.  Initial target states default to zero.
    """
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    npaths, nsteps = dW.shape
    dx = 1.0 / (nx - 1)
    _check_cfl(np.concatenate([system.lam, system.mu]), dt, dx)
    x = np.linspace(0.0, 1.0, nx)
    lam, mu = system.lam, system.mu
    omega = kernels.omega(x)
    psi = kernels.psi(x)
    boundary_gain = kernels.boundary_gain(x)
    g_alpha = kernels.gamma_alpha(x)
    g_beta = kernels.gamma_beta(x)
    t = dt * np.arange(nsteps + 1)
    sig = system.sigma_t(t)
    alpha = np.zeros((npaths, nx, system.n)) if alpha0 is None else np.array(alpha0, dtype=float)
    beta = np.zeros((npaths, nx, system.m)) if beta0 is None else np.array(beta0, dtype=float)
    alpha = np.broadcast_to(alpha, (npaths, nx, system.n)).copy()
    beta = np.broadcast_to(beta, (npaths, nx, system.m)).copy()
    X = np.zeros((npaths, nsteps + 1, system.N))
    X[:, 0] = system.X0
    beta_left = np.zeros((npaths, nsteps + 1, system.m))
    snaps = {}

    def boundary(k):
        beta[:, -1] = 0.0 if effective_input is None else effective_input(k, t[k])
        alpha[:, 0] = beta[:, 0] @ system.Qb.T

    boundary(0)
    for k in range(nsteps):
        beta_left[:, k] = beta[:, 0]
        if k in snapshot_steps:
            snaps[k] = (alpha.copy(), beta.copy())
        noise_a = np.einsum('xij,j->xi', g_alpha, sig[k])
        noise_b = np.einsum('xij,j->xi', g_beta, sig[k])
        a_new = alpha.copy()
        b_new = beta.copy()
        a_new[:, 1:] = (alpha[:, 1:] - (lam * dt / dx) * (alpha[:, 1:] - alpha[:, :-1])
                        + dt * (np.einsum('xij,pxj->pxi', psi, alpha)[:, 1:]
                                + np.einsum('xij,pj->pxi', boundary_gain, beta[:, 0])[:, 1:])
                        + dW[:, k, None, None] * noise_a[None, 1:])
        b_new[:, :-1] = (beta[:, :-1] + (mu * dt / dx) * (beta[:, 1:] - beta[:, :-1])
                         + dt * np.einsum('xij,pxj->pxi', omega, beta)[:, :-1]
                         + dW[:, k, None, None] * noise_b[None, :-1])
        X[:, k + 1] = (X[:, k] + (X[:, k] @ system.A.T + beta[:, 0] @ system.B.T) * dt
                       + dW[:, k, None] * sig[k])
        alpha, beta = a_new, b_new
        boundary(k + 1)
    beta_left[:, -1] = beta[:, 0]
    if nsteps in snapshot_steps:
        snaps[nsteps] = (alpha.copy(), beta.copy())
    return TargetRun(t, X, beta_left, snaps)


# ------------------------------------------------------------- orchestration

def delayed_chunk_runner(sde, dt, T, controller_factory=None, observe=None,
                         path_values=None):
    """Chunk runner for :func:`monte_carlo` over the delayed SDE.

    ``controller_factory()`` builds a fresh controller per chunk (controllers
    keep per-batch buffers).  Observables are ``X`` unless
    ``observe(run, controller)`` says otherwise; ``path_values(run, dW,
    controller)`` may add per-path scalars such as costs.
    """
    nsteps = snap_steps(T, dt)

    def run(seeds):
        dW = wiener_increments(seeds, nsteps, dt)
        ctrl = controller_factory() if controller_factory is not None else None
        res = simulate_delayed(sde, dt, T, dW, ctrl)
        obs = res.X if observe is None else observe(res, ctrl)
        extra = path_values(res, dW, ctrl) if path_values is not None else {}
        return ChunkOutput(res.t, obs, extra)

    return run


def _v_sde_from_inputs(sde, m, U):
    """Map stacked delayed-SDE inputs to leftward boundary components.

    A single group carries all ``m`` components in order; one group per
    component means the groups were sorted fastest first, so group ``g``
    feeds component ``m - 1 - g``.
    """
    if len(sde.Bcols) == 1:
        return U
    return U[:, ::-1]


def simulate_closed_loop(system, kernels, tk, sde, controller, nx, dt, T, dW):
    """Coupled plant under ``V = V_PDE + V_eff`` with ``V_SDE`` from ``controller``.

    ``sde`` is the reduced delayed SDE of ``system``; the controller sees the
    ODE state and its own input history exactly as in
    :func:`simulate_delayed`.
    """
    from .kernels import pde_boundary_controller
    from .tracking import VeffSynthesizer
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    npaths, nsteps = dW.shape
    t = dt * np.arange(nsteps + 1)
    xi = dW[:, :, None] * sde.sigma_t(t[:-1])[None]
    X_hist = np.zeros((npaths, nsteps + 1, sde.N))
    U_hist = np.zeros((npaths, nsteps + 1, sde.n_inputs))
    uniform = len(sde.Bcols) == 1
    synth = VeffSynthesizer(tk, dt, nsteps + 1, npaths, uniform=uniform)
    if controller is not None:
        controller.start(SimContext(sde, dt, t, dW, xi))
    current = {}
    stabiliser = pde_boundary_controller(kernels, lambda k, tk_: current['veff'])

    def boundary(k, tk_, X, u, v):
        X_hist[:, k] = X
        if controller is not None:
            U_hist[:, k] = controller(k, X_hist[:, :k + 1], U_hist[:, :k])
        synth.step(k, _v_sde_from_inputs(sde, system.m, U_hist[:, k]))
        current['veff'] = synth.value(k)
        return stabiliser(k, tk_, X, u, v)

    run = simulate_coupled(system, nx, dt, T, dW, boundary_control=boundary)
    return run, U_hist


def transform_equivalence(system, kernels, tk, nx, dt, T, Mpaths, seed, v_sde=None):
    """Shared-noise comparison of the coupled plant and the target system.

    The plant runs under ``V_PDE + V_eff`` (``V_eff`` synthesised from the
    deterministic signal ``v_sde(t)``, default zero) from ``(X0, u0, v0)``;
    the target starts from the backstepped initial state.  Returns the mean
    gaps of ``X`` and ``v(t,0) = beta(t,0)`` and the variance gaps in units of
    the sample-variance standard error.
    """
    from .kernels import backstep, pde_boundary_controller
    from .tracking import synthesize_veff
    nsteps = snap_steps(T, dt)
    dW = wiener_increments(np.random.SeedSequence(seed).spawn(Mpaths), nsteps, dt)
    t = dt * np.arange(nsteps + 1)
    signal = (np.zeros((nsteps + 1, system.m)) if v_sde is None
              else np.array([np.asarray(v_sde(tt), dtype=float) for tt in t]))
    veff = synthesize_veff(tk, signal, dt)
    x = np.linspace(0.0, 1.0, nx)
    plant = simulate_coupled(system, nx, dt, T, dW,
                             boundary_control=pde_boundary_controller(
                                 kernels, lambda k, tt: veff[k]))
    alpha0, beta0 = backstep(kernels, system.X0, system.u0(x), system.v0(x))
    target = simulate_target(system, kernels, nx, dt, T, dW,
                             effective_input=lambda k, tt: veff[k],
                             alpha0=alpha0, beta0=beta0)
    report = {}
    for name, a, b in (('X', plant.X, target.X), ('beta0', plant.v_left, target.beta_left)):
        mean_gap = np.abs(a.mean(0) - b.mean(0))
        var_a, var_b = a.var(0, ddof=1), b.var(0, ddof=1)
        # floor: variances at round-off level in the first steps carry no information
        floor = 1e-6 * max(float(var_b.max()), 1e-300)
        se = np.sqrt(2.0 / (Mpaths - 1)) * np.maximum(var_a, var_b) + floor
        z = np.abs(var_a - var_b) / np.where(se > 0, se, np.inf)
        report[name] = {'mean_gap': float(mean_gap.max()),
                        'scale': float(np.abs(b.mean(0)).max()),
                        'variance_z': float(z.max())}
    report['dx'] = 1.0 / (nx - 1)
    report['dt'] = dt
    return report
