"""Tracking a desired SDE input through the leftward transport channel.

In target coordinates the leftward state obeys

    d beta - Lambda^- beta_x dt = Omega(x) beta dt + gamma_beta(x) sigma dW,
    beta(t, 1) = V_eff(t),

so ``beta(t, 0)``, which drives the SDE, is a causal functional of
``V_eff`` plus a Wiener integral.  Two families of kernels describe it:

* ``F[i, k](x, s)``: how ``V_eff^(k)`` at lag ``s`` reaches ``beta_i(t, x)``
  through the upper triangular coupling, supported on
  ``s in [(1-x)/mu_k, (1-x)/mu_i]``;
* ``G[i](x, u)``: the response of ``beta_i(t, x)`` to noise injected ``u``
  time units ago, supported on ``u in [0, (1-x)/mu_i]``.

Choosing ``V_eff`` by the causal recursion in :class:`VeffSynthesizer` makes
``beta(t, 0) = V_SDE(t - 1/mu_1) + int G(0, t-s) sigma(s) dW_s``.
"""
from dataclasses import dataclass

import numpy as np

from ._accel import causal_convolve
from .errors import DimensionError, HyperSdeValueError
from .model import GridFunction, snap_steps

__all__ = ['TrackingKernels', 'build_tracking_kernels', 'VeffSynthesizer',
           'synthesize_veff', 'beta_explicit', 'sbar', 'sunder',
           'write_noise_kernel_csv']


def sbar(mu_i, mu_j, x, u):
    """Upper lag limit ``min((1 - x - mu_i u)/(mu_j - mu_i), u)`` in the G recursion."""
    return np.minimum((1.0 - x - mu_i * u) / (mu_j - mu_i), u)


def sunder(mu_i, mu_j, x, s):
    """Lower limit ``max((mu_j s - (1 - x))/(mu_j - mu_i), 0)`` in the F recursion."""
    return np.maximum((mu_j * s - (1.0 - x)) / (mu_j - mu_i), 0.0)


def _rect_interp(values, span, x, frac):
    """Bilinear lookup of ``values[p, q]`` sampled on ``x_p = p/(nx-1)``,
    ``frac_q = span * q / (nq - 1)``; trailing axes are carried along."""
    nx, nq = values.shape[:2]
    fx = np.clip(np.asarray(x) * (nx - 1), 0.0, nx - 1.0)
    fq = np.clip(np.asarray(frac) / span * (nq - 1), 0.0, nq - 1.0)
    ix = np.minimum(fx.astype(np.int64), nx - 2)
    iq = np.minimum(fq.astype(np.int64), nq - 2)
    wx = (fx - ix)[(...,) + (None,) * (values.ndim - 2)]
    wq = (fq - iq)[(...,) + (None,) * (values.ndim - 2)]
    return ((1 - wx) * (1 - wq) * values[ix, iq] + wx * (1 - wq) * values[ix + 1, iq]
            + (1 - wx) * wq * values[ix, iq + 1] + wx * wq * values[ix + 1, iq + 1])


@dataclass(frozen=True)
class TrackingKernels:
    """``G[i]`` sampled on ``(x, nu)`` with ``u = (1 - x) nu``, ``nu in [0, 1/mu_i]``;
    ``F[(i, k)]`` sampled on ``(x, rho)`` with ``s = (1 - x) rho``,
    ``rho in [1/mu_k, 1/mu_i]``."""
    mu: np.ndarray
    x: np.ndarray
    G: list
    F: dict
    boundary_noise_kernel: GridFunction

    @property
    def m(self):
        return self.mu.size

    def G_at(self, i, x, u):
        x = np.asarray(x, dtype=float)
        room = np.maximum(1.0 - x, 1e-300)
        return _rect_interp(self.G[i], 1.0 / self.mu[i], x, np.asarray(u) / room)

    def F_at(self, i, k, x, s):
        x = np.asarray(x, dtype=float)
        lo, hi = 1.0 / self.mu[k], 1.0 / self.mu[i]
        rho = np.asarray(s) / np.maximum(1.0 - x, 1e-300)
        inside = (rho >= lo * (1 - 1e-12)) & (rho <= hi * (1 + 1e-12))
        vals = _rect_interp(self.F[(i, k)], hi - lo, x, rho - lo)
        return np.where(inside, vals, 0.0)


def _omega_entry(kernels, i, j):
    grid = kernels.omega.grid
    vals = kernels.omega.values[:, i, j]
    return lambda y: np.interp(y, grid, vals)


def build_tracking_kernels(kernels, system=None, nx=None, nsub=None):
    """Evaluate the ``G`` and ``F`` recursions from the solved kernels.

    Both are built from the fastest component down (``i = m-1, ..., 0``) on
    an ``nx``-point mesh (default: the kernel mesh) with ``nsub`` trapezoid
    nodes per inner integral.
    """
    mu = np.asarray(kernels.mu if system is None else system.mu, dtype=float)
    m = mu.size
    gaps = np.abs(np.diff(mu))
    if gaps.size and gaps.min() < 1e-12:
        raise HyperSdeValueError('leftward speeds coincide')
    nx = kernels.nx if nx is None else int(nx)
    nsub = nx if nsub is None else int(nsub)
    x = np.linspace(0.0, 1.0, nx)
    frac = np.linspace(0.0, 1.0, nsub)
    tw = np.full(nsub, 1.0 / (nsub - 1))
    tw[0] = tw[-1] = 0.5 / (nsub - 1)
    gb_grid = kernels.gamma_beta.grid
    gb = kernels.gamma_beta.values
    N = gb.shape[2]

    def gamma_row(i, y):
        return np.stack([np.interp(y, gb_grid, gb[:, i, c]) for c in range(N)], axis=-1)

    G = [None] * m
    for i in range(m - 1, -1, -1):
        nu = np.linspace(0.0, 1.0 / mu[i], nx)
        vals = np.empty((nx, nx, N))
        for p, xp in enumerate(x):
            u = (1.0 - xp) * nu
            total = gamma_row(i, xp + mu[i] * u)
            for j in range(i + 1, m):
                upper = np.maximum(sbar(mu[i], mu[j], xp, u), 0.0)
                lags = upper[:, None] * frac[None, :]
                y = xp + mu[i] * (u[:, None] - lags)
                room = np.maximum(1.0 - y, 1e-300)
                inner = (_omega_entry(kernels, i, j)(y)[..., None]
                         * _rect_interp(G[j], 1.0 / mu[j], y, lags / room))
                total = total + upper[:, None] * np.einsum('qsc,s->qc', inner, tw)
            vals[p] = total
        G[i] = vals

    F = {}
    for i in range(m - 1, -1, -1):
        for k in range(i + 1, m):
            lo, hi = 1.0 / mu[k], 1.0 / mu[i]
            rho = np.linspace(lo, hi, nx)
            vals = np.empty((nx, nx))
            scale = mu[k] / (mu[k] - mu[i])
            omega_ik = _omega_entry(kernels, i, k)
            for p, xp in enumerate(x):
                s = (1.0 - xp) * rho
                hit = xp + mu[i] * scale * (s - (1.0 - xp) / mu[k])
                total = scale * omega_ik(hit)
                for j in range(i + 1, k):
                    start = sunder(mu[i], mu[j], xp, s)
                    stop = (mu[k] * s - (1.0 - xp)) / (mu[k] - mu[i])
                    width = np.maximum(stop - start, 0.0)
                    inner_s = start[:, None] + width[:, None] * frac[None, :]
                    y = xp + mu[i] * inner_s
                    room = np.maximum(1.0 - y, 1e-300)
                    rho_inner = (s[:, None] - inner_s) / room
                    lo_j, hi_j = 1.0 / mu[k], 1.0 / mu[j]
                    inner = (_omega_entry(kernels, i, j)(y)
                             * _rect_interp(F[(j, k)], hi_j - lo_j, y, rho_inner - lo_j))
                    total = total + width * (inner @ tw)
                vals[p] = total
            F[(i, k)] = vals

    span = 1.0 / mu[0]
    npts = max(nx, 1025)
    lags = np.linspace(0.0, span, npts)
    noise = np.zeros((npts, m, N))
    for i in range(m):
        inside = lags <= (1.0 / mu[i]) * (1 + 1e-12)
        noise[inside, i] = _rect_interp(G[i], 1.0 / mu[i], np.zeros(inside.sum()), lags[inside])
    return TrackingKernels(mu=mu, x=x, G=G, F=F,
                           boundary_noise_kernel=GridFunction(lags, noise))


class VeffSynthesizer:
    """Causal, step-by-step evaluation of the ``V_eff`` recursion.

    Component ``j`` is produced ``L_j = round((1/mu_1 - 1/mu_j)/dt)`` steps
    ahead of use, so step ``n`` needs only ``V_SDE(t_n)``.  After
    :meth:`step` ``n`` the full vector ``V_eff(t_n)`` is available from
    :meth:`value`.

    ``beta0`` (callable on ``[0, 1]``) supplies ``V_eff`` at negative times as
    ``V_eff^(j)(tau) = beta0(1 + mu_j tau)[j]``; ``past`` supplies ``V_SDE`` at
    negative times.  Both default to zero.  ``uniform=False`` drops the
    alignment on ``1/mu_1`` and returns ``V_SDE`` unchanged, which is the
    tracking law when the leftward channels are uncoupled.
    """

    def __init__(self, tk, dt, nsteps, npaths=1, beta0=None, past=None, uniform=True):
        mu = tk.mu
        self.m = mu.size
        self.dt = dt
        self.npaths = npaths
        self.past = past
        if uniform:
            self.lead = np.array([snap_steps(1.0 / mu[0] - 1.0 / mu[j], dt)
                                  for j in range(self.m)])
        else:
            if any(np.any(f != 0.0) for f in tk.F.values()):
                raise HyperSdeValueError('per-channel tracking needs uncoupled channels')
            self.lead = np.zeros(self.m, dtype=int)
        self.uniform = uniform
        self.offset = int(self.lead.max()) + 1
        self.store = np.zeros((npaths, self.offset + nsteps + self.offset + 1, self.m))
        if beta0 is not None:
            for back in range(1, self.offset + 1):
                tau = -back * dt
                for j in range(self.m):
                    where = 1.0 + mu[j] * tau
                    if where >= 0.0:
                        self.store[:, self.offset - back, j] = np.asarray(beta0(where))[j]
        self.weights = {}
        if uniform:
            for i in range(self.m):
                for k in range(i + 1, self.m):
                    span = int(self.lead[k] - self.lead[i])
                    s = 1.0 / mu[i] - dt * np.arange(span + 1)
                    w = np.full(span + 1, dt)
                    w[0] = w[-1] = 0.5 * dt
                    if span == 0:
                        w[:] = 0.0
                    self.weights[(i, k)] = w * tk.F_at(i, k, 0.0, s)
        self.next_step = -int(self.lead.max())

    def _v_sde_past(self, n):
        if self.past is None:
            return np.zeros((self.npaths, self.m))
        return np.broadcast_to(np.asarray(self.past(n * self.dt), dtype=float),
                               (self.npaths, self.m))

    def _advance(self, n, v_now):
        for i in range(self.m - 1, -1, -1):
            target = n + int(self.lead[i])
            if target < 0:
                continue
            val = v_now[:, i].copy()
            for k in range(i + 1, self.m):
                w = self.weights.get((i, k))
                if w is None:
                    continue
                idx = self.offset + target + np.arange(w.size)
                val -= self.store[:, idx, k] @ w
            self.store[:, self.offset + target, i] = val

    def step(self, n, v_sde):
        """Feed ``V_SDE(t_n)`` (shape ``(npaths, m)`` or ``(m,)``)."""
        if n < self.next_step:
            raise HyperSdeValueError('steps must be fed in order; expected %d' % self.next_step)
        while self.next_step < n:
            self._advance(self.next_step, self._v_sde_past(self.next_step))
            self.next_step += 1
        v_now = np.broadcast_to(np.asarray(v_sde, dtype=float), (self.npaths, self.m))
        self._advance(n, v_now)
        self.next_step = n + 1

    def value(self, k):
        """``V_eff(t_k)``; valid once :meth:`step` ``k`` has run."""
        if k >= self.next_step:
            raise HyperSdeValueError('V_eff(t_%d) not yet synthesized' % k)
        return self.store[:, self.offset + k].copy()


def synthesize_veff(tk, v_sde, dt, beta0=None, past=None, uniform=True):
    """Offline version of :class:`VeffSynthesizer` for sampled ``V_SDE``.

    ``v_sde`` has shape ``(K+1, m)`` or ``(P, K+1, m)`` on the grid ``k dt``;
    the result has the same shape and holds ``V_eff(t_k)``.
    """
    v = np.asarray(v_sde, dtype=float)
    squeeze = v.ndim == 2
    if squeeze:
        v = v[None]
    if v.shape[-1] != tk.m:
        raise DimensionError('V_SDE must have %d components' % tk.m)
    npaths, count, _ = v.shape
    synth = VeffSynthesizer(tk, dt, count, npaths, beta0=beta0, past=past, uniform=uniform)
    out = np.empty_like(v)
    for k in range(count):
        synth.step(k, v[:, k])
        out[:, k] = synth.value(k)
    return out[0] if squeeze else out


def beta_explicit(tk, v_sde, dW, dt, sigma_t, past=None):
    """``beta(t_k, 0) = V_SDE(t_k - 1/mu_1) + sum_l G(0, t_k - t_l) sigma(t_l) dW_l``.

    ``v_sde`` is ``(K+1, m)`` or ``(P, K+1, m)``, ``dW`` is ``(P, K)``; the sum
    runs over increments strictly before ``t_k`` within the last ``1/mu_1``.
    Returns ``(P, K+1, m)``; rows before ``1/mu_1`` omit the initial profile.
    """
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    npaths, nsteps = dW.shape
    lag = snap_steps(1.0 / tk.mu[0], dt)
    if nsteps < lag:
        raise HyperSdeValueError('noise history shorter than the transit time 1/mu_1')
    v = np.asarray(v_sde, dtype=float)
    v = np.broadcast_to(v if v.ndim == 3 else v[None], (npaths, nsteps + 1, tk.m))
    out = np.zeros((npaths, nsteps + 1, tk.m))
    out[:, lag:] = v[:, :nsteps + 1 - lag]
    if past is not None:
        for k in range(min(lag, nsteps + 1)):
            out[:, k] = past((k - lag) * dt)
    sig = sigma_t(dt * np.arange(nsteps))
    kern = tk.boundary_noise_kernel(dt * np.arange(1, lag + 1))
    for c in range(sig.shape[1]):
        if np.any(sig[:, c] != 0.0):
            out += causal_convolve(kern[:, :, c], dW * sig[None, :, c])
    return out


def write_noise_kernel_csv(tk, path):
    """Dump ``G_i(0, u)`` (rows ``u``, columns ``G[i,c]``) for inspection."""
    fn = tk.boundary_noise_kernel
    flat = fn.values.reshape(fn.grid.size, -1)
    header = ['u'] + ['G[%d,%d]' % idx for idx in np.ndindex(*fn.value_shape)]
    np.savetxt(path, np.hstack([fn.grid[:, None], flat]), delimiter=',',
               header=','.join(header), comments='', fmt='%.12g')
