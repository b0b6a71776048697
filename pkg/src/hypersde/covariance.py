"""Predictors and the covariance floor of the delayed SDE in Kalman form.

Block ``i`` of ``Z = T_kal X`` sees its own input only after the delay
``h_i``.  The noise it accumulates over the last ``h_i`` time units cannot be
compensated by any adapted input; its covariance is computed here from the
deterministic kernels ``Gamma_i`` and ``Theta_ij``.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import DimensionError, HyperSdeValueError
from .model import snap_steps

__all__ = ['predictor', 'block_delays', 'GammaFamily', 'gamma_recursion',
           'sigma_min_curve', 'min_weighted_variance', 'cost_J',
           'write_curves_csv', 'cropped_predictor_identity']


def predictor(Z_i, U_history, Abar_ii, Bbar_ii, h_i, dt):
    """Artstein predictor ``Z_i(t) + int_{t-h}^t e^{A(t-s-h)} B U(s) ds``.

    ``U_history`` holds input samples on a uniform grid of step ``dt`` ending
    at the current time; only the last ``round(h_i/dt) + 1`` rows are used.
    """
    Abar_ii = np.atleast_2d(Abar_ii)
    Bbar_ii = np.asarray(Bbar_ii, dtype=float).reshape(Abar_ii.shape[0], -1)
    U_history = np.asarray(U_history, dtype=float).reshape(-1, Bbar_ii.shape[1])
    steps = int(round(h_i / dt))
    if U_history.shape[0] < steps + 1:
        raise HyperSdeValueError('input history covers %d steps, need %d'
                                 % (U_history.shape[0] - 1, steps))
    window = U_history[-(steps + 1):]
    lag = h_i - dt * np.arange(steps, -1, -1)   # t - s for each sample
    weights = np.full(steps + 1, dt)
    weights[0] = weights[-1] = 0.5 * dt
    total = np.zeros(Abar_ii.shape[0])
    for w, s_lag, u in zip(weights, lag, window):
        total += w * (expm(Abar_ii * (s_lag - h_i)) @ (Bbar_ii @ u))
    return np.asarray(Z_i, dtype=float) + total


def block_delays(kf, sde):
    """Delay of each Kalman block and the next delay (``2 h_m`` after the last)."""
    delays = np.array([sde.h[g] for g in kf.groups], dtype=float)
    following = np.append(delays[1:], 2.0 * delays[-1])
    return delays, following


@dataclass
class GammaFamily:
    """Sampled kernels ``Gamma_i`` (smooth part), ``Theta_ij`` and ``Sigma_min``.

    ``smooth[i]`` excludes the indicator term ``1_{[0,h_i]}(u) e^{A_ii u} P_i``
    which is added back exactly by :meth:`gamma`.
    """
    du: float
    delays: np.ndarray
    following: np.ndarray
    smooth: list
    theta: dict
    diag_blocks: list
    projections: list
    variant: str
    t_grid: np.ndarray = None
    sigma_min: list = None

    def u_grid(self, i):
        return self.du * np.arange(self.smooth[i].shape[0])

    def indicator_term(self, i, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.zeros((u.size,) + self.projections[i].shape)
        for k, val in enumerate(u):
            if 0.0 <= val <= self.delays[i] + 1e-12 * self.delays[i]:
                out[k] = expm(self.diag_blocks[i] * val) @ self.projections[i]
        return out

    def smooth_part(self, i, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        grid = self.u_grid(i)
        flat = self.smooth[i].reshape(grid.size, -1)
        vals = np.stack([np.interp(u, grid, flat[:, c], right=0.0)
                         for c in range(flat.shape[1])], axis=-1)
        return vals.reshape((u.size,) + self.smooth[i].shape[1:])

    def gamma(self, i, u):
        """``Gamma_i(u)``; at ``u = h_i`` the indicator is included."""
        return self.smooth_part(i, u) + self.indicator_term(i, u)

    @property
    def Gamma(self):
        """Samples of each ``Gamma_i`` on its own u grid."""
        return [self.smooth[i] + self.indicator_term(i, self.u_grid(i))
                for i in range(len(self.smooth))]


def _causal_conv(diag, forcing, du):
    """``I(u_k) = int_0^{u_k} e^{A(u_k - s)} F(s) ds`` by exponential trapezoid."""
    step = expm(diag * du)
    out = np.zeros_like(forcing)
    for k in range(forcing.shape[0] - 1):
        out[k + 1] = step @ out[k] + 0.5 * du * (step @ forcing[k] + forcing[k + 1])
    return out


def _shifted_window(conv, diag, lag_steps, du):
    """Turn ``int_0^u`` into ``int_{max(u - lag, 0)}^u``."""
    if lag_steps >= conv.shape[0]:
        return conv
    out = conv.copy()
    decay = expm(diag * lag_steps * du)
    out[lag_steps:] -= np.einsum('ab,kbc->kac', decay, conv[:conv.shape[0] - lag_steps])
    return out


def gamma_recursion(kf, sde, du=None, t_grid=None, variant='appendix'):
    """Compute ``Gamma_i``, ``Theta_ij`` and optionally ``Sigma_min`` curves.

    ``variant='appendix'`` integrates from ``max(u - h_{i+1}, 0)`` (always 0
    on the sampled support ``[0, h_{i+1}]``); ``variant='main'`` integrates
    from ``max(u - h_i, 0)``.  The two agree on ``[0, h_i]``.
    """
    if kf.Gbar is None or kf.sigbar is None:
        raise HyperSdeValueError('KalmanForm has no noise data; call attach_noise')
    if variant not in ('appendix', 'main'):
        raise HyperSdeValueError('variant must be "appendix" or "main"')
    delays, following = block_delays(kf, sde)
    if du is None:
        du = delays[0] / 200.0
    for h in np.concatenate([delays, following]):
        if abs(round(h / du) * du - h) > 1e-9 * h:
            raise HyperSdeValueError('du=%g does not divide delay %g' % (du, h))
    nblocks = len(kf.block_sizes)
    longest = float(sde.h[-1])
    smooth = [None] * nblocks
    full = [None] * nblocks
    theta = {}
    diag_blocks = [kf.A_block(i, i) for i in range(nblocks)]
    projections = [kf.projection(i) for i in range(nblocks)]
    for i in range(nblocks - 1, -1, -1):
        npts = int(round(following[i] / du)) + 1
        u = du * np.arange(npts)
        rows = kf.block(i)
        memory = kf.Gbar(u)[:, rows, :]
        memory[u > longest * (1 + 1e-12)] = 0.0
        lag = npts if variant == 'appendix' else int(round(delays[i] / du))
        total = _shifted_window(_causal_conv(diag_blocks[i], memory, du),
                                diag_blocks[i], lag, du)
        for j in range(i + 1, nblocks):
            coupling = kf.A_block(i, j)
            forcing = np.einsum('ab,kbc->kac', coupling, full[j][:npts])
            contrib = _shifted_window(_causal_conv(diag_blocks[i], forcing, du),
                                      diag_blocks[i], lag, du)
            theta[(i, j)] = contrib
            total = total + contrib
        smooth[i] = total
        indicator = np.zeros_like(total)
        inside = u <= delays[i] * (1 + 1e-12)
        indicator[inside] = np.stack([expm(diag_blocks[i] * val) @ projections[i]
                                      for val in u[inside]])
        full[i] = total + indicator
    family = GammaFamily(du=du, delays=delays, following=following,
                         smooth=smooth, theta=theta, diag_blocks=diag_blocks,
                         projections=projections, variant=variant)
    if t_grid is not None:
        family.t_grid = np.asarray(t_grid, dtype=float)
        family.sigma_min = [sigma_min_curve(family, kf.sigbar, i, family.t_grid)
                            for i in range(nblocks)]
    return family


def sigma_min_curve(family, sigbar, i, t_grid):
    """``Sigma_min^(i)(t) = int_{max(t-h_i,0)}^t Gamma_i(t-s) sb sb^T Gamma_i(t-s)^T ds``."""
    h_i = family.delays[i]
    out = np.zeros((len(t_grid),) + (family.projections[i].shape[0],) * 2)
    nodes_full = int(round(h_i / family.du)) + 1
    u_full = family.du * np.arange(nodes_full)
    gamma_full = family.gamma(i, u_full)
    for k, t in enumerate(t_grid):
        if t <= 0.0:
            continue
        if t >= h_i:
            u, gam = u_full, gamma_full
        else:
            count = max(int(np.ceil(t / family.du)), 1) + 1
            u = np.linspace(0.0, t, count)
            gam = family.gamma(i, u)
        load = np.einsum('kab,kb->ka', gam, sigbar(t - u))
        integrand = np.einsum('ka,kb->kab', load, load)
        out[k] = np.trapezoid(integrand, u, axis=0)
    return out


def _weight_block(Qcost, t, rows):
    mat = Qcost(t) if callable(Qcost) else np.asarray(Qcost, dtype=float)
    return np.atleast_2d(mat)[rows, rows]


def min_weighted_variance(family, kf, Qcost, Tspan):
    """Return ``(V_min curves, J_min per block)`` for a weight ``Qcost``.

    ``V_min^(i)(t) = tr(Q_ii(t) Sigma_min^(i)(t))``; ``J_min^(i)`` integrates it
    over ``[h_m, T]`` with the trapezoid rule on ``family.t_grid``.
    """
    if family.sigma_min is None:
        raise HyperSdeValueError('GammaFamily was built without a time grid')
    start = float(family.delays[-1])
    if Tspan <= start:
        raise HyperSdeValueError('horizon %g does not exceed longest delay %g'
                                 % (Tspan, start))
    t = family.t_grid
    curves = []
    totals = []
    for i in range(len(family.smooth)):
        rows = kf.block(i)
        vals = np.array([np.trace(_weight_block(Qcost, tk, rows) @ sig)
                         for tk, sig in zip(t, family.sigma_min[i])])
        curves.append(vals)
        window = (t >= start - 1e-12) & (t <= Tspan + 1e-12)
        totals.append(float(np.trapezoid(vals[window], t[window])))
    return curves, np.array(totals)


def cost_J(t, Z, U, Qcost, Rcost, h_m, Tspan):
    """Per-path quadratic cost ``int_{h_m}^T Z'QZ dt + int_0^{T-h_m} U'RU dt``.

    ``Z`` has shape ``(..., K, N)`` and ``U`` shape ``(..., K, m)`` on the common
    grid ``t``; ``Rcost`` may be a scalar (``rho I``) or a matrix.
    """
    t = np.asarray(t, dtype=float)
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    if Z.shape[-2] != t.size or U.shape[-2] != t.size:
        raise DimensionError('paths and time grid lengths differ')
    Qmat = np.atleast_2d(np.asarray(Qcost, dtype=float))
    Rmat = np.asarray(Rcost, dtype=float)
    if Rmat.ndim == 0:
        Rmat = Rmat * np.eye(U.shape[-1])
    state_win = (t >= h_m - 1e-12) & (t <= Tspan + 1e-12)
    input_win = t <= Tspan - h_m + 1e-12
    state_part = np.einsum('...ka,ab,...kb->...k', Z, Qmat, Z)
    input_part = np.einsum('...ka,ab,...kb->...k', U, Rmat, U)
    return (np.trapezoid(state_part[..., state_win], t[state_win], axis=-1)
            + np.trapezoid(input_part[..., input_win], t[input_win], axis=-1))


def write_curves_csv(path, abscissa_name, abscissa, curves):
    """CSV with the abscissa column then row-major entries of each curve."""
    cols = [np.asarray(abscissa)[:, None]]
    header = [abscissa_name]
    for name, values in curves:
        flat = np.asarray(values).reshape(len(abscissa), -1)
        shape = np.asarray(values).shape[1:]
        cols.append(flat)
        header += ['%s[%s]' % (name, ','.join(map(str, idx)))
                   for idx in np.ndindex(*shape)] if shape else [name]
    np.savetxt(path, np.hstack(cols), delimiter=',', header=','.join(header),
               comments='', fmt='%.12g')


def cropped_predictor_identity(kf, sde, run, dW):
    """Largest gap between ``Z_i(t)`` and its cropped-predictor representation.

    The right-hand side is ``Phi^H Ytilde_i(t - h_i)`` plus the noise of the
    last ``h_i`` propagated by the exact ``e^{A_ii (t - s)}`` plus the forcing
    ``d_i`` (coupling to later blocks, inputs of other groups, memory drift)
    accumulated since 0.  ``Ytilde_i`` and the forcing history use the Euler
    propagator ``Phi = I + dt A_ii`` of the simulated model: both are open-loop
    sums, and mixing in the exact exponential there would add a discretization
    error growing like ``e^{A_ii t}``.  The deterministic part therefore holds to
    round-off and the remaining gap, from the noise window, is ``O(dt)``
    uniformly in ``t``.  Returns one maximum per block over ``t >= h_m``.
    """
    t = run.t
    dt = float(t[1] - t[0])
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    Z = run.X @ kf.T_kal.T
    r_bar = run.r @ kf.T_kal.T
    xi = dW[:, :, None] * (sde.sigma_t(t[:-1]) @ kf.T_kal.T)[None]
    nsteps = dW.shape[1]
    delay_steps = [snap_steps(h, dt) for h in sde.h]
    depth = max(delay_steps)

    def delayed_input(group, k):
        src = k - delay_steps[group]
        sl = sde.input_slices[group]
        if src >= 0:
            return run.U[:, src, sl]
        return np.broadcast_to(sde.past(src * dt)[sl], (Z.shape[0], sl.stop - sl.start))

    start = int(np.searchsorted(t, sde.h[-1] - 1e-12))
    gaps = []
    for i in range(len(kf.block_sizes)):
        rows = kf.block(i)
        g = kf.groups[i]
        A_ii = kf.A_block(i, i)
        B_ii = kf.B_block(i)
        H = delay_steps[g]
        h_i = H * dt
        phi = np.eye(A_ii.shape[0]) + dt * A_ii
        phi_h = np.linalg.matrix_power(phi, H)
        B_tilde = np.linalg.solve(phi_h, B_ii)
        step = expm(A_ii * dt)
        sl = sde.input_slices[g]
        y0 = np.zeros(A_ii.shape[0])
        for j in range(1, H + 1):        # inputs already committed at t = -j dt
            y0 += dt * np.linalg.matrix_power(phi, j - 1) @ (B_tilde @ sde.past(-j * dt)[sl])
        cropped = np.empty((Z.shape[0], nsteps + 1, A_ii.shape[0]))
        cropped[:, 0] = Z[:, 0, rows] + y0
        forcing = np.zeros((Z.shape[0], A_ii.shape[0]))
        noise = np.zeros_like(forcing)
        noise_hist = np.zeros((Z.shape[0], nsteps + 1, A_ii.shape[0]))
        step_h = expm(A_ii * h_i)
        worst = 0.0
        for k in range(nsteps):
            d_k = r_bar[:, k, rows] + Z[:, k, rows.stop:] @ kf.Abar[rows, rows.stop:].T
            for other in range(len(sde.Bcols)):
                if other != g:
                    d_k = d_k + delayed_input(other, k) @ kf.Bbar[rows, sde.input_slices[other]].T
            cropped[:, k + 1] = (cropped[:, k] + dt * (cropped[:, k] @ A_ii.T
                                                       + run.U[:, k, sl] @ B_tilde.T)
                                 + xi[:, k, rows])
            # right-endpoint Riemann sums: increment l is weighted by e^{A(t - t_{l+1})}
            forcing = forcing @ phi.T + dt * d_k
            noise = noise @ step.T + xi[:, k, rows]
            noise_hist[:, k + 1] = noise
            kk = k + 1
            if kk >= start and kk >= H:
                window = noise - noise_hist[:, kk - H] @ step_h.T
                rhs = cropped[:, kk - H] @ phi_h.T + window + forcing
                worst = max(worst, float(np.max(np.abs(Z[:, kk, rows] - rhs))))
        gaps.append(worst)
    return np.array(gaps)
