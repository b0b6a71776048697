"""Controllers for the delayed SDE in Kalman form.

Three families are provided: predictor feedback that stabilises every block,
open-loop Gramian steering towards a terminal mean and covariance, and the
high-gain sequence whose variance approaches the structural floor.

All controllers act on the Euler-discretised model used by
``sim.simulate_delayed``.  The high-gain and steering laws are built on
:class:`Forecaster`, which evaluates the conditional expectation
``E[Z_i(t_k + l dt) | F_{t_k}]`` exactly for that discrete model.
"""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import expm, solve_continuous_are

from ._accel import causal_convolve
from .covariance import block_delays, gamma_recursion, min_weighted_variance
from .errors import ControllabilityError, DimensionError, HyperSdeValueError
from .model import controllability_rank, snap_steps

__all__ = ['FeedbackLaw', 'design_feedback', 'feedback_step',
           'PredictorFeedback', 'Forecaster', 'HighGainController',
           'high_gain_sequence', 'noise_compensation_kernel', 'SweepRow',
           'high_gain_sweep', 'forecast_observables',
           'SteeringProblem', 'SteeringController', 'steering_control']


# ------------------------------------------------------------------ feedback

@dataclass
class FeedbackLaw:
    gains: list
    Btilde: list
    spectra: list
    nu: float
    delays: np.ndarray

    def as_dict(self):
        return {'nu': self.nu,
                'gains': [k.tolist() for k in self.gains],
                'spectra': [[complex(z).real for z in s] for s in self.spectra],
                'delays': self.delays.tolist()}


def _ackermann(A, b, poles):
    dim = A.shape[0]
    ctrb = np.hstack([np.linalg.matrix_power(A, p) @ b for p in range(dim)])
    coeffs = np.real(np.poly(poles))
    char = sum(c * np.linalg.matrix_power(A, dim - p)
               for p, c in enumerate(coeffs))
    last = np.zeros((1, dim))
    last[0, -1] = 1.0
    return last @ np.linalg.solve(ctrb, char)


def design_feedback(kf, sde, nu=1.0, poles=None):
    """Gains ``K_i`` making ``Abar_ii - Btilde_ii K_i`` Hurwitz.

    ``Btilde_ii = exp(-Abar_ii h_i) Bbar_ii``.  Single-input blocks use
    Ackermann placement (all poles at ``-nu`` unless ``poles[i]`` is given);
    multi-input blocks use the stabilising Riccati solution of the shifted
    pair ``(Abar_ii + nu I, Btilde_ii)``.
    """
    if nu <= 0:
        raise HyperSdeValueError('decay rate nu must be positive')
    delays, _ = block_delays(kf, sde)
    gains, tildes, spectra = [], [], []
    for i in range(len(kf.block_sizes)):
        A_ii = kf.A_block(i, i)
        B_ii = kf.B_block(i)
        B_t = expm(-A_ii * delays[i]) @ B_ii
        rank, _ = controllability_rank(A_ii, B_t)
        if rank < A_ii.shape[0]:
            raise ControllabilityError('block %d is not controllable' % i, rank=rank)
        if B_t.shape[1] == 1:
            wanted = (np.full(A_ii.shape[0], -nu) if poles is None
                      else np.asarray(poles[i]))
            gain = _ackermann(A_ii, B_t, wanted)
        else:
            shifted = A_ii + nu * np.eye(A_ii.shape[0])
            P = solve_continuous_are(shifted, B_t, np.eye(A_ii.shape[0]),
                                     np.eye(B_t.shape[1]))
            gain = B_t.T @ P
        gains.append(gain)
        tildes.append(B_t)
        spectra.append(np.linalg.eigvals(A_ii - B_t @ gain))
    return FeedbackLaw(gains, tildes, spectra, nu, delays)


def feedback_step(law, kf, predictors, n_inputs):
    """Stack ``U_i = -K_i Y_i`` into the full input vector.

    ``predictors[i]`` has shape ``(..., N_i)``; groups without a block get 0.
    """
    lead = np.asarray(predictors[0]).shape[:-1]
    out = np.zeros(lead + (n_inputs,))
    for i, Y in enumerate(predictors):
        out[..., kf.input_slices[kf.groups[i]]] = -np.asarray(Y) @ law.gains[i].T
    return out


class PredictorFeedback:
    """Discrete predictor feedback ``U_i[k] = -K_i Y_i[k]``.

    ``Y_i[k] = Z_i[k] + Phi^{-H} sum_{l<H} Phi^l dt Bbar_ii U_i[k-1-l]`` with
    ``Phi = I + dt Abar_ii``; the sum is kept by a sliding recursion.
    """

    def __init__(self, law, kf, sde):
        self.law, self.kf, self.sde = law, kf, sde

    def start(self, ctx):
        dt = ctx.dt
        npaths = ctx.dW.shape[0]
        self.blocks = []
        for i in range(len(self.kf.block_sizes)):
            g = self.kf.groups[i]
            steps = snap_steps(self.sde.h[g], dt)
            A_ii = self.kf.A_block(i, i)
            phi = np.eye(A_ii.shape[0]) + dt * A_ii
            drive = dt * self.kf.B_block(i)
            phi_h = np.linalg.matrix_power(phi, steps)
            sl = self.kf.input_slices[g]
            past = np.array([self.sde.past(-j * dt)[sl] for j in range(steps, 0, -1)])
            window = np.zeros(A_ii.shape[0])
            for j in range(steps):          # oldest first: U[-steps] ... U[-1]
                window = phi @ window + drive @ past[j]
            self.blocks.append({
                'phi': phi, 'drive': drive, 'phi_h_drive': phi_h @ drive,
                'inv_phi_h': np.linalg.inv(phi_h), 'steps': steps, 'slice': sl,
                'past': past, 'window': np.tile(window, (npaths, 1)),
                'rows': self.kf.block(i), 'gain': self.law.gains[i]})
        self.n_inputs = self.sde.n_inputs

    def __call__(self, k, X_hist, U_hist):
        Z = X_hist[:, -1] @ self.kf.T_kal.T
        U = np.zeros((Z.shape[0], self.n_inputs))
        for b in self.blocks:
            if k > 0:
                steps = b['steps']
                src = k - 1 - steps
                old = U_hist[:, src, b['slice']] if src >= 0 else b['past'][steps + src]
                b['window'] = (b['window'] @ b['phi'].T
                               + U_hist[:, k - 1, b['slice']] @ b['drive'].T
                               - np.atleast_2d(old) @ b['phi_h_drive'].T)
            Y = Z[:, b['rows']] + b['window'] @ b['inv_phi_h'].T
            U[:, b['slice']] = -Y @ b['gain'].T
        return U


# ---------------------------------------------------------------- forecasting

class Forecaster:
    """``E[Z_i[k + ell] | F_k]`` for block ``i`` of the discrete model.

    The forecast splits into the state part ``(Phi^ell Z[k])_i``, the part
    due to inputs already committed (indices ``<= k-1``), and the part due to
    past noise entering through the memory kernel.  The last one is a causal
    convolution precomputed for the whole batch in :meth:`attach_noise`.
    """

    def __init__(self, kf, sde, block, horizon, dt):
        self.kf, self.sde, self.block, self.horizon, self.dt = kf, sde, block, horizon, dt
        N = kf.Abar.shape[0]
        phi = np.eye(N) + dt * kf.Abar
        rows = [kf.projection(block)]
        for _ in range(horizon):
            rows.append(rows[-1] @ phi)
        self.powers = np.array(rows)              # (ell+1, N_i, N)
        self.state_row = self.powers[horizon]
        self.input_weights = []
        self.input_steps = []
        for g, sl in enumerate(kf.input_slices):
            steps = snap_steps(sde.h[g], dt)
            known = min(horizon, steps)
            drive = dt * kf.Bbar[:, sl]
            weights = np.zeros((known, rows[0].shape[0], drive.shape[1]))
            for a in range(known):
                weights[a] = self.powers[horizon - 1 - a] @ drive
            self.input_weights.append(weights)
            self.input_steps.append(steps)
        self.memory = snap_steps(sde.h[-1], dt)
        self.kernel = self._noise_kernel()

    def _noise_kernel(self):
        L = self.memory
        ell = self.horizon
        Ni, N = self.state_row.shape
        kernel = np.zeros((L, Ni, N))
        if L == 0 or self.kf.Gbar is None:
            return kernel
        lags = self.dt * np.arange(1, L + 1)
        Gs = self.kf.Gbar(lags)                    # Gs[q-1] = Gbar(q dt)
        Gs[lags > self.sde.h[-1] * (1 + 1e-12)] = 0.0
        for a in range(ell):
            count = L - a                          # d = 1..L-a gives d+a <= L
            if count <= 0:
                break
            kernel[:count] += np.einsum('ab,qbc->qac',
                                        self.dt * self.powers[ell - 1 - a],
                                        Gs[a:a + count])
        return kernel

    def attach_noise(self, xi_bar):
        """Precompute the noise part for every step from ``sigbar dW``."""
        P, K, N = xi_bar.shape
        out = np.zeros((P, K + 1, self.state_row.shape[0]))
        if self.memory and np.any(self.kernel):
            for c in range(N):
                out += causal_convolve(self.kernel[:, :, c], xi_bar[:, :, c])
        self.noise_part = out

    def __call__(self, k, Z_k, inputs_ext, offset):
        """Forecast at step ``k``.

        ``inputs_ext[:, offset + q]`` must hold the input applied at step
        ``q`` for every ``q <= k - 1`` (negative ``q`` = past input).
        """
        value = Z_k @ self.state_row.T + self.noise_part[:, k]
        for weights, steps, sl in zip(self.input_weights, self.input_steps,
                                      self.kf.input_slices):
            known = weights.shape[0]
            if known == 0:
                continue
            lo = offset + k - steps
            window = inputs_ext[:, lo:lo + known, sl]
            value = value + np.einsum('paj,aij->pi', window, weights)
        return value

    def innovation_row(self):
        """Coefficient of ``sigbar dW_k`` in ``E[Z_i[k+1+ell] | F_{k+1}]``."""
        first = self.kernel[0] if self.memory else 0.0
        return self.state_row + first


def _input_buffer(sde, dt, npaths, nsteps):
    depth = max(snap_steps(h, dt) for h in sde.h)
    ext = np.zeros((npaths, depth + nsteps + 1, sde.n_inputs))
    for j in range(1, depth + 1):
        ext[:, depth - j] = sde.past(-j * dt)
    return ext, depth


def noise_compensation_kernel(kf, sde, block, lag, horizon=None):
    """Continuous limit of the forecaster noise kernel for the last block.

    ``int_lag^{h_m} exp(Abar_ii (h_i + lag - s)) Gbar_i(s) ds`` evaluated with
    a fine trapezoid rule; cross-block couplings are ignored, so this is an
    oracle for the last block only.
    """
    delays, _ = block_delays(kf, sde)
    h_i = delays[block] if horizon is None else horizon
    A_ii = kf.A_block(block, block)
    s = np.linspace(lag, sde.h[-1], 2001)
    vals = np.array([expm(A_ii * (h_i + lag - x)) @ kf.Gbar(x)[kf.block(block)]
                     for x in s])
    return np.trapezoid(vals, s, axis=0)


# ------------------------------------------------------------------ high gain

class HighGainController:
    """High-gain law ``E_k[Z_i[k+H_i+1]] = (1 - K_i dt) E_k[Z_i[k+H_i]]``.

    The input is chosen so that the forecast one step beyond the delay is a
    contraction of the current forecast; everything the block can predict
    (state, committed inputs, cross-block drift, memory noise) is cancelled.
    """

    def __init__(self, kf, sde, gains):
        if any(size != 1 for size in kf.block_sizes):
            raise HyperSdeValueError('high-gain law needs scalar blocks, got sizes %s'
                                     % (kf.block_sizes,))
        if any(kf.input_slices[g].stop - kf.input_slices[g].start != 1
               for g in kf.groups):
            raise HyperSdeValueError('high-gain law needs one input per block')
        if len(set(np.asarray(sde.h)[list(kf.groups)])) != len(kf.groups):
            raise HyperSdeValueError('high-gain law needs distinct delays')
        gains = np.broadcast_to(np.asarray(gains, dtype=float),
                                (len(kf.block_sizes),))
        self.kf, self.sde, self.gains = kf, sde, gains

    def start(self, ctx):
        dt = ctx.dt
        if np.any(self.gains * dt >= 2.0):
            raise HyperSdeValueError('gain too large for dt=%g' % dt)
        npaths, nsteps = ctx.dW.shape
        xi_bar = ctx.xi @ self.kf.T_kal.T
        self.dt = dt
        self.ext, self.offset = _input_buffer(self.sde, dt, npaths, nsteps)
        self.parts = []
        for i in range(len(self.kf.block_sizes)):
            g = self.kf.groups[i]
            steps = snap_steps(self.sde.h[g], dt)
            now = Forecaster(self.kf, self.sde, i, steps, dt)
            ahead = Forecaster(self.kf, self.sde, i, steps + 1, dt)
            now.attach_noise(xi_bar)
            ahead.attach_noise(xi_bar)
            b = float(self.kf.B_block(i)[0, 0])
            self.parts.append((now, ahead, self.kf.input_slices[g], b))
        self.forecasts = np.zeros((npaths, nsteps + 1, len(self.parts)))

    def __call__(self, k, X_hist, U_hist):
        Z = X_hist[:, -1] @ self.kf.T_kal.T
        U = np.zeros((Z.shape[0], self.sde.n_inputs))
        for idx, ((now, ahead, sl, b), gain) in enumerate(zip(self.parts, self.gains)):
            zeta = now(k, Z, self.ext, self.offset)
            free = ahead(k, Z, self.ext, self.offset)
            self.forecasts[:, k, idx] = zeta[:, 0]
            U[:, sl] = ((1.0 - gain * self.dt) * zeta - free) / (self.dt * b)
        self.ext[:, self.offset + k] = U
        return U


def high_gain_sequence(kf, sde, K_list):
    """One :class:`HighGainController` per entry of ``K_list``."""
    return [HighGainController(kf, sde, K) for K in K_list]


class SweepRow(NamedTuple):
    gain: float
    cost: float
    cost_stderr: float
    gap: float
    gap_stderr: float
    J_min: float


def forecast_observables(kf, sde, dt):
    """``observe`` hook: ``Z`` followed by ``zeta_i(t - h_i)`` for every block.

    ``zeta_i(t - h_i) = E[Z_i(t) | F_{t - h_i}]``, so ``Var Z_i(t)`` splits into
    ``Var zeta_i(t - h_i)`` plus the variance of the unforecastable part.
    """
    lags = [snap_steps(sde.h[g], dt) for g in kf.groups]

    def observe(run, ctrl):
        Z = run.X @ kf.T_kal.T
        shifted = np.zeros(Z.shape[:2] + (len(lags),))
        for i, lag in enumerate(lags):
            shifted[:, lag:, i] = ctrl.forecasts[:, :Z.shape[1] - lag, i]
        return np.concatenate([Z, shifted], axis=2)

    return observe


def high_gain_sweep(kf, sde, gains, dt, T, Mpaths, seed, Qcost=None, threads=None,
                    on_summary=None):
    """Weighted-variance cost of the high-gain law for each gain in ``gains``.

    ``cost`` integrates ``sum_i Q_ii Var Z_i`` over ``[h_m, T]``; ``gap``
    integrates ``sum_i Q_ii Var zeta_i(t - h_i)``, the part of the cost above
    the discrete floor, which has far smaller Monte Carlo error than the
    difference ``cost - J_min``.  Standard errors use the Gaussian formula
    ``sqrt(2/(M-1))`` per time and treat times as fully correlated.
    ``on_summary(gain, summary)``, if given, receives each Monte Carlo summary.
    """
    from .sim import delayed_chunk_runner, monte_carlo
    N = kf.Abar.shape[0]
    Qcost = np.eye(N) if Qcost is None else np.atleast_2d(np.asarray(Qcost, dtype=float))
    weights = np.array([Qcost[kf.block(i), kf.block(i)][0, 0]
                        for i in range(len(kf.block_sizes))])
    observe = forecast_observables(kf, sde, dt)
    start = float(sde.h[-1])
    rows = []
    t_floor = None
    for gain in gains:
        runner = delayed_chunk_runner(sde, dt, T, lambda: HighGainController(kf, sde, gain),
                                      observe=observe)
        summary = monte_carlo(runner, Mpaths, seed, threads=threads)
        if on_summary is not None:
            on_summary(gain, summary)
        t = summary.t
        window = (t >= start - 1e-12) & (t <= T + 1e-12)
        var = summary.variance
        cost_curve = var[:, :N] @ np.diag(Qcost)
        gap_curve = var[:, N:] @ weights
        cost = float(np.trapezoid(cost_curve[window], t[window]))
        gap = float(np.trapezoid(gap_curve[window], t[window]))
        factor = np.sqrt(2.0 / max(summary.used - 1, 1))
        if t_floor is None:
            stride = max(1, int(round(0.01 / dt)))
            t_floor = t[::stride]
            family = gamma_recursion(kf, sde, du=dt, t_grid=t_floor)
            _, totals = min_weighted_variance(family, kf, Qcost, T)
            J_min = float(np.sum(totals))
        rows.append(SweepRow(float(gain), cost, factor * cost, gap, factor * gap, J_min))
    return rows


# ------------------------------------------------------------------- steering

@dataclass
class SteeringProblem:
    Z_T: np.ndarray
    Sigma_T: np.ndarray = None
    T: float = 10.0
    eps: float = 1e-10
    max_condition: float = 1e12

    def __post_init__(self):
        self.Z_T = np.asarray(self.Z_T, dtype=float)
        if self.Sigma_T is not None:
            self.Sigma_T = np.atleast_2d(np.asarray(self.Sigma_T, dtype=float))
            if np.min(np.linalg.eigvalsh(0.5 * (self.Sigma_T + self.Sigma_T.T))) < self.eps:
                raise HyperSdeValueError('terminal covariance must be positive definite')


class SteeringController:
    """Steer ``Z(T)`` to mean ``Z_T`` (and covariance ``Sigma_T`` plus floor).

    Block ``i`` acts only on its window ``[T - h_{i+1}, T - h_i]`` (with
    ``h_{m+1} = 2 h_m``); windows are disjoint and later blocks come first.
    Inside the window the one-step forecast ``zeta_i[k] = E_k[Z_i[k+H_i]]`` is
    driven along a mean path ``m`` that follows the discrete minimum-energy
    (Gramian) control from ``zeta_i`` at the window start to ``Z_T``; the
    deviation ``zeta_i - m`` is contracted by ``1 - ell_i dt`` each step, with
    ``ell_i`` chosen by bisection so that the terminal variance of the
    forecast equals ``Sigma_T``.  Outside the windows the input is zero.
    """

    def __init__(self, problem, kf, sde):
        self.problem, self.kf, self.sde = problem, kf, sde
        delays, following = block_delays(kf, sde)
        if problem.T <= delays[-1]:
            raise HyperSdeValueError('horizon must exceed the longest delay')
        self.delays, self.following = delays, following
        for i in range(len(kf.block_sizes)):
            B_ii = kf.B_block(i)
            if np.linalg.matrix_rank(B_ii) < B_ii.shape[0]:
                raise HyperSdeValueError(
                    'steering needs Bbar_ii of full row rank (block %d)' % i)

    def start(self, ctx):
        dt = ctx.dt
        npaths, nsteps = ctx.dW.shape
        total = snap_steps(self.problem.T, dt)
        if total > nsteps:
            raise DimensionError('simulation shorter than steering horizon')
        xi_bar = ctx.xi @ self.kf.T_kal.T
        self.dt, self.total = dt, total
        self.ext, self.offset = _input_buffer(self.sde, dt, npaths, nsteps)
        self.windows = []
        sig = self.kf.sigbar(ctx.t[:-1]) if self.kf.sigbar is not None else np.zeros((nsteps, self.kf.Abar.shape[0]))
        for i in range(len(self.kf.block_sizes)):
            g = self.kf.groups[i]
            steps = snap_steps(self.delays[i], dt)
            end = total - steps                     # ζ at `end` forecasts Z[total]
            begin = max(total - snap_steps(self.following[i], dt), 0)
            rows = self.kf.block(i)
            A_ii = self.kf.A_block(i, i)
            Ni = A_ii.shape[0]
            phi = np.eye(Ni) + dt * A_ii
            drive = dt * self.kf.B_block(i)
            gram = np.zeros((Ni, Ni))
            power = np.eye(Ni)
            plan_rows = []
            for k in range(end - 1, begin - 1, -1):
                plan_rows.append(power @ drive)
                gram += (power @ drive) @ (power @ drive).T
                power = phi @ power
            plan_rows = plan_rows[::-1]             # index k - begin
            if np.linalg.cond(gram) > self.problem.max_condition:
                raise HyperSdeValueError('Gramian of block %d is ill conditioned' % i)
            now = Forecaster(self.kf, self.sde, i, steps, dt)
            ahead = Forecaster(self.kf, self.sde, i, steps + 1, dt)
            now.attach_noise(xi_bar)
            ahead.attach_noise(xi_bar)
            contraction = 1.0
            if self.problem.Sigma_T is not None:
                row = now.innovation_row()
                per_step = np.einsum('ia,ka,kb,jb->kij', row, sig, sig, row) * dt
                contraction = self._fit_contraction(
                    per_step[begin:end], self.problem.Sigma_T[rows, rows], i)
            self.windows.append({
                'begin': begin, 'end': end, 'rows': rows, 'phi': phi,
                'drive': drive, 'gram_inv': np.linalg.inv(gram),
                'plan_rows': plan_rows, 'now': now, 'ahead': ahead,
                'slice': self.kf.input_slices[g], 'contraction': contraction,
                'power_total': power, 'B_inv': np.linalg.pinv(drive)})
        self.plans = [None] * len(self.windows)

    def _fit_contraction(self, per_step, target, block):
        """Scalar ``c = 1 - ell dt`` such that sum c^{2j} V_j matches ``target``."""
        count = per_step.shape[0]
        weights = np.arange(count - 1, -1, -1)
        traces = np.array([np.trace(v) for v in per_step])
        wanted = float(np.trace(target))

        def terminal(c):
            return float(np.sum(c ** (2 * weights) * traces))

        if wanted < traces[-1] * (1 - 1e-9):
            raise HyperSdeValueError(
                'terminal covariance %.4g of block %d is below the reachable %.4g'
                % (wanted, block, traces[-1]))
        lo, hi = 0.0, 1.0
        while terminal(hi) < wanted:
            hi *= 1.5
            if hi > 1e6:
                raise HyperSdeValueError('cannot reach terminal covariance')
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if terminal(mid) < wanted:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def __call__(self, k, X_hist, U_hist):
        Z = X_hist[:, -1] @ self.kf.T_kal.T
        U = np.zeros((Z.shape[0], self.sde.n_inputs))
        for idx, w in enumerate(self.windows):
            if not (w['begin'] <= k < w['end']):
                continue
            zeta = w['now'](k, Z, self.ext, self.offset)
            free = w['ahead'](k, Z, self.ext, self.offset)
            if k == w['begin']:
                target = self.problem.Z_T[w['rows']]
                gap = target - zeta @ w['power_total'].T
                self.plans[idx] = {'mean': zeta.copy(),
                                   'coef': gap @ w['gram_inv'].T}
            plan = self.plans[idx]
            row = w['plan_rows'][k - w['begin']]
            planned = plan['coef'] @ row            # Bbar^T Phi'^{...} W^{-1} gap
            next_mean = plan['mean'] @ w['phi'].T + planned @ w['drive'].T
            goal = next_mean + w['contraction'] * (zeta - plan['mean'])
            U[:, w['slice']] = (goal - free) @ w['B_inv'].T
            plan['mean'] = next_mean
        self.ext[:, self.offset + k] = U
        return U


def steering_control(sp, kf, sde):
    """Build the :class:`SteeringController` for problem ``sp``."""
    return SteeringController(sp, kf, sde)
