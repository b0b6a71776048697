import numpy as np
import pytest
from hypothesis import given, strategies as st

from hypersde.control import (Forecaster, HighGainController, PredictorFeedback,
                              SteeringProblem, design_feedback, feedback_step,
                              high_gain_sweep, noise_compensation_kernel, steering_control)
from hypersde.covariance import gamma_recursion, predictor
from hypersde.errors import HyperSdeValueError
from hypersde.reduction import attach_noise, delayed_sde_from_dict, kalman_decompose
from hypersde.sim import delayed_chunk_runner, monte_carlo, simulate_delayed, wiener_increments

from conftest import SIM_DELAYED

# tests/oracles/derive_values.py: k with 0.4 - 2 k e^{-0.4 * 0.5} = -1
FIRST_BLOCK_GAIN = 0.8549819307121189


def _build(**overrides):
    sde = delayed_sde_from_dict(dict(SIM_DELAYED, **overrides))
    return sde, attach_noise(kalman_decompose(sde.A, sde.Bcols), sde)


@pytest.fixture(scope='module')
def quiet():
    return _build(sigma=[0.0, 0.0], memory=0.0, T=20.0)


def test_feedback_gain_and_spectrum(sim_sde, sim_kf):
    law = design_feedback(sim_kf, sim_sde, nu=1.0)
    assert abs(law.gains[0][0, 0]) == pytest.approx(FIRST_BLOCK_GAIN, rel=1e-12)
    for spectrum in law.spectra:
        assert np.allclose(spectrum, -1.0)
    assert set(law.as_dict()) == {'nu', 'gains', 'spectra', 'delays'}


def test_feedback_rejects_nonpositive_rate(sim_sde, sim_kf):
    with pytest.raises(HyperSdeValueError):
        design_feedback(sim_kf, sim_sde, nu=0.0)


def test_multi_input_block_is_stabilised():
    sde, kf = _build(A=[[0.3, 1.0], [-1.0, 0.2]], B=[[1.0, 0.0], [0.0, 1.0]],
                     delays=[0.5], groups=[[0, 1]])
    law = design_feedback(kf, sde, nu=0.5)
    assert kf.block_sizes == (2,)
    assert np.all(np.real(law.spectra[0]) < 0.0)


def test_feedback_step_trivial_cases(sim_kf):
    gains = [np.array([[0.7]]), np.array([[1.5]])]
    stub = type('Law', (), {'gains': gains})()
    zero = feedback_step(stub, sim_kf, [np.zeros(1), np.zeros(1)], 2)
    assert not np.any(zero)
    out = feedback_step(stub, sim_kf, [np.array([2.0]), np.array([-1.0])], 2)
    assert out[sim_kf.input_slices[sim_kf.groups[0]]][0] == pytest.approx(-1.4)
    assert out[sim_kf.input_slices[sim_kf.groups[1]]][0] == pytest.approx(1.5)


def test_discrete_predictor_tracks_continuous_predictor(quiet):
    """The sliding-window predictor agrees with the quadrature predictor to O(dt)."""
    sde, kf = quiet
    law = design_feedback(kf, sde)
    ctrl = PredictorFeedback(law, kf, sde)
    dt = 1e-3
    run = simulate_delayed(sde, dt, 3.0, np.zeros((1, 3000)), controller=ctrl)
    k = 2999                      # the controller keeps the state of its last call
    Z = run.X[0, k] @ kf.T_kal.T
    for i, block in enumerate(ctrl.blocks):
        history = run.U[0, k - block['steps']:k + 1, block['slice']]
        exact = predictor(Z[block['rows']], history, kf.A_block(i, i), kf.B_block(i),
                          block['steps'] * dt, dt)
        discrete = Z[block['rows']] + block['window'][0] @ block['inv_phi_h'].T
        assert np.allclose(discrete, exact, atol=20 * dt * max(1.0, np.abs(exact).max()))


def test_feedback_mean_decays_at_design_rate(quiet):
    """Fitted rate of the mean norm after h_m; the mean of a linear loop is its noiseless path."""
    sde, kf = quiet
    law = design_feedback(kf, sde, nu=1.0)
    dt = 1e-3
    run = simulate_delayed(sde, dt, 20.0, np.zeros((1, 20000)),
                           controller=PredictorFeedback(law, kf, sde))
    window = run.t >= sde.h[-1]
    slope = np.polyfit(run.t[window], np.log(np.linalg.norm(run.X[0, window], axis=1)), 1)[0]
    assert -slope >= 0.8 * law.nu


def test_high_gain_without_noise_contracts_geometrically(quiet):
    sde, kf = quiet
    dt, gain = 1e-3, 5.0
    run = simulate_delayed(sde, dt, 4.0, np.zeros((1, 4000)),
                           controller=HighGainController(kf, sde, gain))
    Z = run.X[0] @ kf.T_kal.T
    for i, steps in enumerate([500, 1000]):
        later = np.arange(steps, Z.shape[0])
        expected = Z[steps, i] * (1.0 - gain * dt) ** (later - steps)
        assert np.max(np.abs(Z[steps:, i] - expected)) <= 1e-10


def test_high_gain_rejects_unsupported_structure():
    sde, kf = _build(A=[[0.3, 1.0], [-1.0, 0.2]], B=[[1.0, 0.0], [0.0, 1.0]],
                     delays=[0.5], groups=[[0, 1]])
    with pytest.raises(HyperSdeValueError):
        HighGainController(kf, sde, 5.0)


def test_forecaster_kernel_matches_continuous_compensation(sim_sde, sim_kf):
    dt = 1e-3
    last = Forecaster(sim_kf, sim_sde, 1, 1000, dt)
    for lag_steps in (1, 200, 600):
        continuous = noise_compensation_kernel(sim_kf, sim_sde, 1, lag=lag_steps * dt)
        assert np.allclose(last.kernel[lag_steps - 1], continuous, atol=2e-3)


class _Recorder:
    """Wraps a controller and fails if it is handed states from the future."""

    def __init__(self, inner):
        self.inner = inner

    def start(self, ctx):
        self.inner.start(ctx)

    def __call__(self, k, X_hist, U_hist):
        assert X_hist.shape[1] == k + 1 and U_hist.shape[1] == k
        return self.inner(k, X_hist, U_hist)


def _controllers(sde, kf):
    law = design_feedback(kf, sde)
    sp = SteeringProblem(Z_T=np.zeros(2), Sigma_T=0.2 * np.eye(2), T=2.5)
    return {'feedback': lambda: PredictorFeedback(law, kf, sde),
            'highgain': lambda: HighGainController(kf, sde, 5.0),
            'steering': lambda: steering_control(sp, kf, sde)}


@pytest.mark.parametrize('name', ['feedback', 'highgain', 'steering'])
@given(cut=st.integers(1, 599))
def test_controllers_are_adapted(sim_sde, sim_kf, name, cut):
    """Changing the noise after a step leaves every earlier input unchanged.

    The memory drift uses an FFT convolution over the whole batch, so earlier
    values move by round-off only (amplified by 1/dt in the high-gain law).
    """
    dt = 5e-3
    base = wiener_increments(np.random.SeedSequence(2).spawn(3), 600, dt)
    altered = base.copy()
    altered[:, cut:] = wiener_increments(np.random.SeedSequence(3).spawn(3), 600 - cut, dt)
    make = _controllers(sim_sde, sim_kf)[name]
    first = simulate_delayed(sim_sde, dt, 3.0, base, controller=_Recorder(make()))
    second = simulate_delayed(sim_sde, dt, 3.0, altered, controller=_Recorder(make()))
    assert np.max(np.abs(first.U[:, :cut + 1] - second.U[:, :cut + 1])) <= 1e-9
    assert np.max(np.abs(first.X[:, -1] - second.X[:, -1])) > 1e-6


def test_high_gain_sweep_gap_shrinks(sim_sde, sim_kf):
    rows = high_gain_sweep(sim_kf, sim_sde, [2.0, 20.0], dt=5e-3, T=3.0, Mpaths=400, seed=1)
    assert rows[1].gap < rows[0].gap
    assert rows[1].cost <= rows[0].cost + 2 * (rows[0].cost_stderr + rows[1].cost_stderr)
    assert rows[0].J_min == rows[1].J_min > 0.0


def test_deterministic_steering_hits_target(quiet):
    sde, kf = quiet
    target = np.array([0.5, -0.3])
    sp = SteeringProblem(Z_T=target, T=3.0)
    run = simulate_delayed(sde, 1e-3, 3.0, np.zeros((1, 3000)), controller=steering_control(sp, kf, sde))
    assert np.allclose(run.X[0, -1] @ kf.T_kal.T, target, atol=1e-9)


def test_steering_reaches_mean_and_covariance(sim_sde, sim_kf):
    dt, horizon = 2e-3, 3.0
    sp = SteeringProblem(Z_T=np.zeros(2), Sigma_T=0.01 * np.eye(2), T=horizon)
    runner = delayed_chunk_runner(sim_sde, dt, horizon, lambda: steering_control(sp, sim_kf, sim_sde),
                                  observe=lambda run, ctrl: run.X @ sim_kf.T_kal.T)
    summary = monte_carlo(runner, 2000, 5)
    floor = gamma_recursion(sim_kf, sim_sde, du=dt, t_grid=[horizon])
    for i in range(2):
        assert abs(summary.mean[-1, i]) <= 3 * summary.stderr[-1, i]
        wanted = 0.01 + floor.sigma_min[i][0, 0, 0]
        assert summary.variance[-1, i] == pytest.approx(wanted, rel=0.15)


def test_steering_problem_validation(sim_sde, sim_kf):
    with pytest.raises(HyperSdeValueError):
        SteeringProblem(Z_T=np.zeros(2), Sigma_T=np.zeros((2, 2)))
    with pytest.raises(HyperSdeValueError):
        steering_control(SteeringProblem(Z_T=np.zeros(2), T=0.5), sim_kf, sim_sde)
