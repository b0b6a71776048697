from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hypersde.errors import HyperSdeValueError
from hypersde.kernels import solve_kernels
from hypersde.model import GridFunction
from hypersde.sim import simulate_target
from hypersde.tracking import (VeffSynthesizer, beta_explicit, build_tracking_kernels, sbar,
                               sunder, synthesize_veff, write_noise_kernel_csv)


def stub(mu, omega, gamma_beta, nx=101):
    """Just the fields build_tracking_kernels reads."""
    return SimpleNamespace(mu=np.asarray(mu, dtype=float), nx=nx, omega=omega,
                           gamma_beta=gamma_beta)


CONST_GB = np.array([[0.3, -0.2], [0.5, 0.1]])
OMEGA0 = 0.7


@pytest.fixture(scope='module')
def coupled_tk():
    return build_tracking_kernels(stub([1.0, 2.0], GridFunction.constant([[0, OMEGA0], [0, 0]]),
                                       GridFunction.constant(CONST_GB)))


def test_lag_limits():
    assert sbar(1.0, 2.0, 0.0, 0.25) == pytest.approx(0.25)
    assert sbar(1.0, 2.0, 0.0, 0.75) == pytest.approx(0.25)
    assert sunder(1.0, 2.0, 0.0, 0.75) == pytest.approx(0.5)
    assert sunder(1.0, 2.0, 0.0, 0.25) == 0.0


def test_uncoupled_kernels_are_plain_shifts():
    gb = GridFunction.from_callable(lambda y: [[np.sin(y)], [np.cos(2 * y)]], 0.0, 1.0, 201)
    tk = build_tracking_kernels(stub([1.0, 2.5], GridFunction.constant(np.zeros((2, 2))), gb))
    x = np.array([0.0, 0.2, 0.5])
    for i, speed in enumerate(tk.mu):
        u = 0.5 * (1 - x) / speed
        assert np.allclose(tk.G_at(i, x, u)[:, 0], gb(x + speed * u)[:, i, 0], atol=1e-4)
    assert not np.any(tk.F[(0, 1)])


def test_single_channel_has_no_memory_kernel():
    gb = GridFunction.from_callable(lambda y: [[1 + y]], 0.0, 1.0, 101)
    tk = build_tracking_kernels(stub([2.0], GridFunction.constant(np.zeros((1, 1))), gb))
    assert tk.F == {}
    assert tk.G_at(0, 0.0, 0.25)[0] == pytest.approx(1.5, abs=1e-9)


def test_first_kernel_hand_evaluation(coupled_tk):
    # G_1(0, u) = gb_1 + omega0 gb_2 min(u, 1 - u): frozen at u = 0.25 and 0.75
    for u in (0.25, 0.75):
        assert coupled_tk.G_at(0, 0.0, u) == pytest.approx([0.3875, -0.1825], abs=1e-9)
    u = np.linspace(0.0, 1.0, 9)
    expected = CONST_GB[0] + OMEGA0 * CONST_GB[1] * sbar(1.0, 2.0, 0.0, u)[:, None]
    assert np.allclose(coupled_tk.G_at(0, np.zeros_like(u), u), expected, atol=1e-9)


def test_tracking_kernel_of_constant_coupling(coupled_tk):
    # mu_2 / (mu_2 - mu_1) * omega0 = 1.4 on its whole support
    values = coupled_tk.F_at(0, 1, 0.0, np.array([0.5, 0.75, 1.0]))
    assert values == pytest.approx([1.4, 1.4, 1.4])
    assert coupled_tk.F_at(0, 1, 0.0, np.array([0.3]))[0] == 0.0


def test_single_channel_veff_is_identity():
    tk = build_tracking_kernels(stub([2.0], GridFunction.constant(np.zeros((1, 1))),
                                     GridFunction.constant([[1.0]])))
    signal = np.sin(np.arange(50) * 0.1)[:, None]
    assert np.array_equal(synthesize_veff(tk, signal, 0.01), signal)


def test_uncoupled_veff_is_time_shift():
    tk = build_tracking_kernels(stub([1.0, 2.0], GridFunction.constant(np.zeros((2, 2))),
                                     GridFunction.constant(CONST_GB)))
    dt = 0.01
    t = dt * np.arange(301)
    signal = np.stack([np.sin(t), np.cos(3 * t)], axis=-1)
    veff = synthesize_veff(tk, signal, dt)
    assert np.array_equal(veff[:, 0], signal[:, 0])
    lead = 50                               # (1/mu_1 - 1/mu_2) / dt
    assert np.array_equal(veff[lead:, 1], signal[:-lead, 1])


def test_step_response_against_riemann_oracle(coupled_tk):
    # oracle: left Riemann sum at 10x resolution, tests/oracles/derive_values.py
    frozen = {0.4: -0.14, 0.6: -0.42, 0.9: -0.7, 1.2: -0.7}
    dt = 1e-3
    t = dt * np.arange(1501)
    signal = np.stack([np.zeros_like(t), (t >= 0.3 - 1e-12).astype(float)], axis=-1)
    veff = synthesize_veff(coupled_tk, signal, dt)
    for tau, want in frozen.items():
        assert veff[int(round(tau / dt)), 0] == pytest.approx(want, abs=3 * 1.4 * dt)


@given(st.integers(1, 290), st.integers(0, 2**31 - 1))
def test_veff_is_causal(coupled_tk, cut, seed):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((301, 2))
    altered = base.copy()
    altered[cut + 1:] = rng.standard_normal((300 - cut, 2))
    first = synthesize_veff(coupled_tk, base, 0.01)
    second = synthesize_veff(coupled_tk, altered, 0.01)
    assert np.array_equal(first[:cut + 1], second[:cut + 1])


def test_synthesizer_rejects_out_of_order_steps(coupled_tk):
    synth = VeffSynthesizer(coupled_tk, 0.01, 10)
    synth.step(3, np.zeros(2))
    with pytest.raises(HyperSdeValueError):
        synth.step(2, np.zeros(2))
    with pytest.raises(HyperSdeValueError):
        synth.value(5)


def test_per_channel_mode_requires_uncoupled_channels(coupled_tk):
    with pytest.raises(HyperSdeValueError):
        VeffSynthesizer(coupled_tk, 0.01, 10, uniform=False)


def test_noiseless_boundary_is_delayed_signal(coupled_tk):
    dt = 0.01
    t = dt * np.arange(301)
    signal = np.stack([np.sin(t), t], axis=-1)
    out = beta_explicit(coupled_tk, signal, np.zeros((1, 300)), dt, GridFunction.constant([0.3, 0.3]))
    assert np.array_equal(out[0, 100:], signal[:201])
    silent = beta_explicit(coupled_tk, np.zeros_like(signal), np.ones((1, 300)), dt,
                           GridFunction.constant([0.0, 0.0]))
    assert not np.any(silent)


def test_boundary_variance_of_constant_kernel():
    # g0^2 sigma0^2 / mu = 0.5^2 * 0.3^2 / 2 = 0.01125
    tk = build_tracking_kernels(stub([2.0], GridFunction.constant(np.zeros((1, 1))),
                                     GridFunction.constant([[0.5]])))
    dt, paths = 1e-3, 4000
    dW = np.random.default_rng(5).standard_normal((paths, 600)) * np.sqrt(dt)
    out = beta_explicit(tk, np.zeros((601, 1)), dW, dt, GridFunction.constant([0.3]))
    var = out[:, -1, 0].var(ddof=1)
    stderr = var * np.sqrt(2.0 / (paths - 1))
    assert abs(var - 0.01125) <= 5 * stderr


def test_target_boundary_tracks_signal_at_first_order(coupled_system):
    # signals start with zero value and slope: a kink at onset would be
    # smeared by upwind diffusion over sqrt(dx t) and converge at half order
    errors = []
    for nx in (51, 101):
        kernels = solve_kernels(coupled_system, nx=nx)
        tk = build_tracking_kernels(kernels, coupled_system)
        dt = (1.0 / (nx - 1)) / 2.0
        nsteps = int(round(3.0 / dt))
        t = dt * np.arange(nsteps + 1)
        signal = np.stack([np.sin(t) ** 2, 1.0 - np.cos(3 * t)], axis=-1)
        veff = synthesize_veff(tk, signal, dt)
        run = simulate_target(coupled_system, kernels, nx, dt, 3.0, np.zeros((1, nsteps)),
                              effective_input=lambda k, tt: veff[k])
        lag = int(round(1.0 / dt))
        errors.append(np.max(np.abs(run.beta_left[0, lag:] - signal[:nsteps + 1 - lag])))
    assert errors[1] < 0.06
    assert errors[0] / errors[1] >= 1.6


def test_boundary_variance_matches_quadrature_in_target_sim():
    # single channel at unit Courant number: the transport step is exact
    gb = GridFunction.from_callable(lambda y: [[0.1 + np.sin(3 * y)]], 0.0, 1.0, 201)
    tk = build_tracking_kernels(stub([1.0], GridFunction.constant(np.zeros((1, 1))), gb))
    nx, paths = 101, 3000
    dt = 1.0 / (nx - 1)
    dW = np.random.default_rng(9).standard_normal((paths, 150)) * np.sqrt(dt)
    out = beta_explicit(tk, np.zeros((151, 1)), dW, dt, GridFunction.constant([1.0]))
    lags = np.linspace(0.0, 1.0, 2001)
    quad = np.trapezoid(tk.boundary_noise_kernel(lags)[:, 0, 0] ** 2, lags)
    var = out[:, -1, 0].var(ddof=1)
    assert abs(var - quad) <= 5 * var * np.sqrt(2.0 / (paths - 1)) + 0.02 * quad


def test_noise_kernel_csv(tmp_path, coupled_tk):
    path = tmp_path / 'g.csv'
    write_noise_kernel_csv(coupled_tk, path)
    header = path.read_text().splitlines()[0]
    assert header.startswith('u,G[0,0]')
