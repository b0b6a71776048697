from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hypersde.errors import DimensionError, HyperSdeValueError
from hypersde.model import GridFunction, system_from_dict
from hypersde.reduction import (DelayedSde, attach_noise, delayed_sde_from_dict, dump_kalman_csv,
                                kalman_decompose, kalman_structure_errors,
                                random_controllable_pair, reduce)
from hypersde.sim import simulate_delayed, wiener_increments
from hypersde.tracking import build_tracking_kernels

from conftest import SIM_DELAYED


def test_delayed_example_splits_into_scalar_blocks(sim_kf):
    assert sim_kf.block_sizes == (1, 1)
    for i in range(2):
        assert sim_kf.A_block(i, i)[0, 0] == pytest.approx(0.4)
        assert abs(sim_kf.B_block(i)[0, 0]) == pytest.approx(2.0)
    assert sim_kf.A_block(1, 0)[0, 0] == pytest.approx(0.0, abs=1e-14)


@given(st.integers(0, 2**31 - 1))
def test_decomposition_structure_property(seed):
    rng = np.random.default_rng(seed)
    A, Bcols = random_controllable_pair(rng, max_states=5, max_inputs=2)
    kf = kalman_decompose(A, Bcols)
    errors = kalman_structure_errors(kf, A)
    assert errors['lower_block'] <= 1e-10
    assert errors['inverse'] <= 1e-10
    assert errors['similarity'] <= 1e-10
    assert errors['diagonal_controllable']
    assert np.allclose(kf.T_kal @ np.hstack(Bcols), kf.Bbar, atol=1e-10)
    assert sum(kf.block_sizes) == A.shape[0]


def test_generic_pair_of_five_states_two_inputs():
    rng = np.random.default_rng(11)
    A = rng.standard_normal((5, 5))
    Bcols = [rng.standard_normal((5, 1)), rng.standard_normal((5, 1))]
    kf = kalman_decompose(A, Bcols)
    errors = kalman_structure_errors(kf, A)
    assert errors['lower_block'] <= 1e-10 and errors['diagonal_controllable']


def test_form_already_triangular_is_a_fixed_point():
    A = np.array([[0.3, 1.0, 0.2], [0.0, -0.5, 0.7], [0.0, 0.4, 0.1]])
    Bcols = [np.array([[1.0], [0.0], [0.0]]), np.array([[0.5], [1.0], [0.0]])]
    kf = kalman_decompose(A, Bcols)
    assert kf.block_sizes == (1, 2)
    assert np.allclose(np.abs(kf.T_kal[0]), [1.0, 0.0, 0.0])
    assert np.allclose(kf.T_kal[1:, 0], 0.0)


def test_decomposition_drops_groups_without_new_directions():
    A = np.diag([1.0, 2.0])
    Bcols = [np.array([[1.0], [1.0]]), np.array([[1.0], [0.0]])]
    kf = kalman_decompose(A, Bcols)
    assert kf.block_sizes == (2,) and kf.groups == (0,)


def test_path_identity_under_the_integrator(sim_sde, sim_kf):
    """Simulating X and mapping by T_kal equals simulating Z directly."""
    z_sde = DelayedSde(A=sim_kf.Abar,
                       Bcols=[sim_kf.Bbar[:, sl] for sl in sim_kf.input_slices],
                       h=sim_sde.h, Gmem=sim_kf.Gbar, sigma_t=sim_kf.sigbar,
                       X0=sim_kf.T_kal @ sim_sde.X0, T=sim_sde.T)
    dt = 2e-3
    dW = wiener_increments(np.random.SeedSequence(4).spawn(20), 1000, dt)
    x_run = simulate_delayed(sim_sde, dt, 2.0, dW)
    z_run = simulate_delayed(z_sde, dt, 2.0, dW)
    assert np.max(np.abs(x_run.X @ sim_kf.T_kal.T - z_run.X)) <= 1e-10


def _stub_kernels(omega, mu, gamma_beta):
    return SimpleNamespace(mu=np.asarray(mu), nx=51, omega=omega, gamma_beta=gamma_beta)


def _system(mu):
    return system_from_dict({'lambda': [1.0], 'mu': mu, 'A': [[0.4, 0.4], [0.0, 0.4]],
                             'B': [[2.0, -2.0], [0.0, 2.0]], 'sigma_t': [0.3, 0.3], 'T': 4.0})


def test_uncoupled_channels_give_ordered_delays():
    system = _system([1.0, 2.0])
    kernels = _stub_kernels(GridFunction.constant(np.zeros((2, 2))), [1.0, 2.0],
                            GridFunction.constant([[0.2, 0.0], [0.0, 0.3]]))
    sde = reduce(system, kernels, build_tracking_kernels(kernels))
    assert np.allclose(sde.h, [0.5, 1.0])
    assert np.array_equal(sde.Bcols[0][:, 0], system.B[:, 1])
    assert np.array_equal(sde.Bcols[1][:, 0], system.B[:, 0])


def test_coupled_channels_share_the_slowest_delay():
    system = _system([1.0, 2.0])
    kernels = _stub_kernels(GridFunction.constant([[0.0, 0.5], [0.0, 0.0]]), [1.0, 2.0],
                            GridFunction.constant([[0.2, 0.0], [0.0, 0.3]]))
    sde = reduce(system, kernels, build_tracking_kernels(kernels))
    assert np.allclose(sde.h, [1.0]) and len(sde.Bcols) == 1


def test_zero_gamma_gives_no_memory():
    system = _system([1.0, 2.0])
    kernels = _stub_kernels(GridFunction.constant([[0.0, 0.5], [0.0, 0.0]]), [1.0, 2.0],
                            GridFunction.constant(np.zeros((2, 2))))
    sde = reduce(system, kernels, build_tracking_kernels(kernels))
    assert not np.any(sde.Gmem.values)
    run = simulate_delayed(sde, 0.01, 2.0, np.ones((1, 200)))
    assert not np.any(run.r)


def test_delayed_sde_validation():
    with pytest.raises(HyperSdeValueError):
        delayed_sde_from_dict(dict(SIM_DELAYED, delays=[1.0, 0.5]))
    with pytest.raises(DimensionError):
        delayed_sde_from_dict(dict(SIM_DELAYED, delays=[0.5]))


def test_kalman_csv(tmp_path, sim_kf):
    path = tmp_path / 'kalman.csv'
    dump_kalman_csv(sim_kf, path)
    assert path.read_text().strip()
