import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hypersde.model import system_from_dict
from hypersde.reduction import attach_noise, delayed_sde_from_dict, kalman_decompose

settings.register_profile('default', deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile('default')

CONFIGS = Path(__file__).resolve().parent.parent / 'configs'

SIM_DELAYED = {'A': [[0.4, 0.4], [0.0, 0.4]], 'B': [[2.0, -2.0], [0.0, 2.0]],
               'delays': [0.5, 1.0], 'memory': {'tag': 'exp_decay(0.2)'},
               'sigma': [0.3, 0.3], 'X0': [1.0, 1.0], 'T': 10.0}


def samples(func, npoints=201):
    return {'samples': [np.asarray(func(x)).tolist() for x in np.linspace(0.0, 1.0, npoints)]}


def config_path(name):
    return str(CONFIGS / name)


def load_raw(name):
    with open(config_path(name)) as fh:
        return json.load(fh)


@pytest.fixture(scope='session')
def sim_sde():
    return delayed_sde_from_dict(SIM_DELAYED)


@pytest.fixture(scope='session')
def sim_kf(sim_sde):
    return attach_noise(kalman_decompose(sim_sde.A, sim_sde.Bcols), sim_sde)


@pytest.fixture(scope='session')
def smooth_system():
    return system_from_dict(load_raw('smooth_scalar.json')['system'])


@pytest.fixture(scope='session')
def coupled_system():
    return system_from_dict(load_raw('coupled_2x2.json')['system'])


@pytest.fixture(scope='session')
def general_system():
    """Two rightward, two leftward channels, every coupling present."""
    d = {'lambda': [1.0, 1.6], 'mu': [1.2, 2.0], 'A': [[0.2, 1.0], [0.0, -0.1]],
         'B': [[0.0, 0.3], [1.0, 0.5]], 'Mb': [[0.5, 0.2], [0.1, 0.3]],
         'Qb': [[0.5, 0.1], [0.2, 0.3]], 'Rb': [[0.3, 0.0], [0.1, 0.2]],
         'sigma_pp': samples(lambda x: [[0, 0.3 + 0.2 * x], [0.4, 0]]),
         'sigma_pm': samples(lambda x: [[0.5, 0.1], [0.2, -0.3 * x]]),
         'sigma_mp': samples(lambda x: [[0.2, 0.1], [np.sin(x), 0.3]]),
         'sigma_mm': samples(lambda x: [[0, 0.25], [-0.3, 0]]),
         'X0': [1.0, -0.5], 'u0': samples(lambda x: [np.sin(3 * x), x]),
         'v0': samples(lambda x: [np.cos(2 * x), 1 - x]), 'T': 3.0,
         'sigma_t': [0.2, 0.1]}
    return system_from_dict(d)
