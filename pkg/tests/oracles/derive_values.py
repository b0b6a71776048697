"""Independent oracles for the frozen constants in the test suite.

Nothing here imports ``hypersde``: every value comes from scipy quadrature,
an ODE solver, hand algebra or a plain Euler loop.  Run

    python tests/oracles/derive_values.py

and compare with the constants quoted in the tests.
"""
import math

import numpy as np
from scipy.integrate import quad, solve_ivp

SIM_A = np.array([[0.4, 0.4], [0.0, 0.4]])
THETA, SIGMA, H1, H2 = 0.2, 0.3, 0.5, 1.0


def isometry_exp():
    """int_0^1 e^{-0.2 s} e^{-0.2 s} ds."""
    return quad(lambda s: math.exp(-0.4 * s), 0.0, 1.0, epsabs=1e-14)[0]


def gamma_alpha_matrix():
    """lam g' = -g A, g(0) = -Mb for A = [[0.3,1],[0,-0.2]], lam = 1.5, Mb = [1, 0.5]."""
    A = np.array([[0.3, 1.0], [0.0, -0.2]])
    sol = solve_ivp(lambda x, g: -(g @ A) / 1.5, (0.0, 1.0), [-1.0, -0.5],
                    rtol=1e-12, atol=1e-14, dense_output=True)
    return {x: sol.sol(x).tolist() for x in (0.5, 1.0)}


def predictor_constant_input():
    """Z + int_0^h e^{-a s} b c ds with a=0.4, b=2, c=1, h=0.5 (Z = 0)."""
    return quad(lambda s: math.exp(-0.4 * s) * 2.0, 0.0, 0.5, epsabs=1e-14)[0]


def feedback_gain():
    """k with 0.4 - k * 2 e^{-0.4*0.5} = -1."""
    return 1.4 / (2.0 * math.exp(-0.2))


def veff_step_riemann(a=0.3, omega0=0.7, refine=10, dt=1e-3):
    """Brute-force V_eff_1 for mu=(1,2), F_12 = 2 omega0 on s in [1/2, 1],
    V_SDE = (0, 1{t >= a}), by a left Riemann sum at ``refine`` x finer step."""
    fine = dt / refine
    s = np.arange(0.5, 1.0, fine) + 0.5 * fine
    out = {}
    for tau in (0.4, 0.6, 0.9, 1.2):
        veff2 = ((tau + 1.0 - s) - 0.5 >= a).astype(float)   # V_eff_2(r) = V_SDE_2(r + 1/2 - 1)
        out[tau] = -float(np.sum(2.0 * omega0 * veff2) * fine)
    return out


def sigma_min_quadrature():
    """Sigma_min of both blocks of the delayed example with U = 0, from the
    window kernels evaluated by nested quadrature.  The Wiener process is
    scalar and sigma = (0.3, 0.3), so the two noise routes into block 1 add
    before squaring."""
    a = 0.4

    def gamma2(u):            # own noise plus memory, block 2 (no later blocks)
        return math.exp(a * u) + (math.exp(a * u) - math.exp(-THETA * u)) / (a + THETA)

    def gamma1(u):            # block 1: own noise, memory, and coupling 0.4 * block 2
        mem = (math.exp(a * u) - math.exp(-THETA * u)) / (a + THETA)
        cross = quad(lambda s: math.exp(a * (u - s)) * 0.4 * gamma2(s), 0.0, u,
                     epsabs=1e-14)[0]
        return math.exp(a * u) + mem, cross

    s2 = SIGMA ** 2 * quad(lambda u: gamma2(u) ** 2, 0.0, H2, epsabs=1e-13)[0]

    def load1(u):
        own, cross = gamma1(u)
        return (own + cross) ** 2

    s1 = SIGMA ** 2 * quad(load1, 0.0, H1, epsabs=1e-12)[0]
    return s1, s2


def sigma_min_monte_carlo(t_end=3.0, dt=2e-3, paths=20000, seed=12345):
    """Variance of X_i(t) minus the same path with noise removed on
    (t - h_i, t]; U = 0, memory e^{-theta u} I on [0, h_2], scalar Wiener
    process entering both components with weight 0.3."""
    rng = np.random.default_rng(seed)
    steps = int(round(t_end / dt))
    mem = int(round(H2 / dt))
    weights = np.exp(-THETA * dt * np.arange(1, mem + 1))
    dW = rng.standard_normal((paths, steps)) * math.sqrt(dt)
    result = []
    for block, h in ((0, H1), (1, H2)):
        cut = dW.copy()
        cut[:, steps - int(round(h / dt)):] = 0.0
        finals = []
        for noise in (dW, cut):
            xi = SIGMA * np.repeat(noise[:, :, None], 2, axis=2)
            X = np.zeros((paths, 2))
            for k in range(steps):
                lo = max(0, k - mem)
                past = xi[:, lo:k][:, ::-1]
                r = np.einsum('l,pln->pn', weights[:past.shape[1]], past)
                X = X + (X @ SIM_A.T + r) * dt + xi[:, k]
            finals.append(X[:, block])
        diff = finals[0] - finals[1]
        result.append(float(diff.var(ddof=1)))
    return result


if __name__ == '__main__':
    print('isometry e^{-0.2s}^2 on [0,1]:', repr(isometry_exp()))
    print('gamma_alpha matrix case:', gamma_alpha_matrix())
    print('predictor constant input:', repr(predictor_constant_input()))
    print('feedback gain:', repr(feedback_gain()))
    print('V_eff step riemann:', veff_step_riemann())
    print('Sigma_min quadrature:', sigma_min_quadrature())
    print('Sigma_min Monte Carlo:', sigma_min_monte_carlo())
