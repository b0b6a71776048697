"""Backstepping kernels on the triangle ``0 <= y <= x <= 1``.

The transform

    alpha = u + int_0^x Kuu u + int_0^x Kuv v + gamma_alpha X
    beta  = v + int_0^x Kvu u + int_0^x Kvv v + gamma_beta X

maps the coupled plant to a target system in which the rightward states see
only a strictly upper triangular coupling ``psi`` plus a boundary feed
``boundary_gain(x) beta(t, 0)``, and the leftward states see only the
strictly upper triangular ``omega``.

Every kernel entry satisfies a first-order transport equation whose
characteristics are straight lines.  Each Picard sweep integrates the
current source term backwards along those lines to the boundary piece that
carries data (the diagonal or the edge ``y = 0``).
"""
from dataclasses import dataclass

import numpy as np

from ._accel import segment_integrals, tri_interp
from .errors import ConvergenceError, DimensionError, HyperSdeValueError
from .model import GridFunction

__all__ = ['KernelSet', 'solve_kernels', 'v_pde', 'backstep',
           'inverse_backstep', 'pde_boundary_controller', 'save_kernels',
           'load_kernels', 'SPEED_TOL']

SPEED_TOL = 1e-12
FAMILIES = ('Kuu', 'Kuv', 'Kvu', 'Kvv')


@dataclass(frozen=True)
class KernelSet:
    """Solved kernels sampled on the uniform mesh ``x`` (square arrays).

    ``Kuu[p, q]`` is the ``n x n`` kernel at ``(x_p, x_q)`` for ``q <= p``;
    entries above the diagonal repeat the diagonal value so interpolation
    near the diagonal stays well defined.
    """
    x: np.ndarray
    Kuu: np.ndarray
    Kuv: np.ndarray
    Kvu: np.ndarray
    Kvv: np.ndarray
    gamma_alpha: GridFunction
    gamma_beta: GridFunction
    psi: GridFunction
    omega: GridFunction
    boundary_gain: GridFunction
    lam: np.ndarray
    mu: np.ndarray
    Qb: np.ndarray
    Rb: np.ndarray
    Mb: np.ndarray
    B: np.ndarray
    residual_norm: float
    increment: float
    iterations: int

    @property
    def nx(self):
        return self.x.size

    @property
    def Psi(self):
        return self.psi

    @property
    def Omega(self):
        return self.omega

    @property
    def n(self):
        return self.lam.size

    @property
    def m(self):
        return self.mu.size

    @property
    def N(self):
        return self.Mb.shape[1]

    def at(self, name, xs, ys):
        """Interpolate kernel ``name`` at points with ``ys <= xs``."""
        field = getattr(self, name)
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        out = np.empty(xs.shape + field.shape[2:])
        for idx in np.ndindex(*field.shape[2:]):
            out[(...,) + idx] = tri_interp(field[(slice(None), slice(None)) + idx],
                                           xs.ravel(), ys.ravel()).reshape(xs.shape)
        return out


def _check_speeds(name, speeds):
    gaps = np.abs(speeds[:, None] - speeds[None, :])
    np.fill_diagonal(gaps, np.inf)
    if gaps.size and gaps.min() < SPEED_TOL:
        raise HyperSdeValueError('%s speeds coincide; the diagonal relation '
                                 'cannot be solved for off-diagonal entries' % name)


def _extend_above_diagonal(field):
    """Copy each row's diagonal value into the cells above the diagonal."""
    nx = field.shape[0]
    rows, cols = np.triu_indices(nx, 1)
    field[rows, cols] = field[rows, rows]
    return field


class _Mesh:
    def __init__(self, system, nx):
        self.nx = nx
        self.x = np.linspace(0.0, 1.0, nx)
        self.h = 1.0 / (nx - 1)
        self.rows, self.cols = np.tril_indices(nx)
        self.px = self.x[self.rows]
        self.py = self.x[self.cols]
        self.lam = np.asarray(system.lam, dtype=float)
        self.mu = np.asarray(system.mu, dtype=float)
        self.sys = system
        self.spp = system.sigma_pp(self.x)
        self.spm = system.sigma_pm(self.x)
        self.smp = system.sigma_mp(self.x)
        self.smm = system.sigma_mm(self.x)

    def nodes(self, length, speed):
        return int(np.ceil(length * speed / self.h)) + 2


def _sources(mesh, K, psi, omega):
    """Right-hand sides of the four transport equations on the full square."""
    Kuu, Kuv, Kvu, Kvv = K['Kuu'], K['Kuv'], K['Kvu'], K['Kvv']
    mm = np.einsum
    return {
        'Kuu': (-mm('pqab,qbc->pqac', Kuu, mesh.spp) - mm('pqab,qbc->pqac', Kuv, mesh.smp)
                + mm('pab,pqbc->pqac', psi, Kuu)),
        'Kuv': (-mm('pqab,qbc->pqac', Kuu, mesh.spm) - mm('pqab,qbc->pqac', Kuv, mesh.smm)
                + mm('pab,pqbc->pqac', psi, Kuv)),
        'Kvu': (-mm('pqab,qbc->pqac', Kvu, mesh.spp) - mm('pqab,qbc->pqac', Kvv, mesh.smp)
                + mm('pab,pqbc->pqac', omega, Kvu)),
        'Kvv': (-mm('pqab,qbc->pqac', Kvu, mesh.spm) - mm('pqab,qbc->pqac', Kvv, mesh.smm)
                + mm('pab,pqbc->pqac', omega, Kvv)),
    }


def _characteristic(mesh, family, i, j):
    """Direction, sign and a data function for entry ``(i, j)``.

    Along ``P + s * direction`` the kernel obeys ``dK/ds = sign * S``.
    ``end(x, y)`` returns ``(s_end, data_fn)`` where ``data_fn(xe, ye, diag)``
    gives the boundary value at the end point.
    """
    lam, mu = mesh.lam, mesh.mu
    if family == 'Kuu':
        return (-lam[i], -lam[j]), -1.0
    if family == 'Kuv':
        return (-lam[i], mu[j]), -1.0
    if family == 'Kvu':
        return (-mu[i], lam[j]), 1.0
    return (-mu[i], -mu[j]), 1.0


def _end_points(mesh, family, i, j):
    """Parameter where each mesh point's characteristic meets its data."""
    lam, mu, xs, ys = mesh.lam, mesh.mu, mesh.px, mesh.py
    if family == 'Kuv':
        return (xs - ys) / (lam[i] + mu[j]), np.ones(xs.size, dtype=bool)
    if family == 'Kvu':
        return (xs - ys) / (mu[i] + lam[j]), np.ones(xs.size, dtype=bool)
    speeds = lam if family == 'Kuu' else mu
    bottom = ys / speeds[j]
    if i > j:
        diag = (xs - ys) / (speeds[i] - speeds[j])
        on_diag = diag < bottom
        return np.where(on_diag, diag, bottom), on_diag
    return bottom, np.zeros(xs.size, dtype=bool)


def _boundary_values(mesh, family, i, j, s_end, on_diag, vv_bottom):
    direction, _ = _characteristic(mesh, family, i, j)
    xe = np.clip(mesh.px + direction[0] * s_end, 0.0, 1.0)
    lam, mu, sys = mesh.lam, mesh.mu, mesh.sys
    if family == 'Kuu':
        diag = -sys.sigma_pp(xe)[:, i, j] / (lam[i] - lam[j]) if i > j else 0.0
        return np.where(on_diag, diag, 0.0)
    if family == 'Kuv':
        return -sys.sigma_pm(xe)[:, i, j] / (lam[i] + mu[j])
    if family == 'Kvu':
        return sys.sigma_mp(xe)[:, i, j] / (mu[i] + lam[j])
    bottom = np.interp(xe, mesh.x, vv_bottom[:, i, j])
    if i > j:
        diag = -sys.sigma_mm(xe)[:, i, j] / (mu[j] - mu[i])
        return np.where(on_diag, diag, bottom)
    return bottom


def _gamma_odes(mesh, K, psi, omega):
    """Heun integration of the gamma ODEs with lagged kernel boundary traces."""
    sys = mesh.sys
    A = np.asarray(sys.A, dtype=float)
    M = np.asarray(sys.Mb, dtype=float)
    lam, mu, h = mesh.lam, mesh.mu, mesh.h
    feed_beta = np.einsum('pab,b,bc->pac', K['Kvu'][:, 0], lam, M)
    feed_alpha = np.einsum('pab,b,bc->pac', K['Kuu'][:, 0], lam, M)

    def rhs_beta(p, gam):
        return (gam @ A + feed_beta[p] - omega[p] @ gam) / mu[:, None]

    def rhs_alpha(p, gam):
        return (psi[p] @ gam - gam @ A - feed_alpha[p]) / lam[:, None]

    out = []
    for rhs, start in ((rhs_alpha, -M), (rhs_beta, np.zeros((mu.size, A.shape[0])))):
        vals = np.empty((mesh.nx,) + start.shape)
        vals[0] = start
        for p in range(mesh.nx - 1):
            slope = rhs(p, vals[p])
            guess = vals[p] + h * slope
            vals[p + 1] = vals[p] + 0.5 * h * (slope + rhs(p + 1, guess))
        out.append(vals)
    return out


def _traces(mesh, K):
    """``psi`` and ``omega`` from the diagonal traces of Kuu and Kvv."""
    diag = np.arange(mesh.nx)
    lam, mu = mesh.lam, mesh.mu
    upper_n = np.triu(np.ones((lam.size, lam.size)), 1)
    upper_m = np.triu(np.ones((mu.size, mu.size)), 1)
    psi = ((lam[:, None] - lam[None, :]) * K['Kuu'][diag, diag] + mesh.spp) * upper_n
    omega = ((mu[None, :] - mu[:, None]) * K['Kvv'][diag, diag] + mesh.smm) * upper_m
    return psi, omega


def _sweep(mesh, K, psi, omega):
    gamma_alpha, gamma_beta = _gamma_odes(mesh, K, psi, omega)
    sys = mesh.sys
    vv_bottom = (np.einsum('pab,b,bc->pac', K['Kvu'][:, 0], mesh.lam, sys.Qb)
                 + gamma_beta @ np.asarray(sys.B, dtype=float)) / mesh.mu[None, None, :]
    src = _sources(mesh, K, psi, omega)
    new = {}
    for family in FAMILIES:
        field = np.zeros_like(K[family])
        for i, j in np.ndindex(*field.shape[2:]):
            direction, sign = _characteristic(mesh, family, i, j)
            s_end, on_diag = _end_points(mesh, family, i, j)
            data = _boundary_values(mesh, family, i, j, s_end, on_diag, vv_bottom)
            speed = np.hypot(*direction)
            integral = segment_integrals(src[family][:, :, i, j], mesh.px, mesh.py,
                                         direction[0], direction[1], s_end,
                                         mesh.nodes(s_end.max(initial=0.0), speed))
            field[mesh.rows, mesh.cols, i, j] = data - sign * integral
        new[family] = _extend_above_diagonal(field)
    return new, gamma_alpha, gamma_beta


def _residual(mesh, K, psi, omega):
    """Max one-sided difference residual along characteristics at interior points."""
    src = _sources(mesh, K, psi, omega)
    worst = 0.0
    for family in FAMILIES:
        for i, j in np.ndindex(*K[family].shape[2:]):
            direction, sign = _characteristic(mesh, family, i, j)
            s_end, _ = _end_points(mesh, family, i, j)
            step = mesh.h / max(abs(direction[0]), abs(direction[1]))
            keep = (s_end >= step * (1 - 1e-9)) & (mesh.rows < mesh.nx - 1)
            if not np.any(keep):
                continue
            xs, ys = mesh.px[keep], mesh.py[keep]
            field = K[family][:, :, i, j]
            here = field[mesh.rows[keep], mesh.cols[keep]]
            ahead = tri_interp(field, xs + step * direction[0], ys + step * direction[1])
            res = (ahead - here) / step - sign * src[family][mesh.rows[keep], mesh.cols[keep], i, j]
            worst = max(worst, float(np.max(np.abs(res))))
    return worst


def solve_kernels(system, nx=128, tol=1e-10, max_iter=200):
    """Picard iteration for the kernels, gamma profiles and target couplings.

    Iterates until the largest change of any kernel or gamma sample between
    sweeps is at most ``tol``.  ``residual_norm`` of the result is the
    discretisation residual along characteristics, which decays like
    ``1/nx``.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` sweeps do not bring the change below ``tol``.
    """
    if nx < 8:
        raise HyperSdeValueError('nx must be at least 8')
    if tol <= 0:
        raise HyperSdeValueError('tol must be positive')
    system.check_shapes()
    mesh = _Mesh(system, nx)
    _check_speeds('rightward', mesh.lam)
    _check_speeds('leftward', mesh.mu)
    n, m = mesh.lam.size, mesh.mu.size
    K = {'Kuu': np.zeros((nx, nx, n, n)), 'Kuv': np.zeros((nx, nx, n, m)),
         'Kvu': np.zeros((nx, nx, m, n)), 'Kvv': np.zeros((nx, nx, m, m))}
    psi = np.zeros((nx, n, n))
    omega = np.zeros((nx, m, m))
    g_alpha = g_beta = None
    change = np.inf
    sweeps = 0
    while sweeps < max_iter:
        new, ga, gb = _sweep(mesh, K, psi, omega)
        change = max(float(np.max(np.abs(new[f] - K[f]), initial=0.0)) for f in FAMILIES)
        if g_alpha is not None:
            change = max(change, float(np.max(np.abs(ga - g_alpha), initial=0.0)),
                         float(np.max(np.abs(gb - g_beta), initial=0.0)))
        new_psi, new_omega = _traces(mesh, new)
        change = max(change, float(np.max(np.abs(new_psi - psi), initial=0.0)),
                     float(np.max(np.abs(new_omega - omega), initial=0.0)))
        K, g_alpha, g_beta, psi, omega = new, ga, gb, new_psi, new_omega
        sweeps += 1
        if change <= tol:
            break
    else:
        raise ConvergenceError('Picard iteration stalled at change %.3g after %d sweeps'
                               % (change, sweeps), residual=change)
    # final gamma pass so the profiles match the converged kernels
    g_alpha, g_beta = _gamma_odes(mesh, K, psi, omega)
    lam_Q = mesh.lam[:, None] * np.asarray(system.Qb, dtype=float)
    gain = (np.einsum('pab,bc->pac', K['Kuu'][:, 0], lam_Q)
            - K['Kuv'][:, 0] * mesh.mu[None, None, :]
            + g_alpha @ np.asarray(system.B, dtype=float))
    grid = mesh.x
    return KernelSet(
        x=grid, Kuu=K['Kuu'], Kuv=K['Kuv'], Kvu=K['Kvu'], Kvv=K['Kvv'],
        gamma_alpha=GridFunction(grid, g_alpha), gamma_beta=GridFunction(grid, g_beta),
        psi=GridFunction(grid, psi), omega=GridFunction(grid, omega),
        boundary_gain=GridFunction(grid, gain),
        lam=mesh.lam, mu=mesh.mu, Qb=np.asarray(system.Qb, dtype=float),
        Rb=np.asarray(system.Rb, dtype=float), Mb=np.asarray(system.Mb, dtype=float),
        B=np.asarray(system.B, dtype=float),
        residual_norm=_residual(mesh, K, psi, omega), increment=change,
        iterations=sweeps)


def _trapezoid_weights(npts, step):
    w = np.full(npts, step)
    w[0] = w[-1] = 0.5 * step
    return w


def _conforming(kernels, X, u, v):
    X = np.asarray(X, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape[-2:] != (kernels.nx, kernels.n) or v.shape[-2:] != (kernels.nx, kernels.m):
        raise DimensionError('state grids must have shape (..., %d, n) / (..., %d, m)'
                             % (kernels.nx, kernels.nx))
    if X.shape[-1] != kernels.N:
        raise DimensionError('X must have %d components' % kernels.N)
    return X, u, v


def v_pde(kernels, X, u, v):
    """Stabilising boundary input ``-Rb u(1) - gamma_beta(1) X - int Kvu(1,.) u - int Kvv(1,.) v``.

    ``u`` and ``v`` are sampled on the kernel mesh with shape ``(..., nx, n)``
    and ``(..., nx, m)``; leading axes (paths) broadcast.
    """
    X, u, v = _conforming(kernels, X, u, v)
    w = _trapezoid_weights(kernels.nx, kernels.x[1] - kernels.x[0])
    last = kernels.nx - 1
    integral = (np.einsum('y,yab,...yb->...a', w, kernels.Kvu[last], u)
                + np.einsum('y,yab,...yb->...a', w, kernels.Kvv[last], v))
    return (-u[..., last, :] @ kernels.Rb.T - X @ kernels.gamma_beta.values[last].T
            - integral)


def _volterra_weights(nx, step):
    """``W[p, q]``: trapezoid weights of ``int_0^{x_p}`` on the first ``p+1`` nodes."""
    W = np.tril(np.full((nx, nx), step))
    idx = np.arange(nx)
    W[:, 0] = 0.5 * step
    W[idx, idx] = 0.5 * step
    W[0, 0] = 0.0
    return W


def backstep(kernels, X, u, v):
    """Forward transform ``(X, u, v) -> (alpha, beta)`` by trapezoid quadrature."""
    X, u, v = _conforming(kernels, X, u, v)
    W = _volterra_weights(kernels.nx, kernels.x[1] - kernels.x[0])
    alpha = (u + np.einsum('pq,pqab,...qb->...pa', W, kernels.Kuu, u)
             + np.einsum('pq,pqab,...qb->...pa', W, kernels.Kuv, v)
             + np.einsum('pab,...b->...pa', kernels.gamma_alpha.values, X))
    beta = (v + np.einsum('pq,pqab,...qb->...pa', W, kernels.Kvu, u)
            + np.einsum('pq,pqab,...qb->...pa', W, kernels.Kvv, v)
            + np.einsum('pab,...b->...pa', kernels.gamma_beta.values, X))
    return alpha, beta


def inverse_backstep(kernels, X, alpha, beta):
    """Invert :func:`backstep` by marching the Volterra relation from ``x = 0``."""
    X, alpha, beta = _conforming(kernels, X, alpha, beta)
    n, m, nx = kernels.n, kernels.m, kernels.nx
    W = _volterra_weights(nx, kernels.x[1] - kernels.x[0])
    full = np.zeros((nx, nx, n + m, n + m))
    full[:, :, :n, :n] = kernels.Kuu
    full[:, :, :n, n:] = kernels.Kuv
    full[:, :, n:, :n] = kernels.Kvu
    full[:, :, n:, n:] = kernels.Kvv
    gamma = np.concatenate([kernels.gamma_alpha.values, kernels.gamma_beta.values], axis=1)
    target = (np.concatenate([alpha, beta], axis=-1)
              - np.einsum('pab,...b->...pa', gamma, X))
    state = np.zeros_like(target)
    eye = np.eye(n + m)
    for p in range(nx):
        known = np.einsum('q,qab,...qb->...a', W[p, :p], full[p, :p], state[..., :p, :])
        system = eye + W[p, p] * full[p, p]
        state[..., p, :] = np.linalg.solve(system, (target[..., p, :] - known)[..., None])[..., 0]
    return state[..., :n], state[..., n:]


def pde_boundary_controller(kernels, effective_input=None):
    """Boundary law ``V = V_PDE + V_eff`` for :func:`hypersde.sim.simulate_coupled`.

    ``V_PDE`` depends on ``v(1)`` through the trapezoid end weight; the
    returned callable solves that scalar-in-``v(1)`` relation implicitly so
    that ``v(1) = Rb u(1) + V`` holds exactly at every step.
    """
    step = kernels.x[1] - kernels.x[0]
    last = kernels.nx - 1
    w = _trapezoid_weights(kernels.nx, step)
    w_open = w.copy()
    w_open[last] = 0.0
    implicit = np.eye(kernels.m) + 0.5 * step * kernels.Kvv[last, last]

    def control(k, t, X, u, v):
        rest = (-X @ kernels.gamma_beta.values[last].T
                - np.einsum('y,yab,pyb->pa', w, kernels.Kvu[last], u)
                - np.einsum('y,yab,pyb->pa', w_open, kernels.Kvv[last], v))
        if effective_input is not None:
            rest = rest + effective_input(k, t)
        v_end = np.linalg.solve(implicit, rest.T).T
        return v_end - u[:, last] @ kernels.Rb.T

    return control


_ARRAYS = ('x', 'Kuu', 'Kuv', 'Kvu', 'Kvv', 'lam', 'mu', 'Qb', 'Rb', 'Mb', 'B')
_PROFILES = ('gamma_alpha', 'gamma_beta', 'psi', 'omega', 'boundary_gain')


def save_kernels(kernels, path):
    """Write mesh, kernel samples and profiles to an ``.npz`` archive."""
    payload = {name: getattr(kernels, name) for name in _ARRAYS}
    payload.update({name: getattr(kernels, name).values for name in _PROFILES})
    payload['scalars'] = np.array([kernels.residual_norm, kernels.increment,
                                   kernels.iterations], dtype=float)
    with open(path, 'wb') as fh:
        np.savez(fh, **payload)


def load_kernels(path):
    with np.load(path) as data:
        arrays = {name: data[name] for name in _ARRAYS}
        profiles = {name: GridFunction(arrays['x'], data[name]) for name in _PROFILES}
        scalars = data['scalars']
    return KernelSet(residual_norm=float(scalars[0]), increment=float(scalars[1]),
                     iterations=int(scalars[2]), **arrays, **profiles)
