"""Reduction of the tracked plant to a multi-input delayed SDE, and the
nested controllability (extended Kalman) decomposition of that SDE.

A DelayedSde describes

    dX(t) = (A X(t) + sum_i B_i U_i(t - h_i) + r(t)) dt + sigma(t) dW_t,
    r(t)  = int_{t-h_m}^t Gmem(t - s) sigma(s) dW_s,

where ``Gmem`` is an ``N x N`` kernel on ``[0, h_m]`` (the input matrix is
already folded in).
"""
import csv
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import ControllabilityError, DimensionError, HyperSdeValueError
from .model import RANK_RTOL, GridFunction, parse_function

__all__ = ['DelayedSde', 'KalmanForm', 'reduce', 'kalman_decompose',
           'attach_noise', 'delayed_sde_from_dict', 'dump_kalman_csv',
           'random_controllable_pair', 'kalman_structure_errors']


@dataclass(frozen=True)
class DelayedSde:
    A: np.ndarray
    Bcols: list
    h: np.ndarray
    Gmem: GridFunction
    sigma_t: GridFunction
    X0: np.ndarray
    past_input: Optional[Callable] = None
    T: float = 10.0

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if h.ndim != 1 or h.size != len(self.Bcols) or h.size == 0:
            raise DimensionError('need one delay per input group')
        if h[0] <= 0 or np.any(np.diff(h) < 0):
            raise HyperSdeValueError('delays must be positive and increasing')
        N = self.A.shape[0]
        for cols in self.Bcols:
            if cols.ndim != 2 or cols.shape[0] != N:
                raise DimensionError('input group has shape %s, expected (%d, k)'
                                     % (cols.shape, N))
        if self.Gmem.value_shape != (N, N):
            raise DimensionError('memory kernel must be %dx%d' % (N, N))
        if self.sigma_t.value_shape != (N,):
            raise DimensionError('diffusion must have %d components' % N)

    @property
    def N(self):
        return self.A.shape[0]

    @property
    def B(self):
        return np.hstack(self.Bcols)

    @property
    def input_slices(self):
        out, start = [], 0
        for cols in self.Bcols:
            out.append(slice(start, start + cols.shape[1]))
            start += cols.shape[1]
        return out

    @property
    def n_inputs(self):
        return sum(cols.shape[1] for cols in self.Bcols)

    def past(self, t):
        """Input vector applied at time ``t < 0`` (all groups stacked)."""
        if self.past_input is None:
            return np.zeros(self.n_inputs)
        return np.asarray(self.past_input(t), dtype=float)


def reduce(system, kernels, tracking, beta0=None):
    """Build the delayed SDE seen by the ODE once the PDE is tracked.

    ``kernels.omega`` decides the form: if it vanishes every leftward
    component keeps its own transport delay ``1/mu_j`` and the groups are
    ordered by increasing delay (fastest component first); otherwise all
    inputs share the slowest-transit delay ``1/mu_1``.

    ``beta0``, if given, is the initial target state on ``[0, 1]`` and
    supplies the input history ``U(s) = beta(0, 1 + mu s)``.
    """
    mu = np.asarray(system.mu, dtype=float)
    m = mu.size
    noise = tracking.boundary_noise_kernel
    horizon = 1.0 / mu[0]
    grid = noise.grid
    memory = GridFunction(grid, np.einsum('nm,kmj->knj', system.B, noise.values))
    coupled = np.any(kernels.omega.values != 0.0)
    if coupled:
        Bcols = [np.asarray(system.B, dtype=float)]
        delays = np.array([horizon])
        order = np.arange(m)
    else:
        order = np.arange(m)[::-1]
        Bcols = [system.B[:, [j]] for j in order]
        delays = 1.0 / mu[order]
    past = None
    if beta0 is not None:
        speeds = mu[order]

        def past(t):
            xs = np.clip(1.0 + speeds * t, 0.0, 1.0)
            vals = np.array([beta0(x)[j] for x, j in zip(xs, order)])
            return np.where(1.0 + speeds * t >= 0.0, vals, 0.0)
    return DelayedSde(A=np.asarray(system.A, dtype=float), Bcols=Bcols,
                      h=delays, Gmem=memory, sigma_t=system.sigma_t,
                      X0=np.asarray(system.X0, dtype=float),
                      past_input=past, T=system.T)


@dataclass(frozen=True)
class KalmanForm:
    """Nested controllability form ``Z = T_kal X``.

    ``groups[i]`` is the input group driving block ``i``; groups whose block
    would be empty are dropped, so there may be fewer blocks than groups.
    """
    T_kal: np.ndarray
    T_inv: np.ndarray
    Abar: np.ndarray
    Bbar: np.ndarray
    block_sizes: tuple
    groups: tuple
    input_slices: tuple
    Gbar: Optional[GridFunction] = None
    sigbar: Optional[GridFunction] = None

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.block_sizes)]).astype(int)

    def block(self, i):
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return slice(lo, hi)

    def projection(self, i):
        return np.eye(self.Abar.shape[0])[self.block(i)]

    def A_block(self, i, j):
        return self.Abar[self.block(i), self.block(j)]

    def B_block(self, i, j=None):
        group = self.groups[i if j is None else j]
        return self.Bbar[self.block(i), self.input_slices[group]]


def _orth(mat, tol):
    if mat.size == 0:
        return mat[:, :0]
    left, sv, _ = np.linalg.svd(mat, full_matrices=False)
    return left[:, sv > tol]


def _controllable_basis(A, B, tol):
    """Orthonormal basis of the Krylov space of (A, B), block-Arnoldi style."""
    dim = A.shape[0]
    basis = _orth(B, tol)
    fresh = basis
    while fresh.shape[1] and basis.shape[1] < dim:
        cand = A @ fresh
        cand = cand - basis @ (basis.T @ cand)
        cand = cand - basis @ (basis.T @ cand)
        fresh = _orth(cand, tol)
        basis = np.hstack([basis, fresh])
    return basis


def kalman_decompose(A, Bcols, rtol=RANK_RTOL):
    """Extended Kalman decomposition by induction over the input groups.

    Stage ``i`` splits the remaining state into the part reachable from
    group ``i`` and an orthogonal complement, then recurses on the
    complement with the remaining groups.

    Raises
    ------
    ControllabilityError
        If the groups together do not control the whole state.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Bcols = [np.asarray(b, dtype=float).reshape(A.shape[0], -1) for b in Bcols]
    N = A.shape[0]
    B = np.hstack(Bcols)
    scale = max(np.linalg.norm(A, 2), np.linalg.norm(B, 2), 1e-300)
    tol = rtol * scale
    transform = np.eye(N)
    sizes, groups = [], []
    offset = 0
    for g, cols in enumerate(Bcols):
        rest = N - offset
        if rest == 0:
            break
        sub = transform[offset:]
        A_rest = sub @ A @ sub.T
        basis = _controllable_basis(A_rest, sub @ cols, tol)
        if basis.shape[1] == 0:
            continue
        comp = _orth(np.eye(rest) - basis @ basis.T, 0.5)
        stage = np.hstack([basis, comp])
        transform[offset:] = stage.T @ sub
        sizes.append(basis.shape[1])
        groups.append(g)
        offset += basis.shape[1]
    if offset < N:
        raise ControllabilityError(
            'input groups jointly reach only %d of %d states' % (offset, N),
            rank=offset)
    slices = []
    start = 0
    for cols in Bcols:
        slices.append(slice(start, start + cols.shape[1]))
        start += cols.shape[1]
    T_inv = transform.T
    return KalmanForm(T_kal=transform, T_inv=T_inv,
                      Abar=transform @ A @ T_inv, Bbar=transform @ B,
                      block_sizes=tuple(sizes), groups=tuple(groups),
                      input_slices=tuple(slices))


def attach_noise(kf, sde):
    """Return ``kf`` with the memory kernel and diffusion in Z coordinates."""
    Gbar = GridFunction(sde.Gmem.grid,
                        kf.T_kal @ sde.Gmem.values @ kf.T_inv)
    sigbar = GridFunction(sde.sigma_t.grid, sde.sigma_t.values @ kf.T_kal.T)
    return replace(kf, Gbar=Gbar, sigbar=sigbar)


def delayed_sde_from_dict(d):
    """Construct a DelayedSde from a parsed JSON object.

    Keys: ``A``, ``B`` (N x k), ``delays``, optional ``groups`` (list of column
    index lists, one per delay; default one column per delay), ``memory``
    (function spec on ``[0, h_m]``, scalar or N x N values), ``sigma`` (function
    spec on ``[0, T]``), ``X0``, ``T``.
    """
    A = np.atleast_2d(np.asarray(d['A'], dtype=float))
    N = A.shape[0]
    B = np.asarray(d['B'], dtype=float).reshape(N, -1)
    delays = np.asarray(d['delays'], dtype=float)
    groups = d.get('groups', [[j] for j in range(B.shape[1])])
    T = float(d.get('T', 10.0))
    memory = d.get('memory', 0.0)
    if isinstance(memory, dict) and 'value' not in memory and 'samples' not in memory:
        memory = dict(memory, value=np.eye(N).tolist())
    mem = parse_function(memory, 0.0, float(delays[-1]))
    if mem.value_shape == ():
        mem = GridFunction(mem.grid, mem.values[:, None, None] * np.eye(N))
    sigma = parse_function(d.get('sigma', np.zeros(N)), 0.0, T)
    return DelayedSde(A=A, Bcols=[B[:, cols] for cols in groups], h=delays,
                      Gmem=mem, sigma_t=sigma,
                      X0=np.asarray(d.get('X0', np.zeros(N)), dtype=float),
                      T=T)


def dump_kalman_csv(kf, path):
    """Write T_kal, Abar, Bbar and the block layout as an audit CSV."""
    with open(path, 'w', newline='') as fh:
        out = csv.writer(fh)
        out.writerow(['block_sizes'] + list(kf.block_sizes))
        out.writerow(['groups'] + list(kf.groups))
        for name, mat in (('T_kal', kf.T_kal), ('Abar', kf.Abar),
                          ('Bbar', kf.Bbar)):
            for row in mat:
                out.writerow([name] + ['%.17g' % v for v in row])


def random_controllable_pair(rng, max_states=6, max_inputs=3, rtol=RANK_RTOL):
    """Draw a controllable ``(A, [B_1, ..., B_g])`` with nested structure.

    A block upper triangular pair with one input group per block is hidden
    behind a random orthogonal change of coordinates, so the decomposition
    has to recover several blocks.  Groups carry one or two columns.
    """
    from .model import controllability_rank
    while True:
        N = int(rng.integers(1, max_states + 1))
        ngroups = int(rng.integers(1, min(max_inputs, N) + 1))
        cuts = np.sort(rng.choice(np.arange(1, N), ngroups - 1, replace=False)) if ngroups > 1 else []
        sizes = np.diff(np.concatenate([[0], cuts, [N]])).astype(int)
        widths = [1] * ngroups
        for _ in range(int(rng.integers(0, max_inputs - ngroups + 1))):
            widths[int(rng.integers(ngroups))] += 1
        A = np.triu(rng.standard_normal((N, N)))
        A += np.tril(rng.standard_normal((N, N)), -1) * _block_mask(sizes)
        cols = []
        offset = 0
        for size, width in zip(sizes, widths):
            block = np.zeros((N, width))
            block[:offset + size] = rng.standard_normal((offset + size, width))
            cols.append(block)
            offset += size
        basis, _ = np.linalg.qr(rng.standard_normal((N, N)))
        A = basis @ A @ basis.T
        cols = [basis @ c for c in cols]
        rank, _ = controllability_rank(A, np.hstack(cols), rtol)
        if rank == N:
            return A, cols


def _block_mask(sizes):
    """1 inside the diagonal blocks, 0 elsewhere."""
    N = int(np.sum(sizes))
    mask = np.zeros((N, N))
    offset = 0
    for size in sizes:
        mask[offset:offset + size, offset:offset + size] = 1.0
        offset += size
    return mask


def kalman_structure_errors(kf, A):
    """Audit a KalmanForm: worst lower block of ``Abar`` and ``Bbar`` (relative to
    ``||Abar||``), worst ``T_kal T_inv - I`` entry and the diagonal ranks."""
    from .model import controllability_rank
    nblocks = len(kf.block_sizes)
    scale = max(np.linalg.norm(kf.Abar, 2), 1e-300)
    worst_lower = 0.0
    for i in range(nblocks):
        for j in range(i):
            worst_lower = max(worst_lower, float(np.max(np.abs(kf.A_block(i, j)))))
        for later in range(i):
            cols = kf.Bbar[kf.block(i), kf.input_slices[kf.groups[later]]]
            worst_lower = max(worst_lower, float(np.max(np.abs(cols), initial=0.0)))
    identity = float(np.max(np.abs(kf.T_kal @ kf.T_inv - np.eye(A.shape[0]))))
    similar = float(np.max(np.abs(kf.T_kal @ A @ kf.T_inv - kf.Abar)))
    diag_ok = all(controllability_rank(kf.A_block(i, i), kf.B_block(i))[0]
                  == kf.block_sizes[i] for i in range(nblocks))
    return {'lower_block': worst_lower / scale, 'inverse': identity,
            'similarity': similar / scale, 'diagonal_controllable': diag_ok}
