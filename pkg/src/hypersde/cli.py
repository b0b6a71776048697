"""Command-line front end.

Subcommands ``solve-kernels``, ``simulate``, ``bound`` and ``check`` each load
a JSON config, run one stage of the pipeline, write CSV/JSON artifacts to
``--out`` and finish with a run manifest.  Exit status is 0 when every check
passed, 1 when a check or a run failed and 2 for configuration errors.
"""
import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import ConvergenceError, DivergenceError, Error, HyperSdeValueError
from .model import CheckResult, load_config, snap_steps

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def _sha256(path):
    with open(path, 'rb') as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _row_count(path):
    with open(path) as fh:
        return max(sum(1 for _ in fh) - 1, 0)


class Run:
    """Collects outputs and checks and writes the manifest."""

    def __init__(self, command, args):
        self.command = command
        self.args = args
        self.start = time.perf_counter()
        self.out_dir = args.out
        os.makedirs(self.out_dir, exist_ok=True)
        self.outputs = []
        self.checks = []
        self.kernel_cache = None
        self.extra = {}

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def output(self, path, rows=None):
        if rows is None:
            rows = _row_count(path) if path.endswith('.csv') else None
        self.outputs.append({'path': path, 'rows': rows})

    def check(self, name, passed, measured, diagnostic=False):
        result = CheckResult(name, bool(passed), measured, diagnostic)
        self.checks.append(result)
        return result

    @property
    def passed(self):
        return all(c.passed for c in self.checks if not c.diagnostic)

    def finish(self):
        manifest = {
            'command': self.command,
            'config': self.args.config,
            'config_sha256': _sha256(self.args.config),
            'seed': getattr(self.args, 'seed', None),
            'kernel_cache': self.kernel_cache,
            'versions': {'hypersde': __version__, 'numpy': np.__version__},
            'wall_time_s': time.perf_counter() - self.start,
            'outputs': self.outputs,
            'checks': [{'name': c.name, 'passed': c.passed, 'measured': c.measured,
                        'diagnostic': c.diagnostic} for c in self.checks],
            'passed': self.passed,
        }
        manifest.update(self.extra)
        path = self.path('%s_manifest.json' % self.command.replace('-', '_'))
        from .sim import write_manifest
        write_manifest(path, manifest)
        for c in self.checks:
            tag = 'info' if c.diagnostic else ('PASS' if c.passed else 'FAIL')
            print('%-4s  %-34s %s' % (tag, c.name, c.measured))
        print('manifest: %s' % path)
        return EXIT_OK if self.passed else EXIT_FAIL


# ------------------------------------------------------------------ loading

def _load(args):
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError('cannot load %s: %s' % (args.config, exc)) from exc
    if cfg.system is None and cfg.delayed is None:
        raise ConfigError('config has neither "system" nor "delayed_sde"')
    return cfg


def _kernels(cfg, args, run, nx=None):
    """Solve (or load from ``--kernel-cache``) the kernels of ``cfg.system``."""
    from .kernels import load_kernels, save_kernels, solve_kernels
    nx = nx or args.nx or cfg.experiment.nx
    cache = getattr(args, 'kernel_cache', None)
    stamp = {'config_sha256': _sha256(args.config), 'nx': nx, 'tol': args.tol}
    if cache and os.path.exists(cache) and os.path.exists(cache + '.json'):
        with open(cache + '.json') as fh:
            if json.load(fh) == stamp:
                kernels = load_kernels(cache)
                run.kernel_cache = {'path': cache, 'sha256': _sha256(cache), 'reused': True}
                return kernels
    kernels = solve_kernels(cfg.system, nx=nx, tol=args.tol, max_iter=args.max_iter)
    if cache:
        save_kernels(kernels, cache)
        with open(cache + '.json', 'w') as fh:
            json.dump(stamp, fh)
        run.kernel_cache = {'path': cache, 'sha256': _sha256(cache), 'reused': False}
    return kernels


class Problem:
    """Delayed SDE in Kalman form plus, for coupled configs, the PDE data."""

    def __init__(self, sde, kf, system=None, kernels=None, tracking=None):
        self.sde, self.kf = sde, kf
        self.system, self.kernels, self.tracking = system, kernels, tracking


def _problem(cfg, args, run):
    from .reduction import attach_noise, delayed_sde_from_dict, kalman_decompose, reduce
    from .tracking import build_tracking_kernels
    if cfg.delayed is not None:
        try:
            sde = delayed_sde_from_dict(cfg.delayed)
        except (KeyError, TypeError) as exc:
            raise ConfigError('bad delayed_sde block: %s' % exc) from exc
        return Problem(sde, attach_noise(kalman_decompose(sde.A, sde.Bcols), sde))
    kernels = _kernels(cfg, args, run)
    tk = build_tracking_kernels(kernels, cfg.system)
    sde = reduce(cfg.system, kernels, tk)
    kf = attach_noise(kalman_decompose(sde.A, sde.Bcols), sde)
    return Problem(sde, kf, cfg.system, kernels, tk)


def _params(cfg):
    return dict(cfg.experiment.params)


# ---------------------------------------------------------------- commands

def cmd_solve_kernels(args):
    cfg = _load(args)
    run = Run('solve-kernels', args)
    if cfg.system is None:
        print('solve-kernels: not applicable (config describes a delayed SDE only)')
        run.check('kernels', True, 'not applicable', diagnostic=True)
        return run.finish()
    from .kernels import save_kernels
    nx = args.nx or cfg.experiment.nx
    kernels = _kernels(cfg, args, run, nx)
    run.check('picard increment <= tol', kernels.increment <= args.tol,
              'increment=%.3g after %d sweeps' % (kernels.increment, kernels.iterations))
    run.check('residual', True, 'residual_norm=%.6g at nx=%d'
              % (kernels.residual_norm, nx), diagnostic=True)
    run.extra['residual_norm'] = kernels.residual_norm
    if args.refine:
        finer = _kernels(cfg, argparse.Namespace(**dict(vars(args), kernel_cache=None)),
                         run, 2 * nx - 1 if nx % 2 else 2 * nx)
        ratio = kernels.residual_norm / max(finer.residual_norm, 1e-300)
        run.extra['residual_ratio'] = ratio
        passed = ratio >= 1.7 or kernels.residual_norm < 1e-12
        run.check('refinement residual ratio >= 1.7', passed,
                  'ratio=%.3f (%.3g -> %.3g)' % (ratio, kernels.residual_norm,
                                                 finer.residual_norm))
    target = os.path.join(run.out_dir, 'kernels.npz')
    save_kernels(kernels, target)
    run.output(target)
    profiles = os.path.join(run.out_dir, 'kernel_profiles.csv')
    from .covariance import write_curves_csv
    write_curves_csv(profiles, 'x', kernels.x,
                     [('gamma_alpha', kernels.gamma_alpha.values),
                      ('gamma_beta', kernels.gamma_beta.values),
                      ('psi', kernels.psi.values), ('omega', kernels.omega.values)])
    run.output(profiles)
    return run.finish()


def _controller_factory(name, problem, args, cfg):
    from .control import (HighGainController, PredictorFeedback, SteeringProblem,
                          design_feedback, steering_control)
    params = _params(cfg)
    kf, sde = problem.kf, problem.sde
    if name == 'none':
        return None, {}
    if name == 'feedback':
        law = design_feedback(kf, sde, nu=float(params.get('nu', 1.0)),
                              poles=params.get('poles'))
        return (lambda: PredictorFeedback(law, kf, sde)), {'feedback': law.as_dict()}
    if name == 'highgain':
        gain = float(args.gains[0])
        return (lambda: HighGainController(kf, sde, gain)), {'gain': gain}
    if name == 'steering':
        if 'Z_T' not in params:
            raise ConfigError('steering needs experiment.params.Z_T')
        problem_spec = SteeringProblem(Z_T=params['Z_T'], Sigma_T=params.get('Sigma_T'),
                                       T=float(params.get('T_steer', args.T)))
        return (lambda: steering_control(problem_spec, kf, sde)), {}
    raise ConfigError('unknown controller %r' % name)


def _closed_loop_runner(problem, factory, nx, dt, T):
    from .sim import ChunkOutput, simulate_closed_loop, wiener_increments
    nsteps = snap_steps(T, dt)

    def run(seeds):
        dW = wiener_increments(seeds, nsteps, dt)
        ctrl = factory() if factory is not None else None
        res, _ = simulate_closed_loop(problem.system, problem.kernels, problem.tracking,
                                      problem.sde, ctrl, nx, dt, T, dW)
        return ChunkOutput(res.t, res.X, {})

    return run


def cmd_simulate(args):
    from .control import high_gain_sweep
    from .sim import delayed_chunk_runner, monte_carlo, write_summary_csv
    cfg = _load(args)
    exp = cfg.experiment
    args.dt = args.dt or exp.dt
    args.T = args.T or exp.T
    args.paths = args.paths or exp.paths
    args.seed = exp.seed if args.seed is None else args.seed
    controller = args.controller or exp.controller
    args.gains = args.gains or [float(g) for g in _params(cfg).get('gains', [20.0])]
    run = Run('simulate', args)
    problem = _problem(cfg, args, run)
    sde, kf = problem.sde, problem.kf
    run.extra['controller'] = controller
    run.extra['delays'] = np.asarray(sde.h).tolist()
    run.extra['block_sizes'] = list(kf.block_sizes)
    if controller == 'highgain' and problem.system is None and len(args.gains) > 1:
        names = (['z%d' % (i + 1) for i in range(sde.N)]
                 + ['zeta%d' % (i + 1) for i in range(len(kf.block_sizes))])

        def keep(gain, summary):
            path = run.path('summary_K%g.csv' % gain)
            write_summary_csv(summary, path, names)
            run.output(path)
            run.extra.setdefault('divergent', {})['K%g' % gain] = summary.divergent

        rows = high_gain_sweep(kf, sde, args.gains, args.dt, args.T, args.paths,
                               args.seed, on_summary=keep)
        table = np.array([list(r) for r in rows], dtype=float)
        path = run.path('highgain_sweep.csv')
        np.savetxt(path, table, delimiter=',', comments='', fmt='%.10g',
                   header='gain,cost,cost_stderr,gap,gap_stderr,J_min')
        run.output(path)
        for r in rows:
            run.check('K=%g cost' % r.gain, True, 'J=%.4f +- %.4f, gap=%.4g, J_min=%.4f'
                      % (r.cost, r.cost_stderr, r.gap, r.J_min), diagnostic=True)
        costs = np.array([r.cost for r in rows])
        errs = np.array([r.cost_stderr for r in rows])
        rises = np.diff(costs) - 2.0 * np.hypot(errs[1:], errs[:-1])
        run.check('cost non-increasing in gain', np.all(rises <= 0.0),
                  'max rise beyond 2 stderr=%.3g' % float(np.max(rises)))
        return run.finish()
    factory, info = _controller_factory(controller, problem, args, cfg)
    run.extra.update(info)
    if problem.system is None:
        runner = delayed_chunk_runner(sde, args.dt, args.T, factory)
    else:
        nx = args.nx or exp.nx
        runner = _closed_loop_runner(problem, factory, nx, args.dt, args.T)
    summary = monte_carlo(runner, args.paths, args.seed)
    path = run.path('summary.csv')
    write_summary_csv(summary, path, ['x%d' % (i + 1) for i in range(sde.N)])
    run.output(path)
    run.extra['divergent'] = summary.divergent
    run.check('divergent paths <= 1%', summary.divergent <= 0.01 * args.paths,
              '%d of %d' % (summary.divergent, args.paths))
    final = float(np.linalg.norm(summary.mean[-1]))
    peak = float(np.max(np.linalg.norm(summary.mean, axis=1)))
    run.check('terminal mean', True, '|mean X(T)|=%.4g, peak=%.4g' % (final, peak),
              diagnostic=True)
    return run.finish()


def cmd_bound(args):
    from .covariance import gamma_recursion, min_weighted_variance, write_curves_csv
    cfg = _load(args)
    run = Run('bound', args)
    problem = _problem(cfg, args, run)
    sde, kf = problem.sde, problem.kf
    du = args.du or cfg.experiment.dt
    T = float(sde.T)
    t_grid = np.arange(0.0, T + 0.5 * args.t_step, args.t_step)
    family = gamma_recursion(kf, sde, du=du, t_grid=t_grid)
    for i, gamma in enumerate(family.Gamma):
        path = run.path('gamma_block%d.csv' % (i + 1))
        write_curves_csv(path, 'u', family.u_grid(i), [('Gamma%d' % (i + 1), gamma)])
        run.output(path)
    path = run.path('sigma_min.csv')
    write_curves_csv(path, 't', t_grid, [('Sigma_min%d' % (i + 1), s)
                                         for i, s in enumerate(family.sigma_min)])
    run.output(path)
    Qcost = np.asarray(_params(cfg).get('Qcost', np.eye(sde.N)), dtype=float)
    curves, totals = min_weighted_variance(family, kf, Qcost, T)
    path = run.path('v_min.csv')
    write_curves_csv(path, 't', t_grid, [('V_min%d' % (i + 1), c)
                                         for i, c in enumerate(curves)])
    run.output(path)
    path = run.path('j_min.json')
    with open(path, 'w') as fh:
        json.dump({'J_min_blocks': totals.tolist(), 'J_min': float(np.sum(totals)),
                   'T': T, 'h_m': float(sde.h[-1]), 'du': du}, fh, indent=2)
    run.output(path)
    run.extra['J_min'] = float(np.sum(totals))
    for i, s in enumerate(family.sigma_min):
        low = min(float(np.min(np.linalg.eigvalsh(m))) for m in s)
        run.check('Sigma_min block %d PSD' % (i + 1), low >= -1e-12,
                  'min eigenvalue=%.3g' % low)
    run.check('J_min', True, '%.6g' % float(np.sum(totals)), diagnostic=True)
    return run.finish()


def _isometry_check(run, seeds, Mpaths, seed):
    from .model import ito_isometry_check
    children = np.random.SeedSequence(seed).spawn(seeds)
    passed = 0
    for child in children:
        res = ito_isometry_check(np.cos, lambda s: np.exp(-s), 2.0, Mpaths,
                                 np.random.default_rng(child))
        passed += abs(res.mc_estimate - res.quadrature) <= 5.0 * res.stderr
    rate = passed / seeds
    run.check('Ito isometry (>= 99% of seeds)', rate >= 0.99,
              '%d/%d seeds within 5 stderr' % (passed, seeds))


def _corpus_check(run, count, seed):
    from .reduction import kalman_decompose, kalman_structure_errors, random_controllable_pair
    rng = np.random.default_rng(seed)
    worst = {'lower_block': 0.0, 'inverse': 0.0}
    uncontrollable = 0
    start = time.perf_counter()
    for _ in range(count):
        A, Bcols = random_controllable_pair(rng)
        kf = kalman_decompose(A, Bcols)
        errs = kalman_structure_errors(kf, A)
        for key in worst:
            worst[key] = max(worst[key], errs[key])
        uncontrollable += not errs['diagonal_controllable']
    elapsed = time.perf_counter() - start
    ok = worst['lower_block'] <= 1e-10 and worst['inverse'] <= 1e-10 and uncontrollable == 0
    run.check('Kalman corpus (%d instances)' % count, ok,
              'lower=%.2g inverse=%.2g uncontrollable=%d in %.1fs'
              % (worst['lower_block'], worst['inverse'], uncontrollable, elapsed))


def _identity_check(run, problem, dt, seed, paths):
    from .control import PredictorFeedback, design_feedback
    from .covariance import cropped_predictor_identity
    from .sim import simulate_delayed, wiener_increments
    sde, kf = problem.sde, problem.kf
    T = float(sde.h[-1]) + 4.0
    dW = wiener_increments(np.random.SeedSequence(seed).spawn(paths), snap_steps(T, dt), dt)
    ctrl = PredictorFeedback(design_feedback(kf, sde), kf, sde)
    gaps = cropped_predictor_identity(kf, sde, simulate_delayed(sde, dt, T, dW, ctrl), dW)
    run.check('predictor identity <= 10 dt', float(np.max(gaps)) <= 10 * dt,
              'max gap=%.3g (10 dt=%.3g)' % (float(np.max(gaps)), 10 * dt))


def _equivalence_check(run, problem, T, paths, seed):
    from .sim import transform_equivalence
    system = problem.system
    nx = problem.kernels.nx
    dt = (1.0 / (nx - 1)) / max(np.max(system.lam), np.max(system.mu))
    T = snap_steps(T, dt) * dt
    report = transform_equivalence(system, problem.kernels, problem.tracking, nx, dt, T,
                                   paths, seed)
    tol_scale = 3.0 * (report['dx'] + report['dt'])
    for name in ('X', 'beta0'):
        part = report[name]
        tol = tol_scale * max(part['scale'], 1.0)
        run.check('transform equivalence mean %s' % name, part['mean_gap'] <= tol,
                  'gap=%.3g tol=%.3g' % (part['mean_gap'], tol))
        run.check('transform equivalence var %s' % name, part['variance_z'] <= 5.0,
                  'max z=%.2f' % part['variance_z'])


def cmd_check(args):
    from .model import validate
    cfg = _load(args)
    args.seed = cfg.experiment.seed if args.seed is None else args.seed
    run = Run('check', args)
    quick = args.quick
    if cfg.system is not None:
        report = validate(cfg.system)
        for c in report.checks:
            run.check('validation: ' + c.name, c.passed, c.measured, c.diagnostic)
        if not report.ok:
            print('validation failed; skipping checks that need a valid system')
            return run.finish()
    _isometry_check(run, 20 if quick else 100, 10000, args.seed)
    _corpus_check(run, 100 if quick else 1000, args.seed)
    problem = _problem(cfg, args, run)
    try:
        _identity_check(run, problem, 2e-3 if quick else 1e-3, args.seed, 50)
    except (HyperSdeValueError, Error) as exc:
        run.check('predictor identity', True, 'not applicable: %s' % exc, diagnostic=True)
    if problem.system is not None:
        _equivalence_check(run, problem, min(float(problem.system.T), 1.0 if quick else 2.0),
                           200 if quick else 500, args.seed)
    else:
        run.check('transform equivalence', True, 'not applicable (no PDE)', diagnostic=True)
    return run.finish()


# ------------------------------------------------------------------- parser

def _gain_list(text):
    try:
        return [float(g) for g in text.split(',') if g.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError('gains must be comma separated numbers')


def build_parser():
    parser = argparse.ArgumentParser(prog='hypersde', description=__doc__.splitlines()[0])
    parser.add_argument('--version', action='version', version=__version__)
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('config', help='JSON experiment config')
        p.add_argument('--out', default='out', help='output directory')
        p.add_argument('--nx', type=int, default=None, help='spatial grid points')
        p.add_argument('--tol', type=float, default=1e-10, help='Picard tolerance')
        p.add_argument('--max-iter', type=int, default=200, help='Picard sweep limit')
        p.add_argument('--kernel-cache', default=None, help='kernel cache (.npz)')
        p.add_argument('--seed', type=int, default=None, help='master seed')

    p = sub.add_parser('solve-kernels', help='solve and cache the backstepping kernels')
    common(p)
    p.add_argument('--refine', action='store_true',
                   help='also solve on the doubled grid and report the residual ratio')
    p.set_defaults(func=cmd_solve_kernels)

    p = sub.add_parser('simulate', help='Monte Carlo closed-loop simulation')
    common(p)
    p.add_argument('--controller', choices=['feedback', 'highgain', 'steering', 'none'])
    p.add_argument('--paths', type=int, default=None)
    p.add_argument('--dt', type=float, default=None)
    p.add_argument('--T', type=float, default=None)
    p.add_argument('--gains', type=_gain_list, default=None,
                   help='comma separated high-gain values, e.g. 2,5,10,20')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('bound', help='covariance floor curves and J_min')
    common(p)
    p.add_argument('--du', type=float, default=None, help='kernel step (divides delays)')
    p.add_argument('--t-step', type=float, default=0.01, help='time grid step of the curves')
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser('check', help='run the property suite')
    common(p)
    p.add_argument('--quick', action='store_true', help='smaller sample sizes')
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print('config error: %s' % exc, file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print('kernel solver failed: %s (residual %.3g)' % (exc, exc.residual or np.nan),
              file=sys.stderr)
        return EXIT_FAIL
    except DivergenceError as exc:
        print('divergence: %s' % exc, file=sys.stderr)
        return EXIT_FAIL
    except HyperSdeValueError as exc:
        print('invalid input: %s' % exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
