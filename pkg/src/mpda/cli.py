"""Command-line entry point.

Commands: ``synth``, ``assimilate``, ``eval``, ``render``, ``gridsearch`` and
``bench``. Run options come from flags merged over an optional ``key=value``
file given with ``--config``; flags given on the command line win.

Exit codes: 0 on success, 2 when the solver diverged, 1 on usage, I/O or
format errors.
"""

import argparse
import logging
import sys
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from sqlalchemy import create_engine

from . import bench
from .grid import Boundary, GridSpec
from .operator import Hyperparams
from .oracle import (DENSE_LIMIT, Field, GridMismatchError, l1_error_field, latitude_weights, make_synthetic,
                     observe, rmse, sample_gmrf, track_nodes)
from .formats import (read_config, read_field, read_observations, render, write_diagnostics, write_field,
                      write_observations)
from .utils import MPDAError, configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2

GRIDSEARCH_C = (-10.0, -2.0, -1.0, 1.0, 5.0, 10.0, 20.0)
GRIDSEARCH_ETA = (0.6, 0.7, 0.8)
REFERENCE_TOL = 1e-8
REFERENCE_MAX_ITERS = 20000


class UsageError(MPDAError, ValueError):
    """Raised for invalid command lines or configuration files."""
    pass


@dataclass
class RunConfig:
    """Run options shared by every command."""

    nx: int = 128
    ny: int = 128
    dx: Optional[float] = None
    dy: Optional[float] = None
    boundary: str = 'dirichlet'
    alpha: int = 2
    lengthscale: float = 0.15
    sigma: float = 1.1
    sigma_y2: Optional[float] = None
    c: float = 10.0
    eta: float = 0.6
    tau: float = 1e-3
    T: int = 10000
    log_every: int = 100
    density: float = 0.05
    seed: int = 0
    method: str = 'mp'
    base_min_dim: int = 32
    px: int = 1
    py: int = 1
    exchange_period: int = 1
    threads: Optional[int] = None
    memory: int = 10
    tol: float = 1e-3
    max_iters: int = 500
    dense_limit: int = DENSE_LIMIT

    def validate(self) -> "RunConfig":
        """Check the options; grid and prior parameter errors surface here too."""
        if self.method not in bench.METHODS:
            raise UsageError(f"method must be one of {', '.join(bench.METHODS)}, got {self.method!r}")
        if self.boundary not in {b.value for b in Boundary}:
            raise UsageError(f"boundary must be dirichlet or periodic, got {self.boundary!r}")
        if not 0 < self.density <= 1:
            raise UsageError(f"density must lie in (0, 1], got {self.density}")
        if self.px < 1 or self.py < 1 or self.exchange_period < 1:
            raise UsageError("px, py and exchange_period must be at least 1")
        if self.threads is not None and self.threads < 1:
            raise UsageError("threads must be at least 1")
        self.grid()
        self.hyperparams()
        return self

    def grid(self) -> GridSpec:
        dx = 1.0 / self.nx if self.dx is None else self.dx
        dy = 1.0 / self.ny if self.dy is None else self.dy
        return GridSpec(self.nx, self.ny, dx, dy, Boundary(self.boundary))

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(alpha=self.alpha, lengthscale=self.lengthscale, sigma2=self.sigma ** 2,
                           sigma_y2=self.sigma_y2, c=self.c, eta=self.eta, tau=self.tau, T=self.T,
                           log_every=self.log_every)

    def solver_options(self) -> dict:
        return {'base_min_dim': self.base_min_dim, 'px': self.px, 'py': self.py,
                'exchange_period': self.exchange_period, 'threads': self.threads, 'memory': self.memory,
                'tol': self.tol, 'max_iters': self.max_iters, 'dense_limit': self.dense_limit}

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


COMMAND_DEFAULTS = {'gridsearch': {'T': 4000}}


def _field_type(name: str):
    hint = typing.get_type_hints(RunConfig)[name]
    arguments = [a for a in typing.get_args(hint) if a is not type(None)]
    return arguments[0] if arguments else hint


def _convert(name: str, text: str):
    kind = _field_type(name)
    if text.lower() == 'none' and kind is not str:
        return None
    try:
        return kind(text)
    except ValueError as exc:
        raise UsageError(f"invalid value {text!r} for {name}") from exc


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the ``--config`` file, then the explicit flags."""
    names = {f.name for f in fields(RunConfig)}
    values = dict(COMMAND_DEFAULTS.get(args.command, {}))
    if getattr(args, 'config', None):
        file_values = read_config(args.config)
        unknown = sorted(set(file_values) - names)
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {', '.join(unknown)}")
        values.update({key: _convert(key, text) for key, text in file_values.items()})
    values.update({name: getattr(args, name) for name in names if hasattr(args, name)})
    return RunConfig(**values).validate()


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_options(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('run options (also accepted in the --config file)')
    group.add_argument('--nx', type=int)
    group.add_argument('--ny', type=int)
    group.add_argument('--dx', type=float, help='grid spacing, 1/nx by default')
    group.add_argument('--dy', type=float, help='grid spacing, 1/ny by default')
    group.add_argument('--boundary', choices=[b.value for b in Boundary])
    group.add_argument('--alpha', type=int)
    group.add_argument('--lengthscale', type=float)
    group.add_argument('--sigma', type=float, help='prior marginal standard deviation')
    group.add_argument('--sigma-y2', type=float, dest='sigma_y2', help='observation noise variance')
    group.add_argument('--c', type=float, help='re-weighting constant')
    group.add_argument('--eta', type=float, help='damping rate')
    group.add_argument('--tau', type=float, help='relative early-stop threshold')
    group.add_argument('--max-sweeps', type=int, dest='T')
    group.add_argument('--log-every', type=int, dest='log_every')
    group.add_argument('--density', type=float)
    group.add_argument('--seed', type=int)
    group.add_argument('--method', choices=bench.METHODS)
    group.add_argument('--base-min-dim', type=int, dest='base_min_dim')
    group.add_argument('--px', type=int)
    group.add_argument('--py', type=int)
    group.add_argument('--exchange-period', type=int, dest='exchange_period')
    group.add_argument('--threads', type=int)
    group.add_argument('--memory', type=int)
    group.add_argument('--tol', type=float)
    group.add_argument('--max-iters', type=int, dest='max_iters')
    group.add_argument('--dense-limit', type=int, dest='dense_limit')


def _floats(text: str) -> list[float]:
    return [float(item) for item in text.split(',') if item]


def _ints(text: str) -> list[int]:
    return [int(item) for item in text.split(',') if item]


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('-v', '--verbose', action='count', help='-v for info, -vv for debug logging')
    common.add_argument('--config', help='key=value run option file')
    _add_run_options(common)

    parser = _ArgumentParser(prog='mpda', description='Message-passing data assimilation on GMRF priors.')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', parents=[common], help='sample a truth field and observations')
    synth.add_argument('--truth', required=True, help='output truth field file')
    synth.add_argument('--obs', required=True, help='output observation file')
    synth.add_argument('--pattern', choices=('random', 'tracks'), default='random')
    synth.add_argument('--tracks', type=int, default=4, help='number of satellite tracks')
    synth.add_argument('--track-width', type=float, default=3.0)
    synth.add_argument('--write-weights', help='also write cosine-latitude weights to this field file')
    synth.add_argument('--lat-min', type=float, default=-90.0)
    synth.add_argument('--lat-max', type=float, default=90.0)

    assimilate = commands.add_parser('assimilate', parents=[common], help='estimate the posterior mean')
    assimilate.add_argument('--obs', required=True, help='observation file')
    assimilate.add_argument('--out', required=True, help='output posterior mean field file')
    assimilate.add_argument('--diagnostics', help='diagnostics record, OUT.diag.txt by default')
    assimilate.add_argument('--prior-mean', help='background field file')

    evaluate = commands.add_parser('eval', parents=[common], help='RMSE of an estimate')
    evaluate.add_argument('estimate')
    evaluate.add_argument('truth')
    evaluate.add_argument('--weights', help='weight field file')
    evaluate.add_argument('--l1-out', help='write the absolute error field here')

    draw = commands.add_parser('render', parents=[common], help='render a field as a PGM/PPM image')
    draw.add_argument('field')
    draw.add_argument('out')
    draw.add_argument('--mode', choices=('gray', 'diverging'), default='gray')

    search = commands.add_parser('gridsearch', parents=[common], help='convergence table over c and eta')
    search.add_argument('--c-values', type=_floats, default=list(GRIDSEARCH_C))
    search.add_argument('--eta-values', type=_floats, default=list(GRIDSEARCH_ETA))
    search.add_argument('--obs', help='observation file, synthesized when omitted')
    search.add_argument('--truth', help='truth field file, required with --obs')
    search.add_argument('--out', help='table output file')

    suite = commands.add_parser('bench', parents=[common], help='timing suite')
    suite.add_argument('--sizes', type=_ints, default=[64, 128])
    suite.add_argument('--densities', type=_floats, default=[0.01, 0.05, 0.1])
    suite.add_argument('--methods', type=lambda text: text.split(','), default=['mp-multigrid', '3dvar'])
    suite.add_argument('--seeds', type=_ints, default=[0, 1, 2])
    suite.add_argument('--out', help='CSV output file, standard output when omitted')
    suite.add_argument('--db', help='SQLAlchemy URL to store the results in')
    return parser


def _print_hyperparams(hyper: Hyperparams):
    for key, value in hyper.as_dict().items():
        print(f'{key} {value!r}')


def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    grid, hyper = config.grid(), config.hyperparams()
    if args.pattern == 'tracks':
        truth = sample_gmrf(grid, hyper, config.seed)
        obs = observe(truth, track_nodes(grid, args.tracks, args.track_width, config.seed), hyper, config.seed)
    else:
        truth, obs = make_synthetic(grid, hyper, config.density, config.seed)
    write_field(args.truth, truth)
    write_observations(args.obs, grid, obs)
    if args.write_weights:
        write_field(args.write_weights, latitude_weights(grid, args.lat_min, args.lat_max))
    print(f'seed {config.seed}')
    print(f'grid {grid}')
    _print_hyperparams(hyper)
    print(f'values {grid.n}')
    print(f'observations {len(obs)}')
    return EXIT_OK


def _read_background(path: Optional[str], grid: GridSpec) -> Optional[np.ndarray]:
    if not path:
        return None
    field = read_field(path)
    if field.grid != grid:
        raise GridMismatchError(f"{path}: prior mean on {field.grid}, observations on {grid}")
    return field.values


def cmd_assimilate(config: RunConfig, args: argparse.Namespace) -> int:
    grid, obs = read_observations(args.obs, config.grid())
    hyper = config.hyperparams()
    prior_mean = _read_background(args.prior_mean, grid)
    outcome = bench.run_method(config.method, grid, hyper, obs, prior_mean=prior_mean, **config.solver_options())
    record = {'method': outcome.method, 'status': outcome.status, 'iterations': outcome.iterations,
              'total_iterations': outcome.total_iterations, 'wall_time': repr(outcome.wall_time),
              'grid': str(grid), 'nx': grid.nx, 'ny': grid.ny, 'dx': repr(grid.dx), 'dy': repr(grid.dy),
              'boundary': grid.boundary.value, 'observations': len(obs), 'observations_file': args.obs,
              'prior_mean_file': args.prior_mean or ''}
    record.update({key: repr(value) for key, value in hyper.as_dict().items()})
    record.update(config.solver_options())
    record.update(outcome.details)
    written = bool(np.all(np.isfinite(outcome.mean)))
    if written:
        write_field(args.out, Field(grid, outcome.mean))
    record['mean_written'] = 'yes' if written else 'no'
    write_diagnostics(args.diagnostics or f'{args.out}.diag.txt', record)
    print(f'{outcome.method} {outcome.status} after {outcome.iterations} iterations in {outcome.wall_time:.3f}s')
    return EXIT_DIVERGED if outcome.diverged else EXIT_OK


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    estimate, truth = read_field(args.estimate), read_field(args.truth)
    weights = read_field(args.weights) if args.weights else None
    print(f'rmse {rmse(estimate, truth, weights)!r}')
    if args.l1_out:
        write_field(args.l1_out, l1_error_field(estimate, truth))
    return EXIT_OK


def cmd_render(config: RunConfig, args: argparse.Namespace) -> int:
    render(args.out, read_field(args.field), args.mode)
    return EXIT_OK


def format_table(c_values: list, eta_values: list, cells: dict) -> str:
    """Aligned table, one row per eta and one column per c."""
    header = ['eta \\ c'] + [f'{c:g}' for c in c_values]
    rows = [header] + [[f'{eta:g}'] + [cells[(c, eta)] for c in c_values] for eta in eta_values]
    widths = [max(len(row[k]) for row in rows) for k in range(len(header))]
    return '\n'.join('  '.join(cell.rjust(width) for cell, width in zip(row, widths)) for row in rows) + '\n'


def gridsearch_cell(outcome: bench.MethodOutcome, truth: Field, reference_rmse: float) -> str:
    """``-`` for a divergent run, else the RMSE ratio (``*`` marks a run stopped by the sweep cap)."""
    if outcome.diverged or not np.all(np.isfinite(outcome.mean)):
        return '-'
    ratio = rmse(Field(truth.grid, outcome.mean), truth) / reference_rmse
    return f'{ratio:.3f}' + ('*' if outcome.status == 'max_iters' else '')


def cmd_gridsearch(config: RunConfig, args: argparse.Namespace) -> int:
    hyper = config.hyperparams()
    if args.obs:
        if not args.truth:
            raise UsageError("--obs needs --truth")
        grid, obs = read_observations(args.obs, config.grid())
        truth = read_field(args.truth)
        if truth.grid != grid:
            raise GridMismatchError(f"{args.truth}: truth on {truth.grid}, observations on {grid}")
    else:
        grid = config.grid()
        truth, obs = make_synthetic(grid, hyper, config.density, config.seed)
    options = config.solver_options()
    if grid.n <= config.dense_limit:
        reference = bench.run_method('exact', grid, hyper, obs, **options)
    else:
        options_3dvar = dict(options, tol=REFERENCE_TOL, max_iters=REFERENCE_MAX_ITERS)
        reference = bench.run_method('3dvar', grid, hyper, obs, **options_3dvar)
    reference_rmse = rmse(Field(grid, reference.mean), truth)
    method = config.method if config.method in ('mp', 'mp-multigrid') else 'mp'
    cells = {}
    for eta in args.eta_values:
        for c in args.c_values:
            outcome = bench.run_method(method, grid, hyper.with_(c=c, eta=eta), obs, **options)
            cells[(c, eta)] = gridsearch_cell(outcome, truth, reference_rmse)
            logger.info("gridsearch c=%g eta=%g: %s", c, eta, cells[(c, eta)])
    table = format_table(args.c_values, args.eta_values, cells)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end='')
    return EXIT_OK


def cmd_bench(config: RunConfig, args: argparse.Namespace) -> int:
    rows = bench.run_suite(args.sizes, args.densities, args.methods, args.seeds, config.hyperparams(),
                           config.base_min_dim, config.dense_limit, config.threads)
    if args.out:
        with open(args.out, 'w', newline='') as stream:
            bench.write_csv(rows, stream)
    else:
        bench.write_csv(rows, sys.stdout)
    if args.db:
        bench.save_results(create_engine(args.db), rows)
    return EXIT_OK


COMMANDS = {'synth': cmd_synth, 'assimilate': cmd_assimilate, 'eval': cmd_eval, 'render': cmd_render,
            'gridsearch': cmd_gridsearch, 'bench': cmd_bench}


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(getattr(args, 'verbose', 0) or 0)
        config = build_config(args)
        return COMMANDS[args.command](config, args)
    except (MPDAError, OSError) as exc:
        print(f'mpda: error: {exc}', file=sys.stderr)
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
