"""
Command-line entry point, installed as the `jmflex` console script.

Exit codes: 0 success, 1 usage error, 2 invalid data or configuration,
3 fit failure (restart budget exhausted, non-concave block or numerical
failure). On codes 2 and 3 an error.json is written to the output
directory, when there is one, and the message is echoed to stderr.
"""
import argparse
import logging
import os
import sys

from jmflex import __version__
from jmflex.config import parse_model_config
from jmflex.errors import ConfigurationError, DataError, FitFailure, NonConcaveBlock, NumericalError
from jmflex.runner import compare_fits, export, run_fit, run_replicates, run_simulate, summarize_fit, write_error
from jmflex.simulation import SimSetting
from jmflex.utils import set_verbosity

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _fraction(value: str) -> float:
    keep = float(value)
    if not 0.0 < keep <= 1.0:
        raise argparse.ArgumentTypeError(f'keep fraction must lie in (0, 1], got {value}')
    return keep


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog='jmflex', description='Bayesian flexible additive joint models')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='More logging (-v info, -vv debug)')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=UsageParser)

    sim = sub.add_parser('simulate', help='Simulate a dataset of one of the study settings')
    sim.add_argument('--setting', type=int, choices=(1, 2, 3), required=True)
    sim.add_argument('--n', type=int, default=300, help='Number of subjects')
    sim.add_argument('--keep', type=_fraction, default=0.1, help='Fraction of grid points kept as observations')
    sim.add_argument('--seed', type=int, default=0)
    sim.add_argument('--out', required=True, help='Output directory')

    fit = sub.add_parser('fit', help='Fit a joint model')
    fit.add_argument('--surv', required=True, help='Survival table CSV')
    fit.add_argument('--long', required=True, help='Longitudinal table CSV')
    fit.add_argument('--config', required=True, help='Model configuration YAML')
    fit.add_argument('--out', required=True, help='Output directory')
    fit.add_argument('--seed', type=int, default=0)
    fit.add_argument('--mode-only', action='store_true', help='Posterior mode only, no chain')
    fit.add_argument('--restarts', type=int, default=3, help='Restarts after a failed fit')
    fit.add_argument('--shrink-alpha', action='store_true', help='Shrink the association basis on restart')
    fit.add_argument('--iterations', type=int, default=None)
    fit.add_argument('--burnin', type=int, default=None)
    fit.add_argument('--thin', type=int, default=None)
    fit.add_argument('--censor-gap', type=float, default=None,
                     help='End follow-up this long after the last measurement (overrides the configuration)')
    fit.add_argument('--progress', action='store_true', help='Report progress of Newton sweeps and MCMC')

    exp = sub.add_parser('export', help='Export an effect curve with pointwise bands')
    exp.add_argument('--fit', required=True, help='Fit directory')
    exp.add_argument('--which', choices=('alpha', 'lambda'), required=True)
    exp.add_argument('--grid', type=float, nargs=3, metavar=('LOWER', 'UPPER', 'SIZE'), default=None)
    exp.add_argument('--out', default=None, help='Output CSV (stdout when omitted)')

    summ = sub.add_parser('summarize', help='Posterior summaries of a fit')
    summ.add_argument('--fit', required=True, help='Fit directory')
    summ.add_argument('--quantiles', type=float, nargs='+', default=[0.025, 0.975])

    comp = sub.add_parser('compare', help='Rank fits by DIC')
    comp.add_argument('--fit', nargs='+', required=True, help='Fit directories')
    comp.add_argument('--out', default=None, help='Output CSV')

    rep = sub.add_parser('replicate', help='Simulate and fit replicates of a setting')
    rep.add_argument('--setting', type=int, choices=(1, 2, 3), required=True)
    rep.add_argument('--n', type=int, default=300)
    rep.add_argument('--keep', type=_fraction, default=0.1)
    rep.add_argument('--replicates', type=int, required=True)
    rep.add_argument('--config', required=True, help='Model configuration YAML')
    rep.add_argument('--out', required=True, help='Output directory')
    rep.add_argument('--seed', type=int, default=0)
    rep.add_argument('--mode-only', action='store_true')
    rep.add_argument('--restarts', type=int, default=3)
    rep.add_argument('--shrink-alpha', action='store_true')
    rep.add_argument('--workers', type=int, default=None, help='Worker processes (default: $JMFLEX_WORKERS or 1)')
    return parser


def _dispatch(args) -> None:
    if args.command == 'simulate':
        paths = run_simulate(args.setting, args.n, args.keep, args.seed, args.out)
        logger.info(f"Simulated dataset written to {os.path.dirname(paths['surv'])}")
    elif args.command == 'fit':
        manifest = run_fit(args.surv, args.long, args.config, args.out, seed=args.seed, mode_only=args.mode_only,
                           restarts=args.restarts, shrink_alpha=args.shrink_alpha, iterations=args.iterations,
                           burnin=args.burnin, thin=args.thin, censor_gap=args.censor_gap,
                           progress=args.progress)
        logger.info(f'Fit finished with status {manifest.status}')
    elif args.command == 'export':
        grid = None
        if args.grid is not None:
            lower, upper, size = args.grid
            grid = (lower, upper, int(size))
        frame = export(args.fit, args.which, grid, args.out)
        if args.out is None:
            sys.stdout.write(frame.to_csv(index=False, float_format='%.10g'))
    elif args.command == 'summarize':
        sys.stdout.write(summarize_fit(args.fit, tuple(args.quantiles)).to_csv(index=False, float_format='%.10g'))
    elif args.command == 'compare':
        frame = compare_fits(args.fit, args.out)
        if args.out is None:
            sys.stdout.write(frame.to_csv(index=False, float_format='%.10g'))
    elif args.command == 'replicate':
        config = parse_model_config(args.config)
        setting = SimSetting(setting=args.setting, n=args.n, thinning_keep=args.keep, seed=args.seed)
        run_replicates(setting, args.replicates, config, args.out, mode_only=args.mode_only, restarts=args.restarts,
                       shrink_alpha=args.shrink_alpha, workers=args.workers)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return exit_.code if isinstance(exit_.code, int) else EXIT_USAGE
    set_verbosity(args.verbose)
    out = args.out if args.command in ('simulate', 'fit', 'replicate') else None
    try:
        _dispatch(args)
    except (DataError, ConfigurationError) as err:
        payload = write_error(out, err)
        sys.stderr.write(f"{payload['error']}: {payload['message']}\n")
        return EXIT_DATA
    except (FitFailure, NonConcaveBlock, NumericalError) as err:
        payload = write_error(out, err)
        sys.stderr.write(f"{payload['error']}: {payload['message']}\n")
        return EXIT_FIT
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
