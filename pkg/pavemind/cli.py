"""
Command line entry point.

    pavemind synth --out data/synth --seed 7
    pavemind plan --config configs/default.cfg --budget 2.5 --out out/

Exit status is 0 on success, 1 for input or configuration errors and 2 when a stage fails.
"""
import argparse
from dataclasses import replace
import logging
import os
from pathlib import Path
import sys

from pavemind.bayesnet import StructureError
from pavemind.pipeline import STAGES, ConfigError, PipelineConfig, StageError, load_config, run_pipeline
from pavemind.synthetic import gen_synthetic
from pavemind.utils import DataError


logger = logging.getLogger(__name__)


def _log_level(debug):
    if debug:
        return logging.DEBUG
    name = os.environ.get('PAVEMIND_LOG', 'INFO').upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='pavemind', description='Pavement maintenance decision engine.')
    parser.add_argument('--debug', action='store_true')
    subparsers = parser.add_subparsers(dest='command', required=True)

    synth = subparsers.add_parser('synth', help='Write a synthetic fixture.')
    synth.add_argument('--out', type=Path, required=True)
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--routes', type=int, default=3)
    synth.add_argument('--segments', type=int, default=5)
    synth.add_argument('--years', type=int, default=9)
    synth.add_argument('--treatments', type=int, default=6)

    for stage in STAGES:
        sub = subparsers.add_parser(stage, help=f'Run the pipeline through the {stage} stage.')
        sub.add_argument('--config', type=Path, default=None)
        sub.add_argument('--detection', type=Path, default=None)
        sub.add_argument('--maintenance', type=Path, default=None)
        sub.add_argument('--routes', type=Path, default=None)
        sub.add_argument('--budget', type=float, default=None)
        sub.add_argument('--budget-scope', choices=('network', 'route'), default=None)
        sub.add_argument('--seed', type=int, default=None)
        sub.add_argument('--out', type=Path, default=None)
        sub.add_argument('--workers', type=int, default=None)
        sub.add_argument('--plot', action='store_true')
    return parser


def config_from_args(args) -> PipelineConfig:
    """Config file values first, then command line overrides."""
    config = load_config(args.config) if args.config is not None else PipelineConfig()
    overrides = {}
    for name, attr in (('detection', 'detection'), ('maintenance', 'maintenance'), ('routes', 'routes'),
                       ('seed', 'seed'), ('out', 'out_dir'), ('workers', 'workers')):
        value = getattr(args, name)
        if value is not None:
            overrides[attr] = value
    if args.plot:
        overrides['plot'] = True
    budget = {}
    if args.budget is not None:
        budget['amount'] = args.budget
    if args.budget_scope is not None:
        budget['scope'] = args.budget_scope
    if budget:
        overrides['budget'] = replace(config.budget, **budget)
    return replace(config, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=_log_level(args.debug))

    try:
        if args.command == 'synth':
            gen_synthetic(args.seed, args.routes, args.segments, args.years, args.treatments, args.out)
            return 0
        report = run_pipeline(config_from_args(args), until=args.command)
    except StageError as e:
        logger.error('%s', e)
        return 2
    except (DataError, ConfigError, StructureError, FileNotFoundError, ValueError) as e:
        logger.error('%s', e)
        return 1
    for warning in report.warnings:
        logger.warning(warning)
    logger.info('Finished stages: %s', ', '.join(report.stages))
    return 0


if __name__ == '__main__':
    sys.exit(main())
