"""Command line interface. Each subcommand runs one stage of an experiment:

    python -m pydime train --config run.json --set train.steps=200
"""

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import PydimeError
from .pipeline import Experiment

logger = logging.getLogger(__name__)

STAGE_HELP = {
    'train': 'train a denoiser and write checkpoints',
    'generate': 'sample images from a trained checkpoint',
    'extract': 'match generations against the training set',
    'mia': 'membership inference with shadow models (LiRA and loss attack)',
    'sweep-t': 'LiRA success as a function of the timestep',
    'progress': 'LiRA success along training checkpoints',
    'inpaint': 'inpainting reconstruction attack',
    'dedup': 'deduplicate the training set and measure the effect on extraction',
    'canary': 'insert canaries and measure their exposure',
    'report': 'precision of the extraction scores',
}

def build_parser():

    parser = argparse.ArgumentParser(prog='pydime',
                                     description='Privacy audits of image diffusion models.')
    subparsers = parser.add_subparsers(dest='stage', required=True, metavar='stage')
    for stage, help_text in STAGE_HELP.items():
        sub = subparsers.add_parser(stage, help=help_text)
        sub.add_argument('--config', help='JSON configuration or run manifest')
        sub.add_argument('--out', help='output directory (default: $PYDIME_OUTPUT_ROOT/run-<seed>)')
        sub.add_argument('--seed', type=int, help='master seed')
        sub.add_argument('--set', dest='overrides', action='append', default=[],
                         metavar='KEY=VALUE', help='dotted-path configuration override')
        sub.add_argument('--threads', type=int, help='number of torch threads')
        sub.add_argument('--deterministic', action=argparse.BooleanOptionalAction,
                         help='request (or, with --no-deterministic, release) deterministic torch '
                              'kernels during training')
        sub.add_argument('-v', '--verbose', action='store_true', help='debug logging')

    return parser

def _overrides(args):

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f'seed={args.seed}')
    if args.threads is not None:
        overrides.append(f'threads={args.threads}')
    if args.deterministic is not None:
        overrides.append(f'train.deterministic={json.dumps(args.deterministic)}')
    if args.out is not None:
        overrides.append(f'output_dir={json.dumps(args.out)}')

    return overrides

def report_error(exc):
    """Print an error as one JSON line on stderr and return its exit code."""

    print(json.dumps({'error': exc.category, 'message': str(exc)}), file=sys.stderr)

    return exc.exit_code

def main(argv=None):

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')

    try:
        config = load_config(args.config, _overrides(args))
        experiment = Experiment(config, verbose=args.verbose)
        experiment.run(args.stage)
    except PydimeError as exc:
        logger.debug('Stage %s failed', args.stage, exc_info=True)
        return report_error(exc)

    return 0
