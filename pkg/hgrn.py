#!/usr/bin/env python3
"""
HGRN command-line harness: training, evaluation, ablations, extrapolation,
gate statistics, scan benchmarking and gradient checking.
"""

__version__ = "1.0.0"

import argparse
import json
import logging
import re
import sys
from pathlib import Path

# Add lib directory to path
sys.path.insert(0, str(Path(__file__).parent))

from lib.commands import COMMANDS, EXIT_CONFIG, EXIT_FAILURE, LOG_FORMAT
from lib.config import Config
from lib.errors import CheckpointError, ConfigError, HGRNError

logger = logging.getLogger(__name__)

OVERRIDE_PATTERN = re.compile(r'^[a-z_]+\.[a-z_]+=')


def _common_flags():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration (defaults apply when omitted)')
    common.add_argument('--seed', type=int, help='sets train.seed')
    common.add_argument('--precision', choices=['f32', 'f64'], help='sets train.precision')
    common.add_argument('--out', help='output root for run directories (sets run.out_root)')
    common.add_argument('--verbose', action='store_true', help='debug logging')
    return common


def build_parser():
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog='hgrn', description=__doc__,
        epilog='Any section.key=value word anywhere on the command line overrides that config key.',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    verbs = parser.add_subparsers(dest='command', required=True)

    verbs.add_parser('train', parents=[common], help='train a model on the configured task')

    p = verbs.add_parser('eval', parents=[common], help='evaluate a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--corpus')

    p = verbs.add_parser('extrapolate', parents=[common], help='perplexity at several inference lengths')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--corpus')
    p.add_argument('--lengths', type=int, nargs='+')

    p = verbs.add_parser('gate-stats', parents=[common], help='per-layer forget gate statistics')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--corpus')
    p.add_argument('--out-csv', dest='out_csv')

    p = verbs.add_parser('scan-bench', parents=[common], help='time the sequential and parallel scans')
    p.add_argument('--lengths', type=int, nargs='+')
    p.add_argument('--width', type=int)
    p.add_argument('--repeats', type=int)

    p = verbs.add_parser('gradcheck', parents=[common], help='finite-difference check of every gradient')
    p.add_argument('--tolerance', type=float)
    p.add_argument('--freeze', nargs='+', metavar='PARAM', help='parameter names to skip')
    p.add_argument('--corrupt', action='store_true', help='scale one backward term to show the check fails')

    p = verbs.add_parser('ablate', parents=[common], help='train every variant of an ablation suite')
    p.add_argument('suite', choices=['lower_bound', 'gates', 'complex'])
    p.add_argument('--seeds', type=int, nargs='+')

    p = verbs.add_parser('export-mixing', parents=[common], help='per-layer token mixing matrices as CSV')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--corpus')
    p.add_argument('--dims', type=int, nargs='+')
    p.add_argument('--length', type=int)
    return parser


def split_overrides(argv):
    """Separate section.key=value words from the flags argparse sees"""
    flags, overrides = [], []
    for word in argv:
        (overrides if OVERRIDE_PATTERN.match(word) else flags).append(word)
    return flags, overrides


def collect_overrides(args, explicit):
    """Global flags expressed as dotted overrides, followed by the explicit ones"""
    overrides = []
    if args.seed is not None:
        overrides.append(f'train.seed={args.seed}')
    if args.precision:
        overrides.append(f'train.precision={json.dumps(args.precision)}')
    if args.out:
        overrides.append(f'run.out_root={json.dumps(args.out)}')
    return overrides + list(explicit)


def main(argv=None):
    """Main entry point"""
    flags, explicit = split_overrides(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(flags)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
    )
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = Config(args.config, collect_overrides(args, explicit))
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG

    try:
        return COMMANDS[args.command](config, args)
    except (ConfigError, CheckpointError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_CONFIG
    except HGRNError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
