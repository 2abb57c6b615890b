"""
Experiment Main - Entry point for LEGCNet experiments
Subcommands: run, report, analyze, diagnose
"""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import logging

from common.errors import LegcnetError
from experiment.config import cli_overrides, load_config, parse_strategies
from experiment.artifacts import RunLayout
from experiment.report import TABLES, VARIANTS, required_strategies, write_tables
from experiment.runner import ExperimentRunner, analyze, cell_order, diagnose

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="[%(name)s] %(message)s", force=True)


def _seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(description='LEGCNet pruning experiments')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    parser.add_argument('-q', '--quiet', action='store_true', help='Warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='INI experiment config')
    common.add_argument('--out', help='Output directory (default: [experiment] output_dir)')
    common.add_argument('--seeds', type=_seeds, help='Comma separated seeds, e.g. 0,1,2,3,4')
    common.add_argument('--strategy', action='append', dest='strategies',
                        help='Strategy to run (repeatable): dense, legcnet-ft, legcnet-pt, random, magnitude')
    common.add_argument('--workers', type=int, help='Seeds run concurrently (default: 1)')

    sub.add_parser('run', parents=[common], help='Train, analyze, prune, retrain and report')
    report = sub.add_parser('report', parents=[common], help='Tables from recorded cells')
    report.add_argument('--table', action='append', choices=TABLES, dest='tables',
                        help='Table to emit (repeatable, default: all)')
    report.add_argument('--variant', action='append', choices=VARIANTS, dest='variants',
                        help='Seed aggregation (repeatable, default: median and best)')
    sub.add_parser('analyze', parents=[common],
                   help='Recompute exponents, Granger tests and masks from stored trajectories')
    sub.add_parser('diagnose', parents=[common],
                   help='Recompute ESD and SHAP diagnostics from stored checkpoints')
    return parser


def _report(cfg, tables=TABLES, variants=("median", "best")):
    problems = write_tables(RunLayout(cfg.run_dir), cfg.name, cfg.seeds, tables, variants)
    for table_id, missing in problems.items():
        print(f"[Report] {table_id}: missing rows: {', '.join(missing)}", file=sys.stderr)
    return not problems


def main(argv=None):
    """Main entry point; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    try:
        if args.strategies:
            parse_strategies(args.strategies)
        cfg = load_config(args.config, cli_overrides(args.out, args.seeds, args.strategies, args.workers))
    except LegcnetError as e:
        print(f"[Experiment] {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == 'run':
            runner = ExperimentRunner(cfg)
            runner.run()
            planned = set(cell_order(cfg.strategies))
            _report(cfg, [t for t in TABLES if set(required_strategies(t)) <= planned
                         and (t != 'T4' or cfg.diagnostics.esd)])
            return EXIT_OK if runner.all_ok else EXIT_FAILED
        if args.command == 'report':
            ok = _report(cfg, args.tables or TABLES, args.variants or ("median", "best"))
            return EXIT_OK if ok else EXIT_FAILED
        if args.command == 'analyze':
            return EXIT_OK if analyze(cfg) == 0 else EXIT_FAILED
        if args.command == 'diagnose':
            return EXIT_OK if diagnose(cfg) == 0 else EXIT_FAILED
    except (LegcnetError, OSError) as e:
        print(f"[Experiment] {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
