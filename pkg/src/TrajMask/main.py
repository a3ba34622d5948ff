import argparse
import os
import sys
from dataclasses import replace
from typing import List, Optional

import pandas as pd

from . import experiments
from .config import ExperimentConfig, load_config
from .constants import MASK_KINDS
from .exceptions import ConfigError, TrajMaskException
from .pipeline import Run, build_dataset, dataset_for, start_run, train_model
from .report_generator import create_report, write_outputs, write_summary
from .trajdata import save_dataset
from .training import load_checkpoint
from .utils import get_logger, set_verbose

logger = get_logger('main')

SUITES = {
    'ablate-masks': experiments.ablate_masks,
    'hetero': experiments.hetero,
    'sweep-data': experiments.sweep_data,
    'sweep-seglen': experiments.sweep_seglen,
    'td3': experiments.td3_suite,
}


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """
    Parses command-line arguments.

    Returns:
        argparse.Namespace: An object containing the parsed arguments.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=0, help="Root seed of the run.")
    common.add_argument('--n-seeds', type=int, default=1,
                        help="Run seeds seed .. seed+N-1 one after another.")
    common.add_argument('--out', help="Output root (default: $MTM_OUT_DIR, else ./Result).")
    common.add_argument('--config', help="Path to an experiment config JSON file.")
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help="Override one config value; the value is parsed as JSON.\n"
                             "Example: --set train.total_steps=200")
    common.add_argument('--verbose', action='store_true', help="Log at DEBUG level.")

    parser = argparse.ArgumentParser(
        prog='trajmask',
        description="Masked trajectory modeling: generate data, train one model for many\n"
                    "capabilities, and run the evaluation suites.",
        formatter_class=argparse.RawTextHelpFormatter
    )
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('gen-data', parents=[common], help="Build and save a dataset.")

    train = commands.add_parser('train', parents=[common], help="Train a model and checkpoint it.")
    train.add_argument('--mask', choices=list(MASK_KINDS), help="Training mask kind (overrides train.mask_kind).")
    train.add_argument('--resume', help="Continue from an MTMC checkpoint.")

    evaluate = commands.add_parser('eval-capabilities', parents=[common],
                                   help="Four-capability report of a trained model.")
    evaluate.add_argument('--checkpoint', help="MTMC checkpoint; a model is trained first when omitted.")
    evaluate.add_argument('--with-baselines', action='store_true', help="Also train the specialized MLP baselines.")
    evaluate.add_argument('--output-format', nargs='+', choices=['txt', 'pdf', 'json'], default=[],
                          help="Specify one or more output formats (txt, pdf, json).\n"
                               "Example: --output-format txt pdf json")

    for name in SUITES:
        commands.add_parser(name, parents=[common], help="Run the {0} suite.".format(name))

    report = commands.add_parser('report', parents=[common], help="Aggregate metrics CSVs.")
    report.add_argument('--input', nargs='+', required=True, help="Run directories or metrics.csv files.")
    report.add_argument('--report', choices=['csv', 'excel'], default='csv',
                        help="Specify if you want to generate a CSV or Excel summary.\nExample: --report csv")
    return parser.parse_args(argv)


def _config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.overrides)
    if getattr(args, 'mask', None):
        overrides.append('train.mask_kind="{0}"'.format(args.mask))
    return load_config(args.config, overrides)


def run_gen_data(args: argparse.Namespace, config: ExperimentConfig, seed: int) -> None:
    run = start_run('gen-data', config, seed, args.out)
    dataset = build_dataset(config, seed)
    path = run.path('dataset.mtmd')
    save_dataset(path, dataset)
    run.manifest.artifacts['dataset'] = 'dataset.mtmd'
    run.metrics.log_many(0, {'n_trajectories': len(dataset.trajectories),
                             'random_ref': dataset.manifest.random_ref,
                             'expert_ref': dataset.manifest.expert_ref,
                             'behavior_return': experiments.behavior_return(dataset.trajectories)})
    run.finish()


def run_train(args: argparse.Namespace, config: ExperimentConfig, seed: int) -> None:
    run = start_run('train', config, seed, args.out)
    resume = load_checkpoint(args.resume) if args.resume else None
    dataset = dataset_for(config, seed)
    result, _ = train_model(config, dataset.train_split(), dataset.eval_split(), seed, run.metrics,
                            run.directory, resume)
    run.manifest.artifacts['checkpoint'] = os.path.relpath(result.checkpoint, run.directory)
    run.finish()


def run_eval(args: argparse.Namespace, config: ExperimentConfig, seed: int) -> None:
    run = start_run('eval-capabilities', config, seed, args.out)
    dataset = dataset_for(config, seed)
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        model = checkpoint.build_model(seed)
        stats = checkpoint.stats() or dataset.manifest.stats()
        config = replace(config, model=model.config,
                         train=replace(config.train, segment_length=model.segment_length))
        if stats is None:
            raise ConfigError('checkpoint', 'carries no normalization statistics')
    else:
        result, stats = train_model(config, dataset.train_split(), dataset.eval_split(), seed, run.metrics,
                                    run.directory)
        model = result.model
    report = experiments.eval_capabilities(model, stats, dataset, config, seed, run.metrics, args.with_baselines)
    write_summary(run.directory, pd.DataFrame([dict(report.metrics, seed=seed)]))
    for path in write_outputs(run.directory, report, args.output_format):
        run.manifest.artifacts[os.path.splitext(path)[1][1:]] = os.path.basename(path)
    run.finish()


def run_suite(args: argparse.Namespace, config: ExperimentConfig, seed: int) -> None:
    run: Run = start_run(args.command, config, seed, args.out)
    frame = SUITES[args.command](config, seed, run.metrics)
    write_summary(run.directory, frame)
    if args.command == 'td3' and len(frame):
        write_summary(run.directory, experiments.td3_summary(frame), 'td3_summary.csv')
    run.manifest.artifacts['summary'] = 'summary.csv'
    run.finish()


COMMANDS = {'gen-data': run_gen_data, 'train': run_train, 'eval-capabilities': run_eval}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main function: dispatches a command over one or more seeds.

    Returns:
        int: Process exit status.
    """
    args = parse_arguments(argv)
    set_verbose(args.verbose)
    try:
        if args.command == 'report':
            create_report(args.input, args.report, args.out)
            return 0
        config = _config(args)
        handler = COMMANDS.get(args.command, run_suite)
        for seed in range(args.seed, args.seed + max(1, args.n_seeds)):
            logger.info('Start %s (seed %d).', args.command, seed)
            handler(args, config, seed)
            logger.info('End %s (seed %d).', args.command, seed)
    except TrajMaskException as exc:
        logger.error('%s failed: %s', args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
