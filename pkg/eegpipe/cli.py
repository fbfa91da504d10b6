"""
Command-line interface
Each subcommand runs one stage (or the whole pipeline) from a JSON config
and exits 0 on success, 2 on configuration errors, 3 on data errors, 4 on
numerical failures and 1 on anything unexpected.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import List, Optional

import pandas as pd

from eegpipe import __version__
from eegpipe.config import Config, PipelineConfig
from eegpipe.errors import ConfigError, DataError, EegPipeError
from eegpipe.logging_setup import configure_logging
from eegpipe.ml import SweepResult
from eegpipe.pipeline import (
    SubjectSource, comparison_plan, comparison_rows, evaluate_comparison, extract_features, run_pipeline,
)
from eegpipe.plots import AccuracySeries, render_accuracy_plot, render_topomap
from eegpipe.preprocess import preprocess_recording
from eegpipe.report_builder import ReportBuilder
from eegpipe.seeding import derive_seed
from eegpipe.signal_io import load_feature_matrix, save_feature_matrix, save_recording, standard_montage
from eegpipe.stats import behavior_report, load_behavioral_csv, rank_features
from eegpipe.synthgen import SynthSpec, write_study

logger = logging.getLogger('eegpipe.cli')


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return PipelineConfig.load(args.config, overrides)


def _writer(path: str) -> ReportBuilder:
    return ReportBuilder(Config.TEMPLATES_DIR, os.path.dirname(os.path.abspath(path)))


def _comparison_index(fm, config: PipelineConfig, task: str, alternative: str):
    plan = comparison_plan(fm, config)
    if (task, alternative) not in plan:
        raise DataError(f"comparison {task}/{alternative} is not in the plan {plan}")
    return plan.index((task, alternative)), len(plan)


def cmd_synth(args: argparse.Namespace) -> None:
    spec = SynthSpec.load(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    write_study(spec, args.out)


def cmd_preprocess(args: argparse.Namespace) -> None:
    config = _load_config(args)
    source = SubjectSource.from_config(config)
    logs = []
    for index, rec in enumerate(source):
        clean, log = preprocess_recording(rec, source.montage, config.preprocess,
                                          config.features.baseline_label, derive_seed(config.seed, index))
        save_recording(clean.to_float32(), args.out)
        logs.append(log.to_dict())
    ReportBuilder(Config.TEMPLATES_DIR, args.out).write_json('_preprocess.json', logs)


def cmd_features(args: argparse.Namespace) -> None:
    config = _load_config(args)
    feature_set = extract_features(SubjectSource.from_config(config), config, args.jobs)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_feature_matrix(feature_set.features, args.out)


def cmd_rank(args: argparse.Namespace) -> None:
    config = _load_config(args)
    fm = load_feature_matrix(args.features)
    index, _ = _comparison_index(fm, config, args.task, args.alternative)
    ranking = rank_features(comparison_rows(fm, config, args.task, args.alternative, index))
    _writer(args.out).write_json(os.path.basename(args.out), [
        {'feature': r.descriptor, 'p': r.p_value, 'H': r.statistic} for r in ranking
    ])


def cmd_evaluate(args: argparse.Namespace, sweep: bool = False) -> None:
    config = _load_config(args)
    config = dataclasses.replace(config, ml=dataclasses.replace(config.ml, sweep=sweep))
    fm = load_feature_matrix(args.features)
    index, n_comparisons = _comparison_index(fm, config, args.task, args.alternative)
    scalp = sorted({d.channels[0] for d in fm.descriptors if d.kind == 'bandpower'})
    result = evaluate_comparison(fm, config, args.task, args.alternative, index, n_comparisons,
                                 tuple(scalp), args.jobs)
    writer = _writer(args.out)
    if sweep:
        writer.write_frame(os.path.basename(args.out), result.sweep.to_frame())
    else:
        writer.write_json(os.path.basename(args.out), {'config': config.to_dict(), **result.to_dict()})


def cmd_pipeline(args: argparse.Namespace) -> None:
    config = _load_config(args)
    run_pipeline(config, args.jobs, args.out)


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise DataError(f"{what} file not found: {path}")
    return path


def cmd_plot(args: argparse.Namespace) -> None:
    if args.kind == 'topomap':
        if not args.values:
            raise ConfigError("plot topomap needs --values")
        with open(_require_file(args.values, 'values'), 'r') as f:
            values = json.load(f)
        render_topomap(values, standard_montage(args.montage), args.out, args.title)
    elif args.evaluation:
        with open(_require_file(args.evaluation, 'evaluation'), 'r') as f:
            evaluation = json.load(f)
        comparisons = evaluation.get('comparisons', [evaluation])
        series = [
            AccuracySeries(c.get('name', str(i)), tuple(c['accuracies']),
                           None if c.get('baseline_accuracies') is None else tuple(c['baseline_accuracies']))
            for i, c in enumerate(comparisons)
        ]
        render_accuracy_plot(series, args.out, args.title)
    elif args.sweep:
        frame = pd.read_csv(_require_file(args.sweep, 'sweep'))
        render_accuracy_plot(SweepResult.from_frame(frame, args.comparison or ''), args.out, args.title)
    else:
        raise ConfigError("plot accuracy needs --evaluation or --sweep")


def cmd_behavior(args: argparse.Namespace) -> None:
    rows = behavior_report(load_behavioral_csv(args.csv), alpha=args.alpha)
    _writer(args.out).write_json(os.path.basename(args.out), rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='eegpipe', description="EEG condition-decoding pipeline")
    parser.add_argument('--version', action='version', version=f"eegpipe {__version__}")
    parser.add_argument('--log-level', default=Config.LOG_LEVEL)
    parser.add_argument('--log-format', choices=['text', 'json'], default=Config.LOG_FORMAT)
    sub = parser.add_subparsers(dest='command', required=True)

    def configured(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', required=True, help="Pipeline config JSON.")
        p.add_argument('--set', action='append', metavar='KEY=VALUE',
                       help="Override a config key, e.g. ml.n_features=100 (repeatable).")
        p.add_argument('--seed', type=int, default=None, help="Override the config seed.")
        p.add_argument('--jobs', type=int, default=None, help=f"Parallel workers (default {Config.N_JOBS}).")
        return p

    p = sub.add_parser('synth', help="Generate a synthetic study")
    p.add_argument('--spec', required=True, help="Synthetic study spec JSON.")
    p.add_argument('--out', required=True, help="Output directory for recordings.")
    p.add_argument('--seed', type=int, default=None, help="Override the seed in the --spec file.")
    p.set_defaults(func=cmd_synth)

    p = configured('preprocess', "Clean every recording and save the results")
    p.add_argument('--out', required=True, help="Output directory for cleaned recordings.")
    p.set_defaults(func=cmd_preprocess)

    p = configured('features', "Extract normalized features to CSV")
    p.add_argument('--out', required=True, help="Feature CSV path.")
    p.set_defaults(func=cmd_features)

    for name, func, help_text in (
        ('rank', cmd_rank, "Rank features for one comparison"),
        ('evaluate', cmd_evaluate, "LOSO evaluation with scrambled baseline for one comparison"),
        ('sweep', lambda a: cmd_evaluate(a, sweep=True), "Accuracy sweep over feature counts"),
    ):
        p = configured(name, help_text)
        p.add_argument('--features', required=True, help="Feature CSV written by 'features'.")
        p.add_argument('--task', required=True)
        p.add_argument('--alternative', required=True, help="Condition compared with the reference.")
        p.add_argument('--out', required=True)
        p.set_defaults(func=func)

    p = configured('pipeline', "Run every stage and write all reports")
    p.add_argument('--out', default=None, help="Output directory (default: config output_dir).")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser('plot', help="Render an SVG plot")
    p.add_argument('kind', choices=['topomap', 'accuracy'])
    p.add_argument('--out', required=True)
    p.add_argument('--title', default='')
    p.add_argument('--values', help="JSON object of electrode -> value (topomap).")
    p.add_argument('--montage', default='easycap57')
    p.add_argument('--evaluation', help="evaluation.json (accuracy strip).")
    p.add_argument('--sweep', help="sweep.csv (sweep curve).")
    p.add_argument('--comparison', help="Comparison to draw from a multi-comparison sweep.csv.")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser('behavior', help="Kruskal-Wallis tests on behavioral metrics")
    p.add_argument('--csv', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--alpha', type=float, default=0.05)
    p.set_defaults(func=cmd_behavior)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_format)
    try:
        args.func(args)
    except EegPipeError as e:
        logger.error("%s: %s", type(e).__name__, e, extra={'command': args.command})
        return e.exit_code
    except Exception:
        logger.exception("unexpected failure in %s", args.command)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
