"""
Pipeline orchestration
Runs preprocessing, feature extraction, normalization and the per-comparison
ranking, LOSO evaluation, scrambled baseline and feature sweep, then writes
every report into one output directory. The run is the single writer of
that directory; stages parallelize internally.
"""
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from eegpipe.config import Config, PipelineConfig
from eegpipe.connectivity import pdc_band_features
from eegpipe.errors import DataError, EegPipeError
from eegpipe.ml import (
    EvaluationReport, SvmConfig, SweepResult, balance_classes, best_feature_count, compare_to_baseline,
    feature_sweep, fold_rankings, loso_evaluate, scrambled_baseline,
)
from eegpipe.models import BehavioralRecord, FeatureDescriptor, FeatureMatrix, FrequencyBand, Montage, Recording
from eegpipe.plots import AccuracySeries, render_accuracy_plot, render_topomap
from eegpipe.preprocess import PreprocessLog, preprocess_recording
from eegpipe.report_builder import ReportBuilder
from eegpipe.seeding import STREAM_BALANCE, derive_seed
from eegpipe.signal_io import load_recording, segment_windows, standard_montage
from eegpipe.spectral import MultitaperConfig, band_power_features, normalize_to_baseline, standardize_across_subjects
from eegpipe.stats import (
    RankedFeature, behavior_report, bonferroni_threshold, comparison_thresholds,
    load_behavioral_csv, rank_features, significant_feature_counts,
)
from eegpipe.synthgen import REST_TASK, SynthSpec, gen_behavior, gen_subject

logger = logging.getLogger(__name__)


@dataclass
class SubjectSource:
    """Where the subjects of a run come from, opened lazily one at a time"""
    montage: Montage
    n_subjects: int
    synth: Optional[SynthSpec] = None
    manifests: List[str] = field(default_factory=list)

    @classmethod
    def from_config(cls, config: PipelineConfig) -> 'SubjectSource':
        if config.input.synth_spec is not None:
            spec = SynthSpec.load(config.input.synth_spec)
            return cls(standard_montage(spec.montage), spec.n_subjects, synth=spec)
        directory = config.input.recordings_dir
        if not os.path.isdir(directory):
            raise DataError(f"recordings directory not found: {directory}")
        manifests = sorted(
            os.path.join(directory, n) for n in os.listdir(directory)
            if n.endswith('.json') and not n.startswith('_')
        )
        if not manifests:
            raise DataError(f"no recording manifests in {directory}")
        return cls(standard_montage(config.input.montage), len(manifests), manifests=manifests)

    def subject(self, index: int) -> Recording:
        if self.synth is not None:
            return gen_subject(self.synth, index, self.montage)[0]
        return load_recording(self.manifests[index])

    def __iter__(self) -> Iterator[Recording]:
        for index in range(self.n_subjects):
            yield self.subject(index)

    def behavior(self, config: PipelineConfig) -> List[BehavioralRecord]:
        if config.input.behavior_csv is not None:
            return load_behavioral_csv(config.input.behavior_csv)
        if self.synth is not None and self.synth.emit_behavior:
            frame = gen_behavior(self.synth)
            return [BehavioralRecord(**row) for row in frame.to_dict(orient='records')]
        return []


@dataclass
class StageTracker:
    """Name of the stage currently running, for failure reports"""
    name: str = 'load'


@dataclass
class FeatureSet:
    """Normalized, standardized features of every subject"""
    features: FeatureMatrix
    preprocess_logs: List[PreprocessLog]
    scalp_names: Tuple[str, ...]


@dataclass
class ComparisonResult:
    task: str
    reference: str
    alternative: str
    ranking: List[RankedFeature]
    feature_threshold: float
    electrode_counts: Dict
    report: EvaluationReport
    sweep: Optional[SweepResult] = None

    @property
    def name(self) -> str:
        return f"{self.task}: {self.reference} vs {self.alternative}"

    @property
    def slug(self) -> str:
        return re.sub(r'[^A-Za-z0-9]+', '-', f"{self.task}_{self.alternative}").strip('-').lower()

    def significant_by_band(self) -> Dict[str, Dict[str, int]]:
        tally = Counter()
        for item in self.ranking:
            if item.p_value < self.feature_threshold:
                descriptor = FeatureDescriptor.parse(item.descriptor)
                tally[(descriptor.kind, descriptor.band)] += 1
        out: Dict[str, Dict[str, int]] = {}
        for (kind, band), count in sorted(tally.items()):
            out.setdefault(kind, {})[band] = count
        return out

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'task': self.task,
            'reference': self.reference,
            'alternative': self.alternative,
            'feature_threshold': self.feature_threshold,
            'significant_features': self.significant_by_band(),
            'best_sweep_count': None if self.sweep is None else self.sweep.best_count,
            **self.report.to_dict(),
        }


def _bands(config: PipelineConfig) -> List[FrequencyBand]:
    return [FrequencyBand(name, lo, hi) for name, lo, hi in config.features.bands]


def subject_features(rec: Recording, config: PipelineConfig, n_jobs: Optional[int] = None) -> FeatureMatrix:
    """Baseline-normalized feature rows of one (preprocessed) subject"""
    f = config.features
    bands = _bands(config)
    windows = [
        w for w in segment_windows(rec, f.window_s, f.hop_s, f.span_s)
        if w.condition != f.baseline_label and w.task != REST_TASK
    ]
    baseline = segment_windows(rec, f.window_s, f.hop_s, f.baseline_span_s, conditions=[f.baseline_label])
    if not windows:
        raise DataError(f"{rec.subject_id}: no task segments to window")
    if not baseline:
        raise DataError(f"{rec.subject_id}: no {f.baseline_label!r} baseline segment")

    def extract(ws):
        blocks = []
        if f.bandpower:
            blocks.append(band_power_features(ws, bands, MultitaperConfig(f.nw, f.n_tapers)))
        if f.pdc:
            blocks.append(pdc_band_features(ws, f.pdc_subset, f.mvar_order, bands, f.pdc_n_freqs, n_jobs))
        fm = blocks[0]
        for block in blocks[1:]:
            fm = fm.hstack(block)
        return fm

    return normalize_to_baseline(extract(windows), extract(baseline))


def extract_features(source: SubjectSource, config: PipelineConfig, n_jobs: Optional[int] = None,
                     stage: Optional[StageTracker] = None) -> FeatureSet:
    """Preprocess each subject, extract and normalize its features, then standardize the pool"""
    stage = stage or StageTracker()
    blocks, logs, scalp_names = [], [], None
    for index in range(source.n_subjects):
        stage.name = 'load'
        rec = source.subject(index)
        logger.info("subject %s (%d/%d)", rec.subject_id, index + 1, source.n_subjects,
                    extra={'stage': 'preprocess', 'subject': rec.subject_id})
        stage.name = 'preprocess'
        if config.preprocess.enabled:
            rec, log = preprocess_recording(rec, source.montage, config.preprocess,
                                            config.features.baseline_label, derive_seed(config.seed, index))
            logs.append(log)
        stage.name = 'features'
        names = tuple(rec.channels_with_role('scalp'))
        if scalp_names is None:
            scalp_names = names
        elif names != scalp_names:
            raise DataError(f"{rec.subject_id}: scalp channels differ from the first subject")
        blocks.append(subject_features(rec, config, n_jobs))
    stage.name = 'normalize'
    features = standardize_across_subjects(FeatureMatrix.vstack(blocks))
    logger.info("features: %d rows x %d columns", features.n_rows, features.n_features)
    return FeatureSet(features, logs, scalp_names)


def comparison_plan(fm: FeatureMatrix, config: PipelineConfig) -> List[Tuple[str, str]]:
    """(task, alternative) pairs, task-major; each is compared against the reference condition"""
    c = config.comparisons
    conditions = sorted(fm.labels['condition'].unique())
    tasks = list(c.tasks) if c.tasks is not None else sorted(fm.labels['task'].unique())
    if c.reference not in conditions:
        raise DataError(f"reference condition {c.reference!r} not in the data ({conditions})")
    alternatives = list(c.alternatives) if c.alternatives is not None else [x for x in conditions if x != c.reference]
    for name, wanted, present in (('condition', alternatives, conditions),
                                  ('task', tasks, sorted(fm.labels['task'].unique()))):
        missing = [x for x in wanted if x not in present]
        if missing:
            raise DataError(f"{name}(s) {missing} not in the data")
    if not alternatives or not tasks:
        raise DataError("comparison plan is empty")
    return [(task, alt) for task in tasks for alt in alternatives]


def comparison_rows(fm: FeatureMatrix, config: PipelineConfig, task: str, alternative: str,
                    index: int) -> FeatureMatrix:
    """Class-balanced rows of one comparison; index selects its sampling stream"""
    labels = fm.labels
    rows = (labels['task'] == task) & labels['condition'].isin([config.comparisons.reference, alternative])
    return balance_classes(
        fm.select_rows(rows.to_numpy()), config.ml.n_per_class,
        seed=derive_seed(config.seed, STREAM_BALANCE + index),
        with_replacement=config.ml.sample_with_replacement,
    )


def evaluate_comparison(fm: FeatureMatrix, config: PipelineConfig, task: str, alternative: str,
                        index: int, n_comparisons: int, scalp_names: Tuple[str, ...] = (),
                        n_jobs: Optional[int] = None, stage: Optional[StageTracker] = None) -> ComparisonResult:
    """Balance, rank, LOSO, scrambled baseline and (optionally) sweep for one comparison"""
    stage = stage or StageTracker()
    stage.name = 'rank'
    ml, reference = config.ml, config.comparisons.reference
    balanced = comparison_rows(fm, config, task, alternative, index)
    svm = SvmConfig.from_ml_config(ml)
    thresholds = comparison_thresholds(n_comparisons, config.comparisons.significance_levels)

    ranking = rank_features(balanced)
    feature_threshold = bonferroni_threshold(config.selection.alpha, config.selection.n_tests or fm.n_features)
    counts = significant_feature_counts(ranking, feature_threshold, scalp_names)

    per_fold = fold_rankings(balanced, n_jobs=n_jobs)
    stage.name = 'evaluate'
    report = loso_evaluate(balanced, svm, per_fold, ml.n_features, config.seed,
                           inner_cv=ml.inner_cv, k_folds=ml.k_folds, n_jobs=n_jobs)
    stage.name = 'baseline'
    baseline = scrambled_baseline(balanced, svm, ml.n_features, config.seed, n_jobs=n_jobs)
    report.baseline_accuracies = [float(a) for a in baseline.accuracies]
    report.comparison = compare_to_baseline(report.accuracies, baseline.accuracies, thresholds)

    sweep = None
    if ml.sweep:
        stage.name = 'sweep'
        sweep = feature_sweep(balanced, svm, per_fold, ml.sweep_max, config.seed,
                              schedule=ml.sweep_schedule, thresholds=thresholds,
                              name=f"{task}: {reference} vs {alternative}", n_jobs=n_jobs)
    result = ComparisonResult(task, reference, alternative, ranking, feature_threshold, counts, report, sweep)
    logger.info("%s: median %.3f vs scrambled %.3f, p=%.3g", result.name, report.median_accuracy,
                float(np.median(baseline.accuracies)), report.comparison['p'],
                extra={'stage': 'evaluate', 'comparison': result.name})
    return result


def _stars(comparison: Dict) -> str:
    flags = [v for k, v in sorted(comparison.items()) if k.startswith('significant_')]
    return '*' * sum(bool(v) for v in flags)


def _write_outputs(builder: ReportBuilder, config: PipelineConfig, feature_set: FeatureSet,
                   results: List[ComparisonResult], behavior: List[Dict], montage: Montage,
                   n_subjects: int) -> None:
    outputs = config.outputs
    fm = feature_set.features
    if outputs.features_csv:
        builder.write_features(fm)
    builder.write_json('ranking.json', {
        r.name: [{'feature': f.descriptor, 'p': f.p_value, 'H': f.statistic} for f in r.ranking]
        for r in results
    })

    sweeps = [r.sweep for r in results if r.sweep is not None]
    best = best_feature_count(sweeps, max(config.comparisons.significance_levels)) if sweeps else None
    thresholds = comparison_thresholds(len(results), config.comparisons.significance_levels)
    builder.write_json('evaluation.json', {
        'config': config.to_dict(),
        'seed': config.seed,
        'thresholds': {f"{level:g}": t for level, t in sorted(thresholds.items(), reverse=True)},
        'best_feature_count': None if best is None else {'n_features': best[0], 'n_significant': best[1]},
        'comparisons': [r.to_dict() for r in results],
    })
    if sweeps:
        builder.write_frame('sweep.csv', pd.concat([s.to_frame() for s in sweeps], ignore_index=True))
    builder.write_json('preprocess.json', [log.to_dict() for log in feature_set.preprocess_logs])
    if behavior:
        builder.write_json('behavior.json', behavior)

    if outputs.plots:
        render_accuracy_plot([AccuracySeries.from_report(r.slug, r.report) for r in results],
                             builder.path('plots/accuracy.svg'), 'LOSO accuracy vs scrambled labels',
                             builder.templates_dir)
        for r in results:
            total = {n: r.electrode_counts['total'][n] for n in feature_set.scalp_names if n in montage}
            render_topomap(total, montage, builder.path(f"plots/topomap_{r.slug}.svg"),
                           f"{r.name}: significant features", builder.templates_dir)
            if r.sweep is not None:
                render_accuracy_plot(r.sweep, builder.path(f"plots/sweep_{r.slug}.svg"),
                                     f"{r.name}: feature sweep", builder.templates_dir)

    if outputs.summary:
        bands = [name for name, _, _ in config.features.bands]
        builder.render_summary({
            'title': 'eegpipe run summary',
            'seed': config.seed,
            'n_subjects': n_subjects,
            'n_features': fm.n_features,
            'n_bandpower': sum(d.kind == 'bandpower' for d in fm.descriptors),
            'n_pdc': sum(d.kind == 'pdc' for d in fm.descriptors),
            'thresholds': sorted(thresholds.items(), reverse=True),
            'feature_threshold': results[0].feature_threshold if results else 0.0,
            'bands': bands,
            'best_count': best,
            'comparisons': [
                {
                    'name': r.name,
                    'median': r.report.median_accuracy,
                    'baseline_median': float(np.median(r.report.baseline_accuracies)),
                    'p': r.report.comparison['p'],
                    'stars': _stars(r.report.comparison),
                    'best_count': None if r.sweep is None else r.sweep.best_count,
                    'significant': r.significant_by_band(),
                }
                for r in results
            ],
            'preprocess': [log.to_dict() for log in feature_set.preprocess_logs],
            'behavior': behavior,
            'config_json': json.dumps(config.to_dict(), indent=2, sort_keys=True),
        })


def run_pipeline(config: PipelineConfig, n_jobs: Optional[int] = None,
                 output_dir: Optional[str] = None) -> str:
    """Execute every stage and write the reports; returns the output directory

    A failing stage leaves a run-manifest.json with complete=false naming
    that stage, then the error propagates.
    """
    output_dir = output_dir or config.output_dir
    builder = ReportBuilder(Config.TEMPLATES_DIR, output_dir)
    stage = StageTracker()
    try:
        source = SubjectSource.from_config(config)

        stage.name = 'behavior'
        records = source.behavior(config)
        behavior = behavior_report(records) if records else []

        feature_set = extract_features(source, config, n_jobs, stage)

        stage.name = 'rank'
        plan = comparison_plan(feature_set.features, config)
        results = []
        for index, (task, alternative) in enumerate(plan):
            results.append(evaluate_comparison(feature_set.features, config, task, alternative, index,
                                               len(plan), feature_set.scalp_names, n_jobs, stage))

        stage.name = 'outputs'
        _write_outputs(builder, config, feature_set, results, behavior, source.montage, source.n_subjects)
    except EegPipeError as e:
        logger.error("stage %s failed: %s", stage.name, e, extra={'stage': stage.name})
        builder.write_manifest(config.to_dict(), config.seed, complete=False,
                               failed_stage=stage.name, error=str(e))
        raise
    except Exception as e:
        logger.exception("stage %s failed unexpectedly", stage.name, extra={'stage': stage.name})
        builder.write_manifest(config.to_dict(), config.seed, complete=False,
                               failed_stage=stage.name, error=f"{type(e).__name__}: {e}")
        raise

    builder.write_manifest(config.to_dict(), config.seed, complete=True)
    logger.info("run complete: %s", output_dir)
    return output_dir
