"""
Statistics
Kruskal-Wallis tests (single, column-vectorized and exact permutation),
feature ranking, Bonferroni thresholds and the behavioral metrics with
their per-task condition comparisons.
"""
import logging
import math
import os
from collections import defaultdict
from itertools import combinations
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats as sp_stats

from eegpipe.errors import ConfigError, DataError
from eegpipe.models import BehavioralRecord, FeatureDescriptor, FeatureMatrix, TestResult

logger = logging.getLogger(__name__)

BEHAVIOR_METRICS = ('accuracy', 'n_correct', 'ies', 'duration')
BEHAVIOR_COLUMNS = ['subject', 'condition', 'task', 'n_correct', 'n_submitted', 'duration_s']


class RankedFeature(NamedTuple):
    descriptor: str
    p_value: float
    statistic: float


def _check_groups(groups: Sequence[Sequence[float]]) -> List[np.ndarray]:
    arrays = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(arrays) < 2:
        raise DataError(f"Kruskal-Wallis needs >= 2 groups, got {len(arrays)}")
    if any(a.size == 0 for a in arrays):
        raise DataError("Kruskal-Wallis group is empty")
    if sum(a.size for a in arrays) < 3:
        raise DataError("Kruskal-Wallis needs >= 3 observations in total")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise DataError("Kruskal-Wallis input contains non-finite values")
    return arrays


def _clip_p(p: float) -> float:
    return float(min(1.0, max(p, np.finfo(float).tiny)))


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> TestResult:
    """Tie-corrected H with a chi-square(k-1) p-value"""
    arrays = _check_groups(groups)
    sizes = tuple(a.size for a in arrays)
    pooled = np.concatenate(arrays)
    if np.all(pooled == pooled[0]):
        return TestResult(0.0, 1.0, sizes)
    statistic, p_value = sp_stats.kruskal(*arrays)
    return TestResult(max(float(statistic), 0.0), _clip_p(p_value), sizes)


def kruskal_wallis_columns(values: np.ndarray, labels: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    """H and p for every column of values at once, groups given by labels"""
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels)
    if values.ndim != 2 or values.shape[0] != labels.shape[0]:
        raise DataError("values must be rows x columns with one label per row")
    groups = np.unique(labels)
    if len(groups) < 2:
        raise DataError(f"Kruskal-Wallis needs >= 2 groups, got {len(groups)}")
    n = values.shape[0]
    if n < 3:
        raise DataError("Kruskal-Wallis needs >= 3 observations in total")

    ranks = sp_stats.rankdata(values, axis=0)
    h = np.zeros(values.shape[1])
    for group in groups:
        rows = labels == group
        h += ranks[rows].sum(axis=0) ** 2 / rows.sum()
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    # sum(t^3 - t) over tie groups from the rank sum of squares
    ties = 12.0 * (n * (n + 1) * (2 * n + 1) / 6.0 - np.sum(ranks ** 2, axis=0))
    correction = 1.0 - ties / (n ** 3 - n)

    constant = np.ptp(values, axis=0) == 0
    with np.errstate(divide='ignore', invalid='ignore'):
        h = np.where(constant, 0.0, np.maximum(h / correction, 0.0))
    p = np.where(constant, 1.0, sp_stats.chi2.sf(h, len(groups) - 1))
    return h, np.clip(p, np.finfo(float).tiny, 1.0)


def kruskal_wallis_exact(groups: Sequence[Sequence[float]], max_splits: int = 200000) -> TestResult:
    """Two-group permutation p-value over every split of the pooled data"""
    arrays = _check_groups(groups)
    if len(arrays) != 2:
        raise DataError("exact Kruskal-Wallis supports two groups")
    sizes = tuple(a.size for a in arrays)
    pooled = np.concatenate(arrays)
    n, n1 = pooled.size, sizes[0]
    n_splits = math.comb(n, n1)
    if n_splits > max_splits:
        raise DataError(f"{n_splits} splits exceed the limit of {max_splits}")
    if np.all(pooled == pooled[0]):
        return TestResult(0.0, 1.0, sizes)

    ranks = sp_stats.rankdata(pooled)
    observed = kruskal_wallis(arrays).statistic
    total = ranks.sum()
    first = np.array(list(combinations(range(n), n1)))
    r1 = ranks[first].sum(axis=1)
    raw = 12.0 / (n * (n + 1)) * (r1 ** 2 / n1 + (total - r1) ** 2 / (n - n1)) - 3.0 * (n + 1)
    tie_counts = np.unique(pooled, return_counts=True)[1].astype(float)
    h = raw / (1.0 - np.sum(tie_counts ** 3 - tie_counts) / (n ** 3 - n))
    p = np.mean(h >= observed - 1e-9)
    return TestResult(observed, float(p), sizes)


def rank_features(fm: FeatureMatrix, class_label: str = 'condition') -> List[RankedFeature]:
    """Features by ascending Kruskal-Wallis p between the two classes

    Ties in p are broken by the descriptor string.
    """
    labels = fm.labels[class_label].to_numpy()
    classes = np.unique(labels)
    if len(classes) != 2:
        raise DataError(f"ranking needs exactly 2 classes under {class_label!r}, found {list(classes)}")
    h, p = kruskal_wallis_columns(fm.values, labels)
    ranked = [RankedFeature(d, float(pv), float(hv)) for d, pv, hv in zip(fm.descriptor_strings, p, h)]
    return sorted(ranked, key=lambda r: (r.p_value, r.descriptor))


def bonferroni_threshold(alpha: float, m: int) -> float:
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if m < 1:
        raise ConfigError(f"number of comparisons must be >= 1, got {m}")
    return alpha / m


def comparison_thresholds(n: int, levels: Iterable[float] = (0.05, 0.01)) -> Dict[float, float]:
    """Bonferroni levels for n comparisons, keyed by the uncorrected level"""
    return {level: bonferroni_threshold(level, n) for level in levels}


def significant_feature_counts(ranking: Sequence[RankedFeature], threshold: float,
                               channel_names: Sequence[str]) -> Dict:
    """Per-electrode counts of features with p below threshold

    Band-power features count for their channel, PDC features for both the
    source and the sink. Returned per kind and band, plus a total.
    """
    counts = {'bandpower': defaultdict(lambda: dict.fromkeys(channel_names, 0)),
              'pdc': defaultdict(lambda: dict.fromkeys(channel_names, 0))}
    total = dict.fromkeys(channel_names, 0)
    for item in ranking:
        if item.p_value >= threshold:
            continue
        descriptor = FeatureDescriptor.parse(item.descriptor)
        for channel in set(descriptor.channels):
            if channel not in total:
                continue
            counts[descriptor.kind][descriptor.band][channel] += 1
            total[channel] += 1
    return {
        'bandpower': {band: dict(c) for band, c in sorted(counts['bandpower'].items())},
        'pdc': {band: dict(c) for band, c in sorted(counts['pdc'].items())},
        'total': total,
    }


# -- behavioral metrics --------------------------------------------------

def response_accuracy(rec: BehavioralRecord) -> float:
    if rec.n_submitted < 1:
        raise DataError(f"{rec.subject}/{rec.condition}/{rec.task}: no submitted responses")
    return rec.n_correct / rec.n_submitted


def inverse_efficiency_score(rt: float, pe: float) -> float:
    """IES = RT / (1 - PE)"""
    if not 0 <= pe < 1:
        raise DataError(f"proportion of errors must be in [0, 1), got {pe}")
    if not rt > 0:
        raise DataError(f"response time must be positive, got {rt}")
    return rt / (1.0 - pe)


def behavior_metric(rec: BehavioralRecord, metric: str) -> float:
    if metric == 'accuracy':
        return response_accuracy(rec)
    if metric == 'n_correct':
        return float(rec.n_correct)
    if metric == 'ies':
        return inverse_efficiency_score(rec.duration_s, 1.0 - response_accuracy(rec))
    if metric == 'duration':
        return rec.duration_s
    raise ConfigError(f"unknown behavioral metric {metric!r}; expected one of {BEHAVIOR_METRICS}")


def compare_conditions(records: Sequence[BehavioralRecord], metric: str,
                       conditions: Optional[Sequence[str]] = None) -> Dict[str, TestResult]:
    """One Kruskal-Wallis test across conditions per task"""
    by_task = defaultdict(lambda: defaultdict(list))
    for rec in records:
        by_task[rec.task][rec.condition].append(behavior_metric(rec, metric))
    if not by_task:
        raise DataError("no behavioral records to compare")

    results = {}
    for task in sorted(by_task):
        groups = by_task[task]
        wanted = list(conditions) if conditions is not None else sorted(groups)
        missing = [c for c in wanted if c not in groups]
        if missing:
            raise DataError(f"task {task}: no {metric} data for condition(s) {missing}")
        if len(wanted) < 2:
            raise DataError(f"task {task}: need >= 2 conditions, found {wanted}")
        results[task] = kruskal_wallis([groups[c] for c in wanted])
    return results


def behavior_report(records: Sequence[BehavioralRecord], alpha: float = 0.05,
                    strict_alpha: float = 0.01,
                    metrics: Sequence[str] = BEHAVIOR_METRICS) -> List[Dict]:
    """Every (task, metric) test with raw p and both significance flags

    The Bonferroni level is alpha divided by the number of tests reported.
    """
    per_metric = {metric: compare_conditions(records, metric) for metric in metrics}
    n_tests = sum(len(r) for r in per_metric.values())
    corrected = bonferroni_threshold(alpha, n_tests)
    rows = []
    for metric in metrics:
        for task, result in per_metric[metric].items():
            rows.append({
                'task': task,
                'metric': metric,
                **result.to_dict(),
                f'p_below_{strict_alpha:g}': result.p_value < strict_alpha,
                'bonferroni_threshold': corrected,
                'significant_bonferroni': result.p_value < corrected,
            })
    logger.info("behavior: %d tests, %d below %.4g", n_tests,
                sum(r['significant_bonferroni'] for r in rows), corrected)
    return rows


def load_behavioral_csv(path: str) -> List[BehavioralRecord]:
    """Records from a CSV with header subject,condition,task,n_correct,n_submitted,duration_s"""
    if not os.path.exists(path):
        raise DataError(f"behavioral CSV not found: {path}")
    frame = pd.read_csv(path, dtype={'subject': str, 'condition': str, 'task': str})
    missing = [c for c in BEHAVIOR_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path} lacks column(s) {missing}")
    return [
        BehavioralRecord(
            subject=row.subject, condition=row.condition, task=row.task,
            n_correct=int(row.n_correct), n_submitted=int(row.n_submitted),
            duration_s=float(row.duration_s),
        )
        for row in frame[BEHAVIOR_COLUMNS].itertuples(index=False)
    ]
