"""
Classification and evaluation protocol
Polynomial-kernel SVM trained by SMO, class balancing, stratified k-fold
CV, leave-one-subject-out evaluation with per-fold feature ranking,
within-subject scrambled-label baselines and the feature-count sweep.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import auc, confusion_matrix, roc_curve
from sklearn.metrics.pairwise import pairwise_kernels
from sklearn.model_selection import StratifiedKFold
from sklearn.utils.validation import check_is_fitted

from eegpipe.config import Config
from eegpipe.errors import ConfigError, DataError, NumericError
from eegpipe.models import FeatureMatrix
from eegpipe.seeding import STREAM_SCRAMBLE, derive_rng, derive_seed
from eegpipe.stats import RankedFeature, kruskal_wallis, rank_features

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_SCHEDULE = (1, 2, 5, 10, 20, 40, 60, 80, 100, 140, 180, 220, 260, 300, 350, 400)
TAU = 1e-12

Ranking = Union[None, Sequence[Union[str, RankedFeature]], Mapping[str, Sequence[str]]]


@dataclass(frozen=True)
class SvmConfig:
    kernel: str = 'poly'
    degree: int = 2
    coef0: float = 1.0
    C: float = 1.0
    tol: float = 1e-3
    max_iter: int = 200000

    def __post_init__(self):
        if self.kernel != 'poly':
            raise ConfigError(f"only the polynomial kernel is supported, got {self.kernel!r}")
        if self.degree < 1:
            raise ConfigError(f"kernel degree must be >= 1, got {self.degree}")
        if self.C <= 0:
            raise ConfigError(f"box constraint C must be positive, got {self.C}")

    @classmethod
    def from_ml_config(cls, ml) -> 'SvmConfig':
        return cls(degree=ml.degree, coef0=ml.coef0, C=ml.C, tol=ml.tol, max_iter=ml.max_iter)

    def estimator(self) -> 'KernelSVM':
        return KernelSVM(C=self.C, degree=self.degree, coef0=self.coef0, tol=self.tol, max_iter=self.max_iter)


def _smo(kernel: np.ndarray, y: np.ndarray, C: float, tol: float,
         max_iter: int) -> Tuple[np.ndarray, float, int, float]:
    """Dual soft-margin SVM by SMO with maximal-violating-pair selection

    Returns multipliers, rho (decision = sum a_i y_i K(x_i, x) - rho),
    iterations used and the final KKT gap.
    """
    n = len(y)
    q = np.outer(y, y) * kernel
    q_diag = np.diag(q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    positive = y > 0

    for iteration in range(max_iter):
        up = np.where(positive, alpha < C, alpha > 0)
        low = np.where(positive, alpha > 0, alpha < C)
        score = -y * grad
        up_idx, low_idx = np.flatnonzero(up), np.flatnonzero(low)
        i = up_idx[np.argmax(score[up_idx])]
        j = low_idx[np.argmin(score[low_idx])]
        gap = score[i] - score[j]
        if gap < tol:
            break

        old_i, old_j = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = q_diag[i] + q_diag[j] + 2 * q[i, j]
            delta = (-grad[i] - grad[j]) / (quad if quad > 0 else TAU)
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            quad = q_diag[i] + q_diag[j] - 2 * q[i, j]
            delta = (grad[i] - grad[j]) / (quad if quad > 0 else TAU)
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total

        grad += q[:, i] * (alpha[i] - old_i) + q[:, j] * (alpha[j] - old_j)
    else:
        raise NumericError(f"SMO did not converge in {max_iter} iterations (KKT gap {gap:.3g})")

    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(np.mean(yg[free]))
    else:
        at_upper = alpha >= C
        ub_mask = np.where(at_upper, ~positive, positive)
        lb_mask = ~ub_mask
        ub = yg[ub_mask].min(initial=np.inf)
        lb = yg[lb_mask].max(initial=-np.inf)
        rho = float((ub + lb) / 2)
    return alpha, rho, iteration, float(gap)


class KernelSVM(ClassifierMixin, BaseEstimator):
    """Two-class SVM with kernel (u.v + coef0)^degree

    classes_[0] maps to -1 and classes_[1] to +1; a decision value of
    exactly 0 predicts classes_[1].
    """

    def __init__(self, C: float = 1.0, degree: int = 2, coef0: float = 1.0,
                 tol: float = 1e-3, max_iter: int = 200000):
        self.C = C
        self.degree = degree
        self.coef0 = coef0
        self.tol = tol
        self.max_iter = max_iter

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return pairwise_kernels(a, b, metric='poly', degree=self.degree, gamma=1.0, coef0=self.coef0)

    def fit(self, X, y) -> 'KernelSVM':
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        if X.ndim != 2 or len(X) != len(y):
            raise DataError(f"need X [n x d] and n labels, got {X.shape} and {y.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("training features contain non-finite values")
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise DataError(f"SVM training needs exactly 2 classes, got {list(self.classes_)}")
        signs = np.where(y == self.classes_[1], 1.0, -1.0)

        # solved in a canonical row order; the fit must not depend on input order
        order = np.lexsort((signs,) + tuple(X.T[::-1]))
        X_sorted, signs_sorted = X[order], signs[order]
        solved, rho, n_iter, gap = _smo(self._kernel(X_sorted, X_sorted), signs_sorted,
                                        self.C, self.tol, self.max_iter)
        support = np.flatnonzero(solved > 0)
        alpha = np.empty_like(solved)
        alpha[order] = solved
        self.alpha_ = alpha
        self.support_ = order[support]
        self.support_vectors_ = X_sorted[support]
        self.dual_coef_ = solved[support] * signs_sorted[support]
        self.intercept_ = -rho
        self.n_iter_ = n_iter
        self.kkt_gap_ = gap
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, 'support_vectors_')
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got shape {X.shape}")
        return self._kernel(X, self.support_vectors_) @ self.dual_coef_ + self.intercept_

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, self.classes_[1], self.classes_[0])


def train_ksvm(X, y, cfg: SvmConfig = SvmConfig()) -> KernelSVM:
    return cfg.estimator().fit(X, y)


def predict(model: KernelSVM, X) -> Tuple[np.ndarray, np.ndarray]:
    """(labels, decision values)"""
    decisions = model.decision_function(X)
    return np.where(decisions >= 0, model.classes_[1], model.classes_[0]), decisions


# -- evaluation records --------------------------------------------------

@dataclass(frozen=True, eq=False)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    confusion: np.ndarray

    @property
    def confusion_pct(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1, keepdims=True)
        return 100.0 * self.confusion / np.where(rows == 0, 1, rows)

    def to_dict(self) -> Dict:
        return {
            'fpr': [float(v) for v in self.fpr],
            'tpr': [float(v) for v in self.tpr],
            'auc': self.auc,
            'confusion': self.confusion.tolist(),
            'confusion_pct': [[float(v) for v in row] for row in self.confusion_pct],
        }


@dataclass(frozen=True)
class CvResult:
    mean_accuracy: float
    fold_accuracies: Tuple[float, ...]
    fold_sizes: Tuple[int, ...]


@dataclass
class IterationResult:
    subject: str
    accuracy: float
    n_train: Dict[str, int]
    n_test: Dict[str, int]
    n_features: int
    roc: RocResult
    inner_cv_accuracy: Optional[float] = None
    top_features: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'subject': self.subject,
            'accuracy': self.accuracy,
            'n_train': self.n_train,
            'n_test': self.n_test,
            'n_features': self.n_features,
            'inner_cv_accuracy': self.inner_cv_accuracy,
            'top_features': self.top_features,
            **self.roc.to_dict(),
        }


@dataclass
class EvaluationReport:
    """Leave-one-subject-out outcome, one iteration per held-out subject"""
    classes: Tuple[str, str]
    n_features: int
    seed: int
    iterations: List[IterationResult]
    baseline_accuracies: Optional[List[float]] = None
    comparison: Optional[Dict] = None
    config: Dict = field(default_factory=dict)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([it.accuracy for it in self.iterations])

    @property
    def median_accuracy(self) -> float:
        return float(np.median(self.accuracies))

    def to_dict(self) -> Dict:
        baseline = self.baseline_accuracies
        return {
            'classes': list(self.classes),
            'n_features': self.n_features,
            'seed': self.seed,
            'accuracies': [float(a) for a in self.accuracies],
            'median_accuracy': self.median_accuracy,
            'baseline_accuracies': baseline,
            'baseline_median': None if baseline is None else float(np.median(baseline)),
            'comparison': self.comparison,
            'iterations': [it.to_dict() for it in self.iterations],
            'config': self.config,
        }


# -- protocol ------------------------------------------------------------

def roc_and_confusion(decisions, truth) -> RocResult:
    """ROC over every distinct decision value, trapezoid AUC, confusion at 0"""
    decisions = np.asarray(decisions, dtype=float)
    truth = np.asarray(truth).astype(int)
    if decisions.shape != truth.shape:
        raise DataError("decisions and truth differ in length")
    if len(np.unique(truth)) != 2:
        raise DataError("ROC needs both classes in the truth labels")
    fpr, tpr, _ = roc_curve(truth, decisions, drop_intermediate=False)
    predicted = (decisions >= 0).astype(int)
    return RocResult(fpr=fpr, tpr=tpr, auc=float(auc(fpr, tpr)),
                     confusion=confusion_matrix(truth, predicted, labels=[0, 1]))


def balance_classes(fm: FeatureMatrix, n_per_class: int = 40, seed: int = 0,
                    class_label: str = 'condition', with_replacement: bool = False) -> FeatureMatrix:
    """n_per_class rows from every (subject, class) cell

    Cells are sampled without replacement; a short cell is an error unless
    with_replacement is set, in which case that cell is resampled.
    """
    rng = np.random.default_rng(seed)
    subjects = fm.labels['subject'].to_numpy()
    classes = fm.labels[class_label].to_numpy()
    chosen = []
    for subject in sorted(set(subjects)):
        for cls in sorted(set(classes)):
            rows = np.flatnonzero((subjects == subject) & (classes == cls))
            if len(rows) == 0:
                raise DataError(f"subject {subject} has no rows of class {cls}")
            short = len(rows) < n_per_class
            if short and not with_replacement:
                raise DataError(
                    f"cell subject={subject} {class_label}={cls} has {len(rows)} rows, "
                    f"fewer than n_per_class={n_per_class}"
                )
            chosen.append(np.sort(rng.choice(rows, size=n_per_class, replace=short)))
    return fm.select_rows(np.concatenate(chosen))


def kfold_cv(X, y, k: int = 5, cfg: SvmConfig = SvmConfig(), seed: int = 0) -> CvResult:
    """Stratified k-fold accuracy, folds fixed by seed"""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    _, counts = np.unique(y, return_counts=True)
    if len(counts) != 2:
        raise DataError(f"cross-validation needs 2 classes, got {len(counts)}")
    if counts.min() < k:
        raise DataError(f"smallest class has {counts.min()} rows, cannot stratify into {k} folds")
    folds = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed % (2 ** 32))
    accuracies, sizes = [], []
    for train, test in folds.split(X, y):
        model = cfg.estimator().fit(X[train], y[train])
        accuracies.append(float(np.mean(model.predict(X[test]) == y[test])))
        sizes.append(len(test))
    return CvResult(float(np.mean(accuracies)), tuple(accuracies), tuple(sizes))


def _descriptors(items: Sequence[Union[str, RankedFeature]]) -> List[str]:
    return [item.descriptor if isinstance(item, RankedFeature) else str(item) for item in items]


def fold_rankings(fm: FeatureMatrix, class_label: str = 'condition',
                  n_jobs: Optional[int] = None) -> Dict[str, List[str]]:
    """Per held-out subject, the ranking computed on all other subjects"""
    subjects = sorted(fm.labels['subject'].unique())
    all_subjects = fm.labels['subject'].to_numpy()
    ranked = Parallel(n_jobs=n_jobs or Config.N_JOBS)(
        delayed(rank_features)(fm.select_rows(all_subjects != s), class_label) for s in subjects
    )
    return {s: _descriptors(r) for s, r in zip(subjects, ranked)}


def _check_protocol(fm: FeatureMatrix, class_label: str) -> Tuple[List[str], Tuple[str, str]]:
    subjects = sorted(fm.labels['subject'].unique())
    classes = sorted(fm.labels[class_label].unique())
    if len(classes) != 2:
        raise DataError(f"evaluation needs exactly 2 classes under {class_label!r}, found {classes}")
    if len(subjects) < 3:
        raise DataError(f"leave-one-subject-out needs >= 3 subjects, found {len(subjects)}")
    present = fm.labels.groupby('subject')[class_label].nunique()
    lacking = sorted(present[present < 2].index)
    if lacking:
        raise DataError(f"subject(s) {lacking} lack one of the classes {classes}")
    return subjects, (classes[0], classes[1])


def _loso_iteration(fm: FeatureMatrix, subject: str, index: int, features: Optional[List[str]],
                    n_features: int, cfg: SvmConfig, classes: Tuple[str, str], class_label: str,
                    seed: int, inner_cv: bool, k_folds: int) -> IterationResult:
    held_out = fm.labels['subject'].to_numpy() == subject
    train, test = fm.select_rows(~held_out), fm.select_rows(held_out)
    if features is None:
        features = _descriptors(rank_features(train, class_label))
    selected = features[:n_features]
    X_train = train.select_columns(selected).values
    X_test = test.select_columns(selected).values
    y_train = train.labels[class_label].to_numpy()
    y_test = test.labels[class_label].to_numpy()

    model = cfg.estimator().fit(X_train, y_train)
    labels, decisions = predict(model, X_test)
    inner = None
    if inner_cv:
        inner = kfold_cv(X_train, y_train, k_folds, cfg, derive_seed(seed, index)).mean_accuracy
    result = IterationResult(
        subject=subject,
        accuracy=float(np.mean(labels == y_test)),
        n_train={c: int(np.sum(y_train == c)) for c in classes},
        n_test={c: int(np.sum(y_test == c)) for c in classes},
        n_features=len(selected),
        roc=roc_and_confusion(decisions, y_test == classes[1]),
        inner_cv_accuracy=inner,
        top_features=list(selected[:10]),
    )
    logger.debug("LOSO %s: accuracy %.3f with %d features", subject, result.accuracy, len(selected))
    return result


def loso_evaluate(fm: FeatureMatrix, cfg: SvmConfig = SvmConfig(), ranking: Ranking = None,
                  n_features: int = 180, seed: int = 0, *, class_label: str = 'condition',
                  inner_cv: bool = False, k_folds: int = 5,
                  n_jobs: Optional[int] = None) -> EvaluationReport:
    """Hold out each subject once; train on the rest, test on it

    ranking=None ranks features on the training subjects of every fold; a
    sequence is used as a fixed ranking; a mapping gives the ranking per
    held-out subject.
    """
    subjects, classes = _check_protocol(fm, class_label)
    if n_features < 1:
        raise DataError(f"n_features must be >= 1, got {n_features}")

    def features_for(subject: str) -> Optional[List[str]]:
        if ranking is None:
            return None
        if isinstance(ranking, Mapping):
            return list(ranking[subject])
        return _descriptors(ranking)

    iterations = Parallel(n_jobs=n_jobs or Config.N_JOBS)(
        delayed(_loso_iteration)(fm, s, i, features_for(s), n_features, cfg, classes,
                                 class_label, seed, inner_cv, k_folds)
        for i, s in enumerate(subjects)
    )
    report = EvaluationReport(classes=classes, n_features=n_features, seed=seed, iterations=list(iterations))
    logger.info("LOSO %s vs %s: median accuracy %.3f over %d subjects (%d features)",
                classes[0], classes[1], report.median_accuracy, len(subjects), n_features)
    return report


def scramble_labels(fm: FeatureMatrix, seed: int, class_label: str = 'condition') -> FeatureMatrix:
    """Permute class labels within each subject"""
    rng = derive_rng(seed, STREAM_SCRAMBLE)
    labels = fm.labels.copy()
    values = labels[class_label].to_numpy().copy()
    subjects = labels['subject'].to_numpy()
    for subject in sorted(set(subjects)):
        rows = np.flatnonzero(subjects == subject)
        values[rows] = values[rows][rng.permutation(len(rows))]
    labels[class_label] = values
    return fm.with_labels(labels)


def scrambled_baseline(fm: FeatureMatrix, cfg: SvmConfig = SvmConfig(), n_features: int = 180,
                       seed: int = 0, **kwargs) -> EvaluationReport:
    """Full LOSO procedure, ranking included, on within-subject scrambled labels"""
    return loso_evaluate(scramble_labels(fm, seed, kwargs.get('class_label', 'condition')),
                         cfg, None, n_features, seed, **kwargs)


def _flag(level: float) -> str:
    return 'significant_' + f"{level:g}".replace('0.', '')


def compare_to_baseline(real: Sequence[float], baseline: Sequence[float],
                        thresholds: Mapping[float, float]) -> Dict:
    """Kruskal-Wallis real vs scrambled accuracies with one flag per level"""
    result = kruskal_wallis([list(real), list(baseline)])
    out = {'H': result.statistic, 'p': result.p_value}
    for level, threshold in sorted(thresholds.items(), reverse=True):
        out[_flag(level)] = bool(result.p_value < threshold)
    return out


def sweep_counts(limit: int, schedule: Optional[Sequence[int]] = None) -> List[int]:
    """Schedule entries up to limit, ending at limit"""
    counts = sorted({c for c in (schedule or DEFAULT_SWEEP_SCHEDULE) if 1 <= c <= limit})
    if not counts or counts[-1] != limit:
        counts.append(limit)
    return counts


@dataclass(frozen=True)
class SweepPoint:
    n_features: int
    median: float
    q1: float
    q3: float
    baseline_median: float
    baseline_q1: float
    baseline_q3: float
    comparison: Dict

    def to_dict(self) -> Dict:
        return {
            'n_features': self.n_features,
            'median': self.median, 'q1': self.q1, 'q3': self.q3,
            'baseline_median': self.baseline_median,
            'baseline_q1': self.baseline_q1, 'baseline_q3': self.baseline_q3,
            **self.comparison,
        }


@dataclass
class SweepResult:
    points: List[SweepPoint]
    name: str = ''

    @property
    def counts(self) -> List[int]:
        return [p.n_features for p in self.points]

    @property
    def best_count(self) -> int:
        """Count with the smallest real-vs-scrambled p (ties: fewer features)"""
        return min(self.points, key=lambda p: (p.comparison['p'], p.n_features)).n_features

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([p.to_dict() for p in self.points])
        if self.name:
            frame.insert(0, 'comparison', self.name)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, name: str = '') -> 'SweepResult':
        """Inverse of to_frame for one comparison"""
        if name and 'comparison' in frame.columns:
            frame = frame[frame['comparison'] == name]
        if frame.empty:
            raise DataError(f"no sweep rows{' for ' + name if name else ''}")
        stat_columns = ['H', 'p'] + sorted(c for c in frame.columns if c.startswith('significant_'))
        points = [
            SweepPoint(
                int(row['n_features']), float(row['median']), float(row['q1']), float(row['q3']),
                float(row['baseline_median']), float(row['baseline_q1']), float(row['baseline_q3']),
                {c: (bool(row[c]) if c.startswith('significant_') else float(row[c])) for c in stat_columns},
            )
            for _, row in frame.sort_values('n_features').iterrows()
        ]
        return cls(points, name)


def _quartiles(values: np.ndarray) -> Tuple[float, float, float]:
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return float(median), float(q1), float(q3)


def feature_sweep(fm: FeatureMatrix, cfg: SvmConfig = SvmConfig(), ranking: Ranking = None,
                  max_features: int = 400, seed: int = 0, *, schedule: Optional[Sequence[int]] = None,
                  thresholds: Optional[Mapping[float, float]] = None, class_label: str = 'condition',
                  name: str = '', n_jobs: Optional[int] = None) -> SweepResult:
    """LOSO accuracy and scrambled comparison at increasing feature counts"""
    if ranking is not None and len(ranking) == 0:
        raise DataError("feature sweep needs a non-empty ranking")
    available = fm.n_features if ranking is None or isinstance(ranking, Mapping) else len(ranking)
    counts = sweep_counts(min(max_features, available), schedule)
    thresholds = thresholds or {0.05: 0.05, 0.01: 0.01}

    real_ranking = fold_rankings(fm, class_label, n_jobs) if ranking is None else ranking
    scrambled = scramble_labels(fm, seed, class_label)
    scrambled_ranking = fold_rankings(scrambled, class_label, n_jobs)

    points = []
    for count in counts:
        real = loso_evaluate(fm, cfg, real_ranking, count, seed, class_label=class_label, n_jobs=n_jobs)
        base = loso_evaluate(scrambled, cfg, scrambled_ranking, count, seed,
                             class_label=class_label, n_jobs=n_jobs)
        median, q1, q3 = _quartiles(real.accuracies)
        b_median, b_q1, b_q3 = _quartiles(base.accuracies)
        points.append(SweepPoint(count, median, q1, q3, b_median, b_q1, b_q3,
                                 compare_to_baseline(real.accuracies, base.accuracies, thresholds)))
    return SweepResult(points, name)


def best_feature_count(sweeps: Sequence[SweepResult], level: float = 0.05) -> Tuple[int, int]:
    """(count, n significant) maximizing significant comparisons across sweeps"""
    if not sweeps:
        raise DataError("no sweeps to summarize")
    flag = _flag(level)
    tally: Dict[int, int] = {}
    for sweep in sweeps:
        for point in sweep.points:
            tally[point.n_features] = tally.get(point.n_features, 0) + int(point.comparison.get(flag, False))
    count = min(tally, key=lambda c: (-tally[c], c))
    return count, tally[count]
