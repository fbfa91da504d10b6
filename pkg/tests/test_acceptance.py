"""Protocol constants plus seed-averaged recovery checks (the latter marked slow)"""
import json

import numpy as np
import pytest
from scipy import optimize

from eegpipe.config import FeaturesConfig, PipelineConfig
from eegpipe.connectivity import fit_mvar, pdc, select_order_sbc
from eegpipe.ml import KernelSVM, loso_evaluate
from eegpipe.pipeline import SubjectSource, evaluate_comparison, extract_features
from eegpipe.signal_io import standard_montage
from eegpipe.spectral import multitaper_psd
from eegpipe.stats import bonferroni_threshold
from eegpipe.synthgen import gen_var_process


def test_default_feature_counts():
    features = FeaturesConfig()
    montage = standard_montage('easycap57')
    n_bandpower = len(montage.channel_names) * len(features.bands)
    n_pdc = len(features.pdc_subset) ** 2 * len(features.bands)
    assert (n_bandpower, n_pdc) == (285, 3920)
    assert all(name in montage for name in features.pdc_subset)
    assert bonferroni_threshold(0.01, n_bandpower + n_pdc) == pytest.approx(2.378e-6, rel=1e-3)


@pytest.mark.slow
def test_loso_trains_on_every_other_subject(make_features):
    fm = make_features(n_subjects=23, per_cell=40, n_features=4, shift=1.0)
    report = loso_evaluate(fm, ranking=fm.descriptor_strings[:2], n_features=2, n_jobs=1)
    assert len(report.iterations) == 23
    for it in report.iterations:
        assert it.n_train == {'Neutral': 880, 'Wide': 880}
        assert it.n_test == {'Neutral': 40, 'Wide': 40}


@pytest.mark.slow
def test_pdc_finds_planted_edges():
    # sink <- source
    edges = {(1, 0), (3, 2), (4, 1)}
    coefficients = 0.5 * np.eye(5)
    for sink, source in edges:
        coefficients[sink, source] = 0.4
    freqs = np.linspace(1.0, 40.0, 64)
    hits = 0
    for seed in range(100):
        data = gen_var_process(coefficients[np.newaxis], np.eye(5), 5000, seed=seed)
        strength = pdc(fit_mvar(data, 1, fs=128.0), freqs).values.mean(axis=2)
        np.fill_diagonal(strength, -np.inf)
        top = np.argsort(strength, axis=None)[::-1][:3]
        hits += {tuple(int(v) for v in np.unravel_index(k, strength.shape)) for k in top} == edges
    assert hits >= 95


@pytest.mark.slow
def test_sbc_recovers_order_three():
    coefficients = np.zeros((3, 2, 2))
    coefficients[0] = [[0.4, 0.0], [0.2, 0.3]]
    coefficients[2] = [[0.3, 0.0], [0.0, 0.3]]
    hits = sum(
        select_order_sbc(gen_var_process(coefficients, np.eye(2), 5000, seed=seed), 10)[0] == 3
        for seed in range(100)
    )
    assert hits >= 90


@pytest.mark.slow
def test_multitaper_power_and_ar2_shape():
    fs, n = 128.0, 16384
    a1, a2 = 0.5, -0.3
    average = 0.0
    for seed in range(50):
        white = np.random.default_rng(seed).standard_normal(n)
        assert multitaper_psd(white, fs).total_power() == pytest.approx(np.mean(white ** 2), rel=0.05)
        x = gen_var_process(np.array([[[a1]], [[a2]]]), np.eye(1), n, seed=seed)[:, 0]
        spectrum = multitaper_psd(x, fs)
        average = average + spectrum.psd / 50

    freqs = spectrum.freqs
    z = np.exp(-2j * np.pi * freqs / fs)
    analytic = 2.0 / (fs * np.abs(1 - a1 * z - a2 * z ** 2) ** 2)
    band = (freqs >= 1.0) & (freqs <= 40.0)
    relative = average[band] / analytic[band] - 1.0
    assert np.sqrt(np.mean(relative ** 2)) < 0.1


def _dual_objective(alpha, q):
    return 0.5 * alpha @ q @ alpha - alpha.sum()


@pytest.mark.slow
def test_smo_matches_brute_force_qp():
    rng = np.random.default_rng(0)
    for n in (4, 6, 8) * 10:
        X = rng.standard_normal((n, 2))
        y = np.array(['a', 'b'] * (n // 2))
        model = KernelSVM(C=1.0, tol=1e-8).fit(X, y)
        signs = np.where(y == model.classes_[1], 1.0, -1.0)
        q = np.outer(signs, signs) * model._kernel(X, X)
        brute = optimize.minimize(
            _dual_objective, np.zeros(n), args=(q,), method='SLSQP', bounds=[(0.0, 1.0)] * n,
            constraints=[{'type': 'eq', 'fun': lambda a: a @ signs}],
            options={'ftol': 1e-14, 'maxiter': 1000},
        )
        assert _dual_objective(model.alpha_, q) == pytest.approx(brute.fun, abs=1e-4)


@pytest.mark.slow
def test_kkt_on_separable_fixtures():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X = np.vstack([rng.normal(-2.0, 0.5, (20, 3)), rng.normal(2.0, 0.5, (20, 3))])
        y = np.repeat(['left', 'right'], 20)
        model = KernelSVM().fit(X, y)
        assert model.kkt_gap_ < 1e-3
        assert np.mean(model.predict(X) == y) == 1.0


OCCIPITAL = ['O1', 'Oz', 'O2', 'PO3', 'POz', 'PO4']
NEGATIVE_CONTROL_SEEDS = range(10)


def _control_comparison(tmp_path, seed, effect_size):
    """Synthetic 23-subject study through features, LOSO and the scrambled baseline"""
    spec = {
        'seed': seed,
        'n_subjects': 23,
        'fs': 128.0,
        'montage': 'easycap57',
        'conditions': ['Neutral', 'Two-Windows'],
        'tasks': ['Arithmetic'],
        'segment_s': 82.0,
        'baseline_s': 60.0,
        'closed_rest_s': 0.0,
        'jitter': 0.2,
        'emit_behavior': False,
        'effects': [] if effect_size is None else [
            {'kind': 'bandpower', 'channels': OCCIPITAL, 'band': 'alpha',
             'effect_size': effect_size, 'condition': 'Two-Windows'},
        ],
    }
    path = tmp_path / f"spec_{seed}.json"
    path.write_text(json.dumps(spec))
    config = PipelineConfig.from_dict({
        'seed': seed,
        'output_dir': str(tmp_path / 'run'),
        'input': {'synth_spec': str(path), 'montage': 'easycap57'},
        'preprocess': {'enabled': False},
        'features': {'span_s': 82.0, 'pdc': False},
        'ml': {'n_per_class': 40, 'n_features': 180, 'inner_cv': False, 'sweep': False},
    })
    feature_set = extract_features(SubjectSource.from_config(config), config)
    return evaluate_comparison(feature_set.features, config, 'Arithmetic', 'Two-Windows', 0, 1,
                               feature_set.scalp_names)


@pytest.mark.slow
def test_planted_alpha_beats_the_scrambled_baseline(tmp_path):
    result = _control_comparison(tmp_path, 23, 0.5)
    report = result.report
    assert {it.subject for it in report.iterations} == {f"S{i:02d}" for i in range(1, 24)}
    assert all(it.n_train == {'Neutral': 880, 'Two-Windows': 880} for it in report.iterations)
    assert report.median_accuracy >= 0.60
    assert np.median(report.baseline_accuracies) == pytest.approx(0.5, abs=0.03)
    assert report.comparison['p'] < 0.003


@pytest.mark.slow
def test_no_planted_effect_stays_at_chance(tmp_path):
    significant = sum(
        _control_comparison(tmp_path, seed, None).report.comparison['p'] < 0.003
        for seed in NEGATIVE_CONTROL_SEEDS
    )
    assert significant <= len(NEGATIVE_CONTROL_SEEDS) // 10
