import dataclasses

import numpy as np
import pytest

from eegpipe.config import PreprocessConfig
from eegpipe.errors import DataError
from eegpipe.models import Annotation, Recording
from eegpipe.preprocess import (
    apply_filter_zero_phase, asr_calibrate, asr_clean, asr_repair, common_average_reference,
    design_bandpass_fir, detect_bad_channels, find_bad_channels, fir_filter, interpolate_channels,
    preprocess_recording, regress_out_eog, spline_interpolation_matrix,
)
from eegpipe.signal_io import standard_montage


def test_bandpass_kernel_shape_and_response():
    kernel = design_bandpass_fir(0.5, 50.0, 250.0, 0.5)
    assert kernel.length == 1651
    assert np.array_equal(kernel.taps, kernel.taps[::-1])
    assert abs(kernel.taps.sum()) < 1e-12
    gain = np.abs(kernel.frequency_response(np.array([10.0, 30.0, 60.0, 100.0])))
    assert gain[0] == pytest.approx(1.0, abs=0.01)
    assert gain[1] == pytest.approx(1.0, abs=0.01)
    assert gain[2] < 0.01
    assert gain[3] < 0.01


def test_default_bandpass_edges_and_line_noise():
    kernel = design_bandpass_fir(0.5, 50.0, 500.0, 0.5)

    def db(*freqs):
        return 20 * np.log10(np.abs(kernel.frequency_response(np.array(freqs))))

    assert db(60.0)[0] <= -40.0
    # -6 dB points lie within 0.25 Hz of each band edge
    below_low, above_low = db(0.25, 0.75)
    below_high, above_high = db(49.75, 50.25)
    assert below_low < -6.0 < above_low
    assert below_high > -6.0 > above_high


@pytest.mark.parametrize('low, high', [(0.0, 40.0), (10.0, 5.0), (1.0, 64.0)])
def test_bandpass_rejects_bad_edges(low, high):
    with pytest.raises(DataError):
        design_bandpass_fir(low, high, 128.0, 1.0)


def test_zero_phase_filter_keeps_in_band_sine_and_drops_offset():
    fs = 128.0
    t = np.arange(int(20 * fs)) / fs
    sine = np.sin(2 * np.pi * 10.0 * t)
    kernel = design_bandpass_fir(1.0, 40.0, fs, 2.0)
    out = fir_filter((sine + 3.0)[:, None], kernel.taps)[:, 0]
    middle = slice(int(5 * fs), int(15 * fs))
    assert out.shape == sine.shape
    assert np.max(np.abs(out[middle] - sine[middle])) < 0.02


def test_kernel_longer_than_recording(make_recording):
    rec = make_recording(seconds=2.0)
    with pytest.raises(DataError, match='shorter'):
        apply_filter_zero_phase(rec, design_bandpass_fir(0.5, 50.0, 128.0, 0.5))


def test_flat_and_noisy_channels_are_found(make_recording):
    rec = make_recording(seconds=40.0)
    samples = np.array(rec.samples)
    samples[:, rec.channel_index('Fz')] = 2e-6
    samples[:, rec.channel_index('Cz')] += 1e-4 * np.random.default_rng(3).standard_normal(rec.n_samples)
    rules = find_bad_channels(rec.with_samples(samples), flat_s=10.0)
    assert 'Fz' in rules['flat']
    assert 'Cz' in rules['noisy']
    assert set(rules) == {'flat', 'noisy', 'uncorrelated'}


@pytest.mark.parametrize('use_montage', [False, True])
def test_uncorrelated_channel_is_found(make_recording, montage, use_montage):
    rec = make_recording(seconds=20.0)
    samples = np.array(rec.samples)
    o2 = rec.channel_index('O2')
    samples[:, o2] = np.std(samples[:, o2]) * np.random.default_rng(4).standard_normal(rec.n_samples)
    rec = rec.with_samples(samples)
    rules = find_bad_channels(rec, montage=montage if use_montage else None)
    assert 'O2' in rules['uncorrelated']
    assert 'O2' in detect_bad_channels(rec, montage=montage if use_montage else None)


def test_spline_matrix_reproduces_constants(montage):
    names = list(montage.channel_names)
    matrix = spline_interpolation_matrix(montage.positions_for(names[:-3]), montage.positions_for(names[-3:]))
    assert matrix.shape == (3, len(names) - 3)
    assert np.allclose(matrix.sum(axis=1), 1.0, atol=1e-8)


def test_spline_estimate_follows_symmetry(montage):
    names = [n for n in montage.channel_names if n != 'Cz']
    matrix = spline_interpolation_matrix(montage.positions_for(names), montage.positions_for(['Cz']))
    # front-back antisymmetric field vanishes at the vertex
    field = montage.positions_for(names)[:, 0]
    assert abs((matrix @ field)[0]) < 1e-6


def test_dipolar_field_is_interpolated_on_the_full_cap():
    cap = standard_montage('easycap57')
    direction = np.array([0.6, 0.48, 0.64])
    missing = ['AFz', 'FC2', 'C3', 'CPz', 'P4']
    present = [n for n in cap.channel_names if n not in missing]
    matrix = spline_interpolation_matrix(cap.positions_for(present), cap.positions_for(missing))
    truth = cap.positions_for(missing) @ direction
    estimate = matrix @ (cap.positions_for(present) @ direction)
    assert np.linalg.norm(estimate - truth) / np.linalg.norm(truth) < 0.1


def test_interpolate_channels_repairs_a_shared_signal(make_recording, montage):
    rec = make_recording(seconds=4.0)
    common = np.sin(np.linspace(0, 20, rec.n_samples)) * 1e-5
    samples = np.array(rec.samples)
    scalp = rec.indices_with_role('scalp')
    samples[:, scalp] = common[:, None]
    samples[:, rec.channel_index('Cz')] = 1.0
    repaired = interpolate_channels(rec.with_samples(samples), montage, ['Cz'])
    assert np.allclose(repaired.samples[:, rec.channel_index('Cz')], common, atol=1e-12)
    assert np.array_equal(repaired.samples[:, rec.channel_index('VEOG')], rec.samples[:, rec.channel_index('VEOG')])


def test_interpolation_needs_four_good_channels(make_recording, montage):
    rec = make_recording(seconds=2.0)
    with pytest.raises(DataError, match='need >= 4'):
        interpolate_channels(rec, montage, list(rec.channels_with_role('scalp'))[:-3])
    with pytest.raises(DataError, match='scalp'):
        interpolate_channels(rec, montage, ['VEOG'])


def test_asr_calibration_needs_thirty_seconds(make_recording):
    with pytest.raises(DataError, match='30 s'):
        asr_calibrate(make_recording(seconds=20.0))


def test_asr_repairs_only_the_burst(make_recording):
    rec = make_recording(seconds=60.0)
    model = asr_calibrate(rec, window_s=0.5)
    samples = np.array(rec.samples)
    scalp = rec.indices_with_role('scalp')
    burst = slice(2560, 2688)
    samples[burst, scalp] += 1e-2 * np.random.default_rng(9).standard_normal((128, len(scalp)))
    noisy = rec.with_samples(samples)

    cleaned, repaired, total = asr_repair(noisy, model, cutoff=20.0)
    assert (repaired, total) == (2, 120)
    assert np.std(cleaned.samples[burst][:, scalp]) < 0.1 * np.std(samples[burst][:, scalp])
    outside = np.ones(rec.n_samples, dtype=bool)
    outside[burst] = False
    assert np.array_equal(cleaned.samples[outside], noisy.samples[outside])
    assert asr_clean(noisy, model, cutoff=20.0) == cleaned

    untouched, repaired, _ = asr_repair(noisy, model, cutoff=float('inf'))
    assert repaired == 0
    assert untouched is noisy


def test_eog_regression_leaves_residuals_orthogonal(make_recording):
    rec = make_recording(seconds=20.0)
    samples = np.array(rec.samples)
    scalp, eog = rec.indices_with_role('scalp'), rec.indices_with_role('eog')
    samples[:, scalp] += 0.5 * samples[:, eog[:1]]
    leaky = rec.with_samples(samples)
    clean = regress_out_eog(leaky)
    residual = clean.samples[:, scalp]
    cross = residual.T @ clean.samples[:, eog]
    assert np.abs(cross).max() < 1e-8 * np.abs(samples[:, scalp].T @ samples[:, eog]).max()


def test_eog_regression_ignores_how_eog_channels_are_mixed(make_recording):
    rec = make_recording(seconds=20.0)
    samples = np.array(rec.samples)
    scalp, eog = rec.indices_with_role('scalp'), rec.indices_with_role('eog')
    samples[:, scalp] += 0.5 * samples[:, eog[:1]] - 0.2 * samples[:, eog[1:]]
    leaky = rec.with_samples(samples)
    remixed = np.array(samples)
    remixed[:, eog] = samples[:, eog] @ np.array([[1.0, 0.4], [-0.7, 2.0]])
    expected = regress_out_eog(leaky).samples[:, scalp]
    actual = regress_out_eog(leaky.with_samples(remixed)).samples[:, scalp]
    np.testing.assert_allclose(actual, expected, rtol=1e-7, atol=1e-16)


def test_eog_regression_needs_eog_channels(make_recording):
    rec = make_recording(seconds=2.0)
    scalp_only = Recording(rec.samples[:, :19], rec.fs, rec.channel_names[:19], rec.channel_roles[:19], 'S01')
    with pytest.raises(DataError, match='EOG'):
        regress_out_eog(scalp_only)


def test_common_average_reference(make_recording):
    rec = make_recording(seconds=2.0)
    out = common_average_reference(rec)
    scalp, eog = rec.indices_with_role('scalp'), rec.indices_with_role('eog')
    assert np.allclose(out.samples[:, scalp].sum(axis=1), 0.0, atol=1e-18)
    assert np.array_equal(out.samples[:, eog], rec.samples[:, eog])


def test_common_average_reference_is_idempotent(make_recording):
    once = common_average_reference(make_recording(seconds=2.0))
    twice = common_average_reference(once)
    np.testing.assert_allclose(twice.samples, once.samples, rtol=0, atol=1e-18)


def test_common_average_reference_commutes_with_channel_order(make_recording):
    rec = make_recording(seconds=2.0)
    perm = np.random.default_rng(2).permutation(rec.n_channels)
    shuffled = Recording(rec.samples[:, perm], rec.fs, [rec.channel_names[i] for i in perm],
                         [rec.channel_roles[i] for i in perm], rec.subject_id)
    np.testing.assert_allclose(common_average_reference(shuffled).samples,
                               common_average_reference(rec).samples[:, perm], rtol=0, atol=1e-18)


def test_full_chain_is_deterministic(make_recording, montage):
    annotations = (Annotation(0.0, 35.0, 'rest_open', 'Rest'), Annotation(35.0, 40.0, 'Neutral', 'Arithmetic'))
    rec = make_recording(seconds=40.0, annotations=annotations)
    cfg = dataclasses.replace(PreprocessConfig(), corr_thr=0.0)

    first, log = preprocess_recording(rec, montage, cfg, 'rest_open', seed=5)
    second, _ = preprocess_recording(rec, montage, cfg, 'rest_open', seed=5)
    assert first == second
    assert first.samples.shape == rec.samples.shape
    assert first.annotations == rec.annotations
    assert log.subject == 'S01'
    assert log.asr_total_windows == 80
    assert log.eog_channels == ['VEOG', 'HEOG']
    scalp = first.indices_with_role('scalp')
    assert np.allclose(first.samples[:, scalp].mean(axis=1), 0.0, atol=1e-18)
