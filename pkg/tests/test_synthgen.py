import json
import os

import numpy as np
import pytest

from eegpipe.errors import ConfigError, DataError
from eegpipe.models import FrequencyBand
from eegpipe.signal_io import load_recordings_dir
from eegpipe.spectral import band_power, multitaper_psd
from eegpipe.synthgen import (
    PlantedEffect, SynthSpec, coupling_for_change, gen_behavior, gen_oscillation, gen_pink_noise, gen_study,
    gen_subject, gen_var_process, link_band_pdc, write_study,
)

ALPHA = FrequencyBand('alpha', 8.0, 12.0)
THETA = FrequencyBand('theta', 4.0, 8.0)


@pytest.fixture
def spec(smoke_spec):
    return SynthSpec.load(smoke_spec)


def test_spec_validation():
    with pytest.raises(ConfigError, match='seed'):
        SynthSpec.from_dict({'n_subjects': 2})
    with pytest.raises(ConfigError, match='unknown config key'):
        SynthSpec.from_dict({'seed': 1, 'n_subject': 2})
    with pytest.raises(ConfigError, match='band'):
        SynthSpec.from_dict({'seed': 1, 'effects': [
            {'kind': 'bandpower', 'channels': ['O1'], 'band': 'mu', 'effect_size': 0.5, 'condition': 'Wide'}]})
    with pytest.raises(ConfigError, match='not a spec condition'):
        SynthSpec.from_dict({'seed': 1, 'effects': [
            {'kind': 'bandpower', 'channels': ['O1'], 'band': 'alpha', 'effect_size': 0.5, 'condition': 'Narrow'}]})
    with pytest.raises(ConfigError, match='distinct'):
        PlantedEffect('pdc_link', ('Fz', 'Fz'), 'theta', 0.3, 'Wide')


def test_segment_layout(spec):
    segments = spec.segments()
    assert [(a.condition, a.task, a.start_s, a.end_s) for a in segments] == [
        ('rest_open', 'rest', 0.0, 30.0),
        ('Neutral', 'Arithmetic', 30.0, 50.0),
        ('Wide', 'Arithmetic', 50.0, 70.0),
    ]


def test_subjects_are_seeded(spec, montage):
    first, truth = gen_subject(spec, 0, montage)
    again, _ = gen_subject(spec, 0, montage)
    other, _ = gen_subject(spec, 1, montage)
    assert first == again
    assert not np.array_equal(first.samples, other.samples)
    assert first.subject_id == 'S01' and other.subject_id == 'S02'
    assert first.channel_roles.count('scalp') == 19
    assert first.channel_roles.count('eog') == 4
    assert first.duration_s == pytest.approx(70.0)
    assert truth['effects'][0]['applied_change'] > 0


def test_planted_alpha_effect_is_visible(spec, montage):
    rec, _ = gen_subject(spec, 0, montage)
    o1 = rec.channel_index('O1')

    def alpha(start_s, end_s):
        segment = rec.crop(start_s, end_s).samples[:, o1]
        return float(band_power(multitaper_psd(segment, rec.fs), ALPHA))

    assert alpha(50.0, 70.0) > 1.3 * alpha(30.0, 50.0)


def test_var_process(rng):
    coefficients = np.array([[[0.5, 0.0], [0.4, 0.3]]])
    x = gen_var_process(coefficients, np.eye(2), 4000, seed=rng)
    assert x.shape == (4000, 2)
    lagged = np.linalg.lstsq(x[:-1], x[1:], rcond=None)[0].T
    assert np.allclose(lagged, coefficients[0], atol=0.06)
    with pytest.raises(DataError, match='unstable'):
        gen_var_process(np.array([[[1.01]]]), np.eye(1), 10, seed=0)
    with pytest.raises(DataError, match='positive definite'):
        gen_var_process(coefficients, -np.eye(2), 10, seed=0)


def test_oscillation_rms_and_band(rng):
    x = gen_oscillation(ALPHA, 2.0, 10.0, 128.0, rng)
    assert len(x) == 1280
    assert np.sqrt(np.mean(x ** 2)) == pytest.approx(2.0)
    spectrum = multitaper_psd(x, 128.0)
    assert band_power(spectrum, ALPHA) > 0.75 * spectrum.total_power()
    with pytest.raises(DataError):
        gen_oscillation(FrequencyBand('high', 50.0, 70.0), 1.0, 1.0, 128.0, rng)


def test_pink_noise_has_falling_spectrum():
    x = gen_pink_noise(8192, 2, seed=0)
    assert np.allclose(x.std(axis=0), 1.0)
    spectrum = multitaper_psd(x[:, 0], 128.0)
    low = band_power(spectrum, FrequencyBand('low', 1.0, 4.0)) / 3.0
    high = band_power(spectrum, FrequencyBand('high', 30.0, 40.0)) / 10.0
    assert low > 5 * high


def test_coupling_reaches_the_requested_pdc_change():
    base = link_band_pdc(THETA, 0.01, 250.0)
    assert link_band_pdc(THETA, 0.1, 250.0) > base
    coupling = coupling_for_change(THETA, 0.01, 0.3, 250.0)
    assert link_band_pdc(THETA, coupling, 250.0) == pytest.approx(1.3 * base, rel=1e-6)


def test_behavior_table(spec):
    table = gen_behavior(spec)
    assert len(table) == 4 * 1 * 2
    assert list(table.columns) == ['subject', 'condition', 'task', 'n_correct', 'n_submitted', 'duration_s']
    assert (table['n_correct'] <= table['n_submitted']).all()
    assert table.equals(gen_behavior(spec))


def test_write_study(spec, tmp_path):
    truth = write_study(spec, str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == [
        'S01.f32', 'S01.json', 'S02.f32', 'S02.json', 'S03.f32', 'S03.json', 'S04.f32', 'S04.json',
        '_ground_truth.json', '_synth_spec.json', 'behavior.csv',
    ]
    assert truth['planted'][0]['features'] == ['bp:O1:alpha', 'bp:O2:alpha', 'bp:Pz:alpha']
    assert truth['planted'][0]['expected_sign'] == 1
    with open(tmp_path / '_synth_spec.json') as f:
        assert SynthSpec.from_dict(json.load(f)) == spec
    recordings = load_recordings_dir(str(tmp_path))
    assert recordings[0] == gen_subject(spec, 0)[0]


def test_gen_study_matches_per_subject_generation(spec, montage):
    recordings, truth = gen_study(spec)
    assert [r.subject_id for r in recordings] == ['S01', 'S02', 'S03', 'S04']
    assert recordings[2] == gen_subject(spec, 2, montage)[0]
    assert truth['n_subjects'] == 4
    assert [s['subject'] for s in truth['subjects']] == ['S01', 'S02', 'S03', 'S04']
    assert truth['planted'][0]['features'] == ['bp:O1:alpha', 'bp:O2:alpha', 'bp:Pz:alpha']
