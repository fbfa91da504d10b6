import json
import os

import numpy as np
import pytest

from eegpipe.errors import ConfigError, DataError
from eegpipe.models import Annotation, FeatureDescriptor
from eegpipe.signal_io import (
    load_feature_matrix, load_recording, load_recordings_dir, save_feature_matrix, save_recording,
    segment_windows, standard_montage, window_count,
)


def test_bundled_montages_are_unit_vectors():
    easy = standard_montage('easycap57')
    classic = standard_montage('classic1020')
    assert len(easy.channel_names) == 57
    assert len(classic.channel_names) == 19
    assert np.allclose(np.linalg.norm(easy.positions, axis=1), 1.0)
    # nasion towards +x, left ear towards +y
    fz, t7 = classic.positions_for(['Fz', 'T7'])
    assert fz[0] > 0
    assert t7[1] > 0.9


def test_unknown_montage():
    with pytest.raises(ConfigError, match='unknown montage'):
        standard_montage('hexagonal')


def test_window_count_for_default_span():
    assert window_count(25.0, 4.0, 2.0) == 11
    assert window_count(82.0, 4.0, 2.0) == 40
    assert window_count(4.0, 4.0, 2.0) == 1


def test_segment_windows_respect_span_and_conditions(make_recording):
    annotations = (
        Annotation(0.0, 10.0, 'Neutral', 'Arithmetic'),
        Annotation(10.0, 40.0, 'Wide', 'Arithmetic'),
    )
    rec = make_recording(seconds=40.0, annotations=annotations)
    windows = segment_windows(rec, 4.0, 2.0, 25.0)
    neutral = [w for w in windows if w.condition == 'Neutral']
    wide = [w for w in windows if w.condition == 'Wide']
    assert len(neutral) == window_count(10.0, 4.0, 2.0) == 4
    assert len(wide) == 11
    assert wide[-1].start_s == pytest.approx(30.0)
    assert all(w.data.shape == (512, rec.n_channels) for w in windows)

    only_wide = segment_windows(rec, 4.0, 2.0, 25.0, conditions=['Wide'])
    assert {w.condition for w in only_wide} == {'Wide'}


def test_segment_shorter_than_window(make_recording):
    rec = make_recording(seconds=10.0, annotations=(Annotation(0.0, 3.0, 'Neutral', 'Arithmetic'),))
    with pytest.raises(DataError, match='shorter'):
        segment_windows(rec, 4.0, 2.0, 25.0)


def test_window_starts_follow_the_hop_for_random_spans(make_recording, rng):
    rec = make_recording(seconds=40.0, annotations=(Annotation(0.0, 40.0, 'Neutral', 'Arithmetic'),))
    for _ in range(50):
        # quarter-second grid keeps every boundary exact at 128 Hz
        win_q = int(rng.integers(1, 41))
        span_q = int(rng.integers(win_q, 161))
        hop_q = int(rng.integers(1, 21))
        windows = segment_windows(rec, win_q / 4, hop_q / 4, span_q / 4)
        expected = (span_q - win_q) // hop_q + 1
        assert len(windows) == expected == window_count(span_q / 4, win_q / 4, hop_q / 4)
        assert [w.start_s for w in windows] == pytest.approx([k * hop_q / 4 for k in range(expected)])
        assert all(w.data.shape[0] == 32 * win_q for w in windows)


def test_recording_round_trip_is_exact(make_recording, tmp_path):
    rec = make_recording(seconds=5.0, annotations=(Annotation(1.0, 4.0, 'rest_open', 'Rest'),)).to_float32()
    manifest = save_recording(rec, str(tmp_path))
    with open(manifest) as f:
        stored = json.load(f)
    assert stored['dtype'] == 'float32'
    data_file = os.path.join(str(tmp_path), stored['data_file'])
    assert os.path.getsize(data_file) == 4 * rec.n_samples * rec.n_channels
    assert load_recording(manifest) == rec


def test_saving_twice_gives_identical_binaries(make_recording, tmp_path):
    rec = make_recording(seconds=2.0).to_float32()
    first = save_recording(rec, str(tmp_path / 'a'))
    second = save_recording(rec, str(tmp_path / 'b'))
    with open(first.replace('.json', '.f32'), 'rb') as a, open(second.replace('.json', '.f32'), 'rb') as b:
        assert a.read() == b.read()


def test_samples_beyond_float32_precision_are_refused(make_recording, tmp_path):
    rec = make_recording(seconds=2.0)
    with pytest.raises(DataError, match='float32'):
        save_recording(rec, str(tmp_path))
    assert not os.listdir(tmp_path)


def test_float64_binaries_are_rejected(make_recording, tmp_path):
    manifest = save_recording(make_recording(seconds=1.0).to_float32(), str(tmp_path))
    with open(manifest) as f:
        stored = json.load(f)
    stored['dtype'] = 'float64'
    with open(manifest, 'w') as f:
        json.dump(stored, f)
    with pytest.raises(DataError, match='dtype'):
        load_recording(manifest)


def test_truncated_binary_is_rejected(make_recording, tmp_path):
    manifest = save_recording(make_recording(seconds=2.0).to_float32(), str(tmp_path))
    with open(manifest) as f:
        data_file = os.path.join(str(tmp_path), json.load(f)['data_file'])
    with open(data_file, 'r+b') as f:
        f.truncate(os.path.getsize(data_file) - 4)
    with pytest.raises(DataError, match='bytes'):
        load_recording(manifest)


def test_manifest_missing_fields(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'fs': 128}))
    with pytest.raises(DataError, match='lacks'):
        load_recording(str(path))


def test_recordings_dir_is_sorted(make_recording, tmp_path):
    for subject in ('S02', 'S01'):
        save_recording(make_recording(seconds=1.0, subject=subject).to_float32(), str(tmp_path))
    (tmp_path / '_preprocess.json').write_text('[]')
    assert [r.subject_id for r in load_recordings_dir(str(tmp_path))] == ['S01', 'S02']


def test_feature_matrix_round_trip(make_features, tmp_path):
    fm = make_features(n_subjects=2, per_cell=3)
    path = str(tmp_path / 'features.csv')
    save_feature_matrix(fm, path)
    loaded = load_feature_matrix(path)
    assert loaded.descriptor_strings == fm.descriptor_strings
    assert np.array_equal(loaded.values, fm.values)
    assert loaded.labels.equals(fm.labels)


def test_descriptor_strings_parse_back():
    for d in (FeatureDescriptor('bandpower', ('O1',), 'alpha'), FeatureDescriptor('pdc', ('Fz', 'Pz'), 'theta')):
        assert FeatureDescriptor.parse(str(d)) == d
    with pytest.raises(DataError):
        FeatureDescriptor.parse('pdc:FzPz:theta')
