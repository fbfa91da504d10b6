import json

import numpy as np
import pandas as pd
import pytest

from eegpipe.models import FeatureDescriptor, FeatureMatrix, Recording
from eegpipe.signal_io import standard_montage

CLASSIC = ('Fp1', 'Fp2', 'F7', 'F3', 'Fz', 'F4', 'F8', 'T7', 'C3', 'Cz', 'C4', 'T8',
           'P7', 'P3', 'Pz', 'P4', 'P8', 'O1', 'O2')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def montage():
    return standard_montage('classic1020')


@pytest.fixture
def make_recording(montage):
    """Smooth, spatially correlated scalp data plus two EOG channels"""

    def build(seconds=40.0, fs=128.0, seed=0, annotations=(), subject='S01'):
        rng = np.random.default_rng(seed)
        n = int(round(seconds * fs))
        sources = rng.standard_normal((n, 4)).cumsum(axis=0)
        sources -= sources.mean(axis=0)
        sources /= sources.std(axis=0)
        mixing = np.abs(montage.positions @ rng.standard_normal((3, 4))) + 0.5
        scalp = 1e-5 * (sources @ mixing.T) + 1e-7 * rng.standard_normal((n, len(CLASSIC)))
        eog = 1e-5 * rng.standard_normal((n, 2))
        return Recording(
            samples=np.hstack([scalp, eog]),
            fs=fs,
            channel_names=CLASSIC + ('VEOG', 'HEOG'),
            channel_roles=('scalp',) * len(CLASSIC) + ('eog', 'eog'),
            subject_id=subject,
            annotations=annotations,
        )

    return build


@pytest.fixture
def make_features():
    """Feature matrix with subject/condition/task labels; informative columns shifted by `shift`"""

    def build(n_subjects=4, per_cell=10, n_features=6, informative=(0,), shift=2.0, seed=0,
              conditions=('Neutral', 'Wide'), task='Arithmetic'):
        rng = np.random.default_rng(seed)
        rows, labels = [], []
        for s in range(n_subjects):
            for c, condition in enumerate(conditions):
                block = rng.standard_normal((per_cell, n_features))
                block[:, list(informative)] += shift * c
                rows.append(block)
                labels += [(f"S{s + 1:02d}", condition, task, 2.0 * k) for k in range(per_cell)]
        descriptors = [FeatureDescriptor('bandpower', (CLASSIC[i % len(CLASSIC)],), ('alpha', 'beta')[i // len(CLASSIC) % 2])
                       for i in range(n_features)]
        frame = pd.DataFrame(labels, columns=['subject', 'condition', 'task', 'start_s'])
        return FeatureMatrix(np.vstack(rows), descriptors, frame)

    return build


@pytest.fixture
def smoke_spec(tmp_path):
    """Small synthetic study spec file: 4 subjects, 2 conditions, 1 task"""
    spec = {
        'seed': 5,
        'n_subjects': 4,
        'fs': 128.0,
        'montage': 'classic1020',
        'conditions': ['Neutral', 'Wide'],
        'tasks': ['Arithmetic'],
        'segment_s': 20.0,
        'baseline_s': 30.0,
        'closed_rest_s': 0.0,
        'n_sources': 6,
        'effects': [
            {'kind': 'bandpower', 'channels': ['O1', 'O2', 'Pz'], 'band': 'alpha',
             'effect_size': 1.0, 'condition': 'Wide'},
        ],
    }
    path = tmp_path / 'spec.json'
    path.write_text(json.dumps(spec))
    return str(path)


@pytest.fixture
def pipeline_config(tmp_path, smoke_spec):
    """Config dict for a fast end-to-end run over smoke_spec"""
    return {
        'format_version': 1,
        'seed': 11,
        'output_dir': str(tmp_path / 'run'),
        'input': {'synth_spec': smoke_spec, 'montage': 'classic1020'},
        'preprocess': {'enabled': False},
        'features': {
            'span_s': 20.0,
            'baseline_span_s': 30.0,
            'mvar_order': 2,
            'pdc_subset': ['Fz', 'Cz', 'Pz'],
            'pdc_n_freqs': 16,
        },
        'ml': {
            'n_per_class': 8,
            'n_features': 10,
            'k_folds': 3,
            'inner_cv': False,
            'sweep_max': 20,
            'sweep_schedule': [5, 10, 20],
        },
    }

