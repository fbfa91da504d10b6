import numpy as np
import pytest

from eegpipe.connectivity import (
    MvarModel, PdcTensor, companion_radius, fit_mvar, pdc, pdc_band_features, pdc_frequency_grid,
    select_order_sbc,
)
from eegpipe.errors import DataError, NumericError
from eegpipe.models import CANONICAL_BANDS, Annotation, FrequencyBand, Recording
from eegpipe.signal_io import segment_windows
from eegpipe.synthgen import gen_var_process

# A_1, A_2 of a stable bivariate VAR(2) where channel 0 drives channel 1
VAR2 = np.array([
    [[0.5, 0.0], [0.3, 0.4]],
    [[-0.2, 0.0], [0.0, -0.1]],
])

# channel 0 (Fz) drives channel 2 (Pz)
DRIVEN = np.array([[[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.6, 0.0, 0.3]]])


def test_companion_radius():
    assert companion_radius(np.array([[[0.5, 0.0], [0.0, 0.5]]])) == pytest.approx(0.5)
    assert companion_radius(np.array([[[1.2, 0.0], [0.0, 0.1]]])) == pytest.approx(1.2)


def test_fit_recovers_known_coefficients():
    data = gen_var_process(VAR2, np.eye(2), 20000, seed=1)
    model = fit_mvar(data, 2, fs=128.0, channel_names=('a', 'b'))
    assert model.order == 2
    assert model.stable
    assert np.allclose(model.coefficients, VAR2, atol=0.05)
    assert np.allclose(model.noise_cov, np.eye(2), atol=0.1)


def test_sbc_picks_the_true_order():
    data = gen_var_process(VAR2, np.eye(2), 5000, seed=2)
    order, sbc = select_order_sbc(data, 6)
    assert order == 2
    assert sbc.shape == (6,)
    assert np.argmin(sbc) == 1


def test_too_few_samples_and_rank_deficiency(rng):
    with pytest.raises(DataError, match='too few'):
        fit_mvar(rng.standard_normal((20, 4)), 4)
    x = rng.standard_normal((500, 1))
    with pytest.raises(NumericError, match='rank-deficient'):
        fit_mvar(np.hstack([x, 2 * x]), 2)


def test_pdc_columns_are_normalized_and_directional():
    model = MvarModel(VAR2, np.eye(2), 128.0, ('a', 'b'))
    freqs = np.linspace(0.0, 64.0, 33)
    tensor = pdc(model, freqs)
    assert tensor.values.shape == (2, 2, 33)
    assert np.allclose(np.sum(tensor.values ** 2, axis=0), 1.0)
    assert np.all((tensor.values >= 0) & (tensor.values <= 1))
    # b never drives a
    assert np.all(tensor.values[0, 1] == 0.0)
    assert np.all(tensor.values[1, 0] > 0.0)


def test_pdc_refuses_unstable_models_and_bad_grids():
    unstable = MvarModel(np.array([[[1.1, 0.0], [0.0, 0.2]]]), np.eye(2), 100.0)
    with pytest.raises(NumericError, match='unstable'):
        pdc(unstable, [10.0])
    stable = MvarModel(VAR2, np.eye(2), 100.0)
    with pytest.raises(DataError):
        pdc(stable, [10.0, 60.0])


@pytest.mark.parametrize('perm', [(2, 0, 1), (1, 2, 0), (2, 1, 0)])
def test_pdc_follows_channel_reordering(perm):
    data = gen_var_process(DRIVEN, np.eye(3), 4000, seed=4)
    freqs = np.linspace(1.0, 40.0, 16)
    reference = pdc(fit_mvar(data, 2, fs=128.0), freqs).values
    reordered = pdc(fit_mvar(data[:, list(perm)], 2, fs=128.0), freqs).values
    np.testing.assert_allclose(reordered, reference[list(perm)][:, list(perm)], rtol=1e-8, atol=1e-10)


def test_band_mean_uses_closed_intervals():
    freqs = np.array([4.0, 6.0, 8.0, 10.0])
    values = np.zeros((1, 1, 4))
    values[0, 0] = [1.0, 2.0, 3.0, 4.0]
    tensor = PdcTensor(values, freqs, ('a',))
    assert tensor.band_mean(FrequencyBand('theta', 4.0, 8.0))[0, 0] == pytest.approx(2.0)
    with pytest.raises(DataError):
        tensor.band_mean(FrequencyBand('gamma', 30.0, 40.0))


def test_frequency_grid_spans_the_bands():
    grid = pdc_frequency_grid(CANONICAL_BANDS, 64)
    assert grid[0] == 1.0 and grid[-1] == 40.0 and len(grid) == 64


def _driven_recording():
    data = 1e-5 * gen_var_process(DRIVEN, np.eye(3), 12 * 128, seed=3)
    return Recording(data, 128.0, ('Fz', 'Cz', 'Pz'), ('scalp',) * 3, 'S01',
                     (Annotation(0.0, 12.0, 'Neutral', 'Arithmetic'),))


def test_pdc_band_features_layout_and_direction():
    windows = segment_windows(_driven_recording(), 4.0, 2.0, 25.0)
    fm = pdc_band_features(windows, ['Fz', 'Cz', 'Pz'], 1, CANONICAL_BANDS, n_freqs=32, n_jobs=1)
    assert fm.values.shape == (5, 3 * 3 * 5)
    assert fm.descriptor_strings[:6] == [
        'pdc:Fz->Fz:delta', 'pdc:Fz->Fz:theta', 'pdc:Fz->Fz:alpha', 'pdc:Fz->Fz:beta', 'pdc:Fz->Fz:gamma',
        'pdc:Fz->Cz:delta',
    ]
    assert np.all((fm.values >= 0) & (fm.values <= 1))
    assert np.all(fm.column('pdc:Fz->Pz:theta') > fm.column('pdc:Pz->Fz:theta'))

    parallel = pdc_band_features(windows, ['Fz', 'Cz', 'Pz'], 1, CANONICAL_BANDS, n_freqs=32, n_jobs=2)
    assert np.array_equal(parallel.values, fm.values)


def test_pdc_subset_must_be_scalp_channels():
    windows = segment_windows(_driven_recording(), 4.0, 2.0, 25.0)
    with pytest.raises(DataError, match='O1'):
        pdc_band_features(windows, ['Fz', 'O1'], 1, CANONICAL_BANDS)
