"""
Spectral features
Multitaper PSD with DPSS tapers, band power integration and the band-power
feature block, plus per-subject baseline normalization and pooled
standardization of any feature matrix.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import fft, integrate
from scipy.signal import windows as sig_windows

from eegpipe.errors import DataError, NumericError
from eegpipe.models import FeatureDescriptor, FeatureMatrix, FrequencyBand, Window
from eegpipe.signal_io import check_windows, window_labels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MultitaperConfig:
    nw: float = 4.0
    k: int = 7

    def __post_init__(self):
        if self.nw < 1:
            raise DataError(f"time-half-bandwidth must be >= 1, got {self.nw}")
        if not 1 <= self.k <= 2 * self.nw - 1:
            raise DataError(f"taper count must be in [1, 2*nw-1] = [1, {2 * self.nw - 1:g}], got {self.k}")


@dataclass(frozen=True, eq=False)
class PowerSpectrum:
    """One-sided PSD in V^2/Hz; psd is [n_freqs] or [n_freqs x n_channels]"""
    freqs: np.ndarray
    psd: np.ndarray
    fs: float

    @property
    def nyquist(self) -> float:
        return self.fs / 2

    def total_power(self) -> np.ndarray:
        return integrate.trapezoid(self.psd, self.freqs, axis=0)


def dpss_tapers(n: int, nw: float, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Slepian tapers [k x n] (unit L2 norm) and their concentration ratios"""
    if n < 8:
        raise DataError(f"need at least 8 samples for DPSS tapers, got {n}")
    if k < 1 or k > 2 * nw - 1:
        raise DataError(f"taper count {k} exceeds 2*nw-1 = {2 * nw - 1:g}")
    tapers, ratios = sig_windows.dpss(n, nw, Kmax=k, return_ratios=True)
    return np.atleast_2d(tapers), np.atleast_1d(ratios)


def _psd_from_tapers(x: np.ndarray, fs: float, tapers: np.ndarray) -> PowerSpectrum:
    n = x.shape[0]
    centered = x - x.mean(axis=0)
    shaped = tapers.reshape(tapers.shape + (1,) * (x.ndim - 1))
    spectra = fft.rfft(shaped * centered[np.newaxis], axis=1)
    psd = np.mean(np.abs(spectra) ** 2, axis=0) / fs
    # one-sided: double everything but DC (and Nyquist for even n)
    last = -1 if n % 2 == 0 else None
    psd[1:last] *= 2.0
    return PowerSpectrum(freqs=fft.rfftfreq(n, d=1.0 / fs), psd=psd, fs=fs)


def multitaper_psd(x: np.ndarray, fs: float, cfg: MultitaperConfig = MultitaperConfig()) -> PowerSpectrum:
    """Average of DPSS-tapered periodograms, mean removed

    Scaled so that integrating the one-sided PSD over [0, fs/2] estimates
    the variance of x. Accepts one channel or samples x channels.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DataError("multitaper input contains non-finite samples")
    tapers, _ = dpss_tapers(x.shape[0], cfg.nw, cfg.k)
    return _psd_from_tapers(x, fs, tapers)


def _interp_at(freqs: np.ndarray, psd: np.ndarray, f0: float) -> np.ndarray:
    i = int(np.clip(np.searchsorted(freqs, f0, side='right') - 1, 0, len(freqs) - 2))
    w = (f0 - freqs[i]) / (freqs[i + 1] - freqs[i])
    return psd[i] * (1 - w) + psd[i + 1] * w


def band_power(spectrum: PowerSpectrum, band: FrequencyBand) -> np.ndarray:
    """Trapezoidal integral of the PSD over [lo, hi], edges interpolated"""
    if band.hi > spectrum.nyquist + 1e-9:
        raise DataError(
            f"band {band.name} [{band.lo}, {band.hi}] Hz exceeds the spectrum range [0, {spectrum.nyquist:g}] Hz"
        )
    freqs, psd = spectrum.freqs, spectrum.psd
    inside = (freqs > band.lo) & (freqs < band.hi)
    grid = np.concatenate(([band.lo], freqs[inside], [band.hi]))
    values = np.concatenate(
        [_interp_at(freqs, psd, band.lo)[np.newaxis], psd[inside], _interp_at(freqs, psd, band.hi)[np.newaxis]],
        axis=0,
    )
    return integrate.trapezoid(values, grid, axis=0)


def band_power_features(windows: List[Window], bands: Sequence[FrequencyBand],
                        cfg: MultitaperConfig = MultitaperConfig()) -> FeatureMatrix:
    """Rows = windows, columns = scalp channel x band (channel-major)"""
    first = check_windows(windows)
    scalp = [i for i, r in enumerate(first.channel_roles) if r == 'scalp']
    names = [first.channel_names[i] for i in scalp]
    if not scalp:
        raise DataError("windows have no scalp channels")
    for band in bands:
        if band.hi > first.fs / 2:
            raise DataError(f"band {band.name} exceeds Nyquist at fs={first.fs:g}")

    tapers, _ = dpss_tapers(first.data.shape[0], cfg.nw, cfg.k)
    values = np.empty((len(windows), len(names) * len(bands)))
    for row, window in enumerate(windows):
        spectrum = _psd_from_tapers(window.data[:, scalp], window.fs, tapers)
        powers = np.stack([band_power(spectrum, band) for band in bands], axis=1)
        values[row] = powers.ravel()

    descriptors = [FeatureDescriptor('bandpower', (ch,), band.name) for ch in names for band in bands]
    logger.debug("band power: %d windows x %d features", len(windows), len(descriptors))
    return FeatureMatrix(values, descriptors, window_labels(windows))


def normalize_to_baseline(fm: FeatureMatrix, baseline_fm: FeatureMatrix) -> FeatureMatrix:
    """Relative change from each subject's mean baseline feature value"""
    if fm.descriptor_strings != baseline_fm.descriptor_strings:
        raise DataError("baseline features do not match the feature matrix columns")
    values = np.array(fm.values)
    subjects = fm.labels['subject'].to_numpy()
    baseline_subjects = baseline_fm.labels['subject'].to_numpy()
    for subject in np.unique(subjects):
        base_rows = baseline_subjects == subject
        if not base_rows.any():
            raise DataError(f"no baseline windows for subject {subject}")
        mean = baseline_fm.values[base_rows].mean(axis=0)
        zero = np.flatnonzero(mean == 0)
        if len(zero):
            raise NumericError(
                f"baseline mean of {fm.descriptor_strings[zero[0]]} is 0 for subject {subject}"
            )
        rows = subjects == subject
        values[rows] = (values[rows] - mean) / mean
    return fm.with_values(values)


def standardize_across_subjects(fm: FeatureMatrix) -> FeatureMatrix:
    """z-score every column over all rows pooled"""
    if fm.n_rows < 2:
        raise DataError(f"standardization needs >= 2 rows, got {fm.n_rows}")
    mean = fm.values.mean(axis=0)
    std = fm.values.std(axis=0)
    flat = np.flatnonzero(std == 0)
    if len(flat):
        raise NumericError(f"feature {fm.descriptor_strings[flat[0]]} has zero variance")
    return fm.with_values((fm.values - mean) / std)
