"""
Directed connectivity
Least-squares MVAR fitting, Schwarz order selection and partial directed
coherence, plus the band-averaged PDC feature block.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from eegpipe.config import Config
from eegpipe.errors import DataError, NumericError
from eegpipe.models import FeatureDescriptor, FeatureMatrix, FrequencyBand, Window
from eegpipe.signal_io import check_windows, window_labels

logger = logging.getLogger(__name__)


def companion_radius(coefficients: np.ndarray) -> float:
    """Spectral radius of the VAR companion matrix for A_1..A_p ([p x m x m])"""
    p, m, _ = coefficients.shape
    companion = np.zeros((m * p, m * p))
    companion[:m] = np.hstack(list(coefficients))
    companion[m:, :-m] = np.eye(m * (p - 1))
    return float(np.max(np.abs(linalg.eigvals(companion))))


@dataclass(frozen=True, eq=False)
class MvarModel:
    """x_t = sum_r A_r x_{t-r} + e_t, e_t ~ (0, noise_cov)"""
    coefficients: np.ndarray
    noise_cov: np.ndarray
    fs: float
    channel_names: Tuple[str, ...] = ()

    @property
    def order(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_channels(self) -> int:
        return self.coefficients.shape[1]

    @property
    def spectral_radius(self) -> float:
        return companion_radius(self.coefficients)

    @property
    def stable(self) -> bool:
        return self.spectral_radius < 1.0

    def a_bar(self, freqs: np.ndarray) -> np.ndarray:
        """I - sum_r A_r exp(-i 2 pi f r / fs), shape [n_freqs x m x m]"""
        freqs = np.asarray(freqs, dtype=float)
        lags = np.arange(1, self.order + 1)
        phases = np.exp(-2j * np.pi * np.outer(freqs, lags) / self.fs)
        return np.eye(self.n_channels) - np.einsum('fr,rij->fij', phases, self.coefficients)


@dataclass(frozen=True, eq=False)
class PdcTensor:
    """values[sink, source, f]; each source column has unit squared sum over sinks"""
    values: np.ndarray
    freqs: np.ndarray
    channel_names: Tuple[str, ...]

    def band_mean(self, band: FrequencyBand) -> np.ndarray:
        """[sink x source] mean over the grid points in [lo, hi]"""
        inside = (self.freqs >= band.lo) & (self.freqs <= band.hi)
        if not inside.any():
            raise DataError(f"no PDC frequency points inside band {band.name}")
        return self.values[:, :, inside].mean(axis=2)


def _lagged(x: np.ndarray, p: int, start: int) -> Tuple[np.ndarray, np.ndarray]:
    """Targets x[start:] and regressors [x_{t-1} ... x_{t-p}] for t >= start"""
    n = x.shape[0]
    targets = x[start:]
    regressors = np.hstack([x[start - r:n - r] for r in range(1, p + 1)])
    return targets, regressors


def _solve_qr(regressors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    q, r = linalg.qr(regressors, mode='economic')
    diag = np.abs(np.diag(r))
    tol = max(regressors.shape) * np.finfo(float).eps * diag.max(initial=0.0)
    if diag.size == 0 or np.any(diag <= tol):
        raise NumericError(
            f"rank-deficient MVAR regressors ({int(np.sum(diag > tol))} of {regressors.shape[1]} independent)"
        )
    return linalg.solve_triangular(r, q.T @ targets)


def _check_data(data: np.ndarray, p: int) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise DataError(f"MVAR data must be samples x channels, got shape {data.shape}")
    if p < 1:
        raise DataError(f"MVAR order must be >= 1, got {p}")
    if not np.all(np.isfinite(data)):
        raise DataError("MVAR data contains non-finite samples")
    n, m = data.shape
    if n <= m * p + p:
        raise DataError(f"{n} samples are too few for a {m}-channel MVAR of order {p}")
    return data - data.mean(axis=0)


def fit_mvar(data: np.ndarray, p: int, fs: float = 1.0,
             channel_names: Sequence[str] = ()) -> MvarModel:
    """Least-squares VAR(p) via QR of the stacked lag regressors

    The residual covariance uses the denominator n - p - m*p. An unstable
    fit is returned with stable == False and a warning.
    """
    x = _check_data(data, p)
    n, m = x.shape
    targets, regressors = _lagged(x, p, p)
    solution = _solve_qr(regressors, targets)
    residuals = targets - regressors @ solution
    noise_cov = residuals.T @ residuals / (n - p - m * p)
    noise_cov = 0.5 * (noise_cov + noise_cov.T)
    coefficients = np.stack([solution[(r - 1) * m:r * m].T for r in range(1, p + 1)])
    model = MvarModel(coefficients, noise_cov, fs, tuple(channel_names))
    if not model.stable:
        logger.warning("unstable MVAR(%d) fit: companion spectral radius %.4f", p, model.spectral_radius)
    return model


def select_order_sbc(data: np.ndarray, p_max: int) -> Tuple[int, np.ndarray]:
    """Order in 1..p_max minimizing ln det(Sigma_p) + p m^2 ln(n_eff)/n_eff

    All orders are fitted on the same samples (t >= p_max), with the ML
    residual covariance. Ties go to the smaller order.
    """
    x = _check_data(data, p_max)
    n, m = x.shape
    n_eff = n - p_max
    sbc = np.empty(p_max)
    for p in range(1, p_max + 1):
        targets, regressors = _lagged(x, p, p_max)
        residuals = targets - regressors @ _solve_qr(regressors, targets)
        sign, logdet = np.linalg.slogdet(residuals.T @ residuals / n_eff)
        if sign <= 0:
            raise NumericError(f"singular residual covariance at MVAR order {p}")
        sbc[p - 1] = logdet + p * m * m * np.log(n_eff) / n_eff
    return int(np.argmin(sbc)) + 1, sbc


def pdc(model: MvarModel, freqs: Sequence[float]) -> PdcTensor:
    """Partial directed coherence |A_ij| / sqrt(sum_k |A_kj|^2) on the grid"""
    if not model.stable:
        raise NumericError(
            f"PDC requested for an unstable MVAR model (spectral radius {model.spectral_radius:.4f})"
        )
    freqs = np.asarray(freqs, dtype=float)
    if freqs.size == 0 or freqs.min() < 0 or freqs.max() > model.fs / 2 + 1e-9:
        raise DataError(f"PDC frequencies must lie in [0, {model.fs / 2:g}] Hz")
    magnitude = np.abs(model.a_bar(freqs))
    column_norm = np.sqrt(np.sum(magnitude ** 2, axis=1, keepdims=True))
    values = np.transpose(magnitude / column_norm, (1, 2, 0))
    names = model.channel_names or tuple(str(i) for i in range(model.n_channels))
    return PdcTensor(values=values, freqs=freqs, channel_names=names)


def pdc_frequency_grid(bands: Sequence[FrequencyBand], n_freqs: int = 64) -> np.ndarray:
    """Uniform grid covering [min lo, max hi] of the bands"""
    return np.linspace(min(b.lo for b in bands), max(b.hi for b in bands), n_freqs)


def _window_pdc(window: Window, columns: List[int], names: Tuple[str, ...], p: int,
                bands: Sequence[FrequencyBand], grid: np.ndarray) -> np.ndarray:
    model = fit_mvar(window.data[:, columns], p, window.fs, names)
    try:
        tensor = pdc(model, grid)
    except NumericError as e:
        raise NumericError(f"{window.subject}/{window.condition}/{window.task}@{window.start_s:g}s: {e}") from None
    # [sink, source, band] -> (source, sink, band) column order
    means = np.stack([tensor.band_mean(band) for band in bands], axis=2)
    return np.transpose(means, (1, 0, 2)).ravel()


def pdc_band_features(windows: List[Window], electrode_subset: Sequence[str], p: int,
                      bands: Sequence[FrequencyBand], n_freqs: int = 64,
                      n_jobs: Optional[int] = None) -> FeatureMatrix:
    """Band-averaged PDC per window over ordered (source, sink, band) triples

    Self-pairs are kept, so 28 electrodes and 5 bands give 3920 columns.
    """
    first = check_windows(windows)
    scalp = {n for n, r in zip(first.channel_names, first.channel_roles) if r == 'scalp'}
    unknown = [e for e in electrode_subset if e not in scalp]
    if unknown:
        raise DataError(f"PDC electrode(s) not among the scalp channels: {unknown}")
    names = tuple(electrode_subset)
    columns = [first.channel_names.index(e) for e in names]
    grid = pdc_frequency_grid(bands, n_freqs)
    if grid.max() > first.fs / 2:
        raise DataError(f"PDC bands exceed Nyquist at fs={first.fs:g}")

    rows = Parallel(n_jobs=n_jobs or Config.N_JOBS)(
        delayed(_window_pdc)(w, columns, names, p, bands, grid) for w in windows
    )
    descriptors = [
        FeatureDescriptor('pdc', (source, sink), band.name)
        for source in names for sink in names for band in bands
    ]
    logger.debug("PDC: %d windows x %d features", len(windows), len(descriptors))
    return FeatureMatrix(np.vstack(rows), descriptors, window_labels(windows))
