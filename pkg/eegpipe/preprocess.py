"""
Preprocessing chain
Band-pass filtering, bad-channel detection and spherical-spline repair,
artifact subspace reconstruction, EOG regression and common-average
referencing. Every step maps a Recording to a new Recording.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import legendre
from scipy import linalg, signal

from eegpipe.errors import DataError
from eegpipe.models import Montage, Recording

logger = logging.getLogger(__name__)

FLAT_EPS = 1e-8
SPLINE_ORDER = 4
SPLINE_MAX_TERMS = 50
SPLINE_TERM_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class FilterKernel:
    taps: np.ndarray
    fs: float
    passband: Tuple[float, float]
    transition_bw: float

    @property
    def length(self) -> int:
        return len(self.taps)

    def frequency_response(self, freqs: np.ndarray) -> np.ndarray:
        """Complex response at the given frequencies (Hz)"""
        _, h = signal.freqz(self.taps, worN=np.asarray(freqs, dtype=float), fs=self.fs)
        return h


@dataclass(frozen=True, eq=False)
class AsrModel:
    """Calibration statistics for artifact subspace reconstruction

    mixing holds the principal axes of the calibration covariance as
    orthonormal columns; rms_mean/rms_std describe the windowed RMS of each
    component on the calibration data.
    """
    mixing: np.ndarray
    center: np.ndarray
    rms_mean: np.ndarray
    rms_std: np.ndarray
    window_s: float
    channel_names: Tuple[str, ...]

    def thresholds(self, cutoff: float) -> np.ndarray:
        if math.isinf(cutoff):
            return np.full_like(self.rms_mean, np.inf)
        return self.rms_mean + cutoff * self.rms_std


@dataclass
class PreprocessLog:
    """What the chain did to one recording"""
    subject: str
    bad_channels: Dict[str, List[str]] = field(default_factory=dict)
    interpolated: List[str] = field(default_factory=list)
    asr_repaired_windows: int = 0
    asr_total_windows: int = 0
    eog_channels: List[str] = field(default_factory=list)
    eog_weight_norm: float = 0.0

    def to_dict(self) -> Dict:
        return {
            'subject': self.subject,
            'bad_channels': self.bad_channels,
            'interpolated': self.interpolated,
            'asr_repaired_windows': self.asr_repaired_windows,
            'asr_total_windows': self.asr_total_windows,
            'eog_channels': self.eog_channels,
            'eog_weight_norm': self.eog_weight_norm,
        }


# -- filtering -----------------------------------------------------------

def design_bandpass_fir(low: float, high: float, fs: float, transition_bw: float) -> FilterKernel:
    """Hamming-windowed sinc band-pass with linear phase

    Length is the smallest odd integer >= 3.3 / (transition_bw / fs); the
    DC gain is removed exactly by subtracting a window-shaped offset.
    """
    if not (0 < low < high < fs / 2):
        raise DataError(f"band edges must satisfy 0 < low < high < fs/2, got ({low}, {high}) at fs={fs}")
    if transition_bw <= 0:
        raise DataError(f"transition bandwidth must be positive, got {transition_bw}")

    numtaps = int(math.ceil(round(3.3 * fs / transition_bw, 9)))
    if numtaps % 2 == 0:
        numtaps += 1
    taps = signal.firwin(numtaps, [low, high], pass_zero=False, window='hamming', fs=fs)
    window = signal.get_window('hamming', numtaps, fftbins=False)
    taps = taps - taps.sum() * window / window.sum()
    taps = 0.5 * (taps + taps[::-1])
    taps.setflags(write=False)
    return FilterKernel(taps=taps, fs=fs, passband=(low, high), transition_bw=transition_bw)


def fir_filter(data: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase FIR along axis 0 with reflection padding, same length out"""
    half = (len(taps) - 1) // 2
    padded = np.pad(data, [(half, half)] + [(0, 0)] * (data.ndim - 1), mode='reflect')
    kernel = taps.reshape((-1,) + (1,) * (data.ndim - 1))
    return signal.oaconvolve(padded, kernel, mode='valid', axes=0)


def apply_filter_zero_phase(rec: Recording, kernel: FilterKernel) -> Recording:
    """One-pass convolution with the group delay compensated"""
    if kernel.fs != rec.fs:
        raise DataError(f"kernel designed for {kernel.fs} Hz, recording is {rec.fs} Hz")
    if rec.n_samples <= kernel.length:
        raise DataError(
            f"recording {rec.subject_id} has {rec.n_samples} samples, "
            f"shorter than the {kernel.length}-tap kernel"
        )
    return rec.with_samples(fir_filter(rec.samples, kernel.taps))


# -- bad channels --------------------------------------------------------

def _longest_flat_run(x: np.ndarray) -> np.ndarray:
    """Longest run of near-zero first differences per column, in samples"""
    flat = np.abs(np.diff(x, axis=0)) < FLAT_EPS
    longest = np.zeros(x.shape[1], dtype=int)
    for c in range(x.shape[1]):
        edges = np.diff(np.concatenate(([0], flat[:, c].astype(np.int8), [0])))
        starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
        if len(starts):
            longest[c] = int(np.max(ends - starts))
    return longest


def _robust_z(values: np.ndarray) -> np.ndarray:
    median = np.median(values)
    mad = np.median(np.abs(values - median))
    # MAD is floored at a tenth of the median so near-identical channels never score
    scale = max(1.4826 * mad, 0.1 * abs(median), np.finfo(float).tiny)
    return (values - median) / scale


def _window_correlations(actual: np.ndarray, predicted: np.ndarray, win: int) -> np.ndarray:
    """Correlation per non-overlapping window and column; NaN-safe (0 when undefined)"""
    n_win = actual.shape[0] // win
    a = actual[:n_win * win].reshape(n_win, win, -1)
    p = predicted[:n_win * win].reshape(n_win, win, -1)
    a = a - a.mean(axis=1, keepdims=True)
    p = p - p.mean(axis=1, keepdims=True)
    num = np.sum(a * p, axis=1)
    den = np.sqrt(np.sum(a * a, axis=1) * np.sum(p * p, axis=1))
    with np.errstate(invalid='ignore', divide='ignore'):
        corr = np.where(den > 0, num / den, 0.0)
    return corr


def _max_neighbor_correlation(x: np.ndarray, win: int) -> np.ndarray:
    """Per window, each channel's largest |correlation| with any other channel"""
    n_win = x.shape[0] // win
    scores = np.zeros((n_win, x.shape[1]))
    for w in range(n_win):
        seg = x[w * win:(w + 1) * win]
        seg = seg - seg.mean(axis=0)
        norms = np.sqrt(np.sum(seg * seg, axis=0))
        with np.errstate(invalid='ignore', divide='ignore'):
            unit = np.where(norms > 0, seg / norms, 0.0)
        corr = np.abs(unit.T @ unit)
        np.fill_diagonal(corr, 0.0)
        scores[w] = corr.max(axis=1)
    return scores


def _ransac_correlation(x: np.ndarray, positions: np.ndarray, win: int,
                        n_subsets: int = 50, fraction: float = 0.25, seed: int = 0) -> np.ndarray:
    """Per window, correlation of each channel with its median spline prediction

    Each random subset of channels predicts every channel outside it; a
    channel's prediction is the median over the subsets that exclude it.
    """
    n_ch = x.shape[1]
    size = max(4, int(math.ceil(fraction * n_ch)))
    if size >= n_ch:
        return _max_neighbor_correlation(x, win)
    rng = np.random.default_rng(seed)
    subsets = [np.sort(rng.choice(n_ch, size=size, replace=False)) for _ in range(n_subsets)]
    matrices = []
    for subset in subsets:
        others = np.setdiff1d(np.arange(n_ch), subset)
        matrices.append((subset, others, spline_interpolation_matrix(positions[subset], positions[others])))

    n_win = x.shape[0] // win
    corr = np.zeros((n_win, n_ch))
    for w in range(n_win):
        seg = x[w * win:(w + 1) * win]
        stack = np.full((len(subsets), win, n_ch), np.nan)
        for s, (subset, others, matrix) in enumerate(matrices):
            stack[s][:, others] = seg[:, subset] @ matrix.T
        with np.errstate(all='ignore'):
            predicted = np.nanmedian(stack, axis=0)
        predicted = np.nan_to_num(predicted)
        corr[w] = _window_correlations(seg, predicted, win)[0]
    return corr


def find_bad_channels(rec: Recording, flat_s: float = 10.0, noise_z: float = 4.0,
                      corr_thr: float = 0.75, montage: Optional[Montage] = None,
                      seed: int = 0) -> Dict[str, List[str]]:
    """Bad scalp channels per rule: 'flat', 'noisy', 'uncorrelated'

    With a montage the correlation rule compares each channel against a
    RANSAC spline prediction from random channel subsets; without one it
    uses the channel's best correlation with any other channel.
    """
    scalp = rec.indices_with_role('scalp')
    if len(scalp) < 3:
        raise DataError(f"bad-channel detection needs >= 3 scalp channels, {rec.subject_id} has {len(scalp)}")
    names = [rec.channel_names[i] for i in scalp]
    x = rec.samples[:, scalp]

    flat = _longest_flat_run(x) >= flat_s * rec.fs

    numtaps = 2 * int(math.ceil(rec.fs / 5)) + 1
    if rec.n_samples > numtaps:
        lowpass = signal.firwin(numtaps, min(50.0, 0.4 * rec.fs), fs=rec.fs)
        residual = x - fir_filter(x, lowpass)
    else:
        residual = np.diff(x, axis=0)
    noisy = _robust_z(np.var(residual, axis=0)) > noise_z

    win = int(round(rec.fs))
    if rec.n_samples >= win:
        if montage is not None:
            corr = _ransac_correlation(x, montage.positions_for(names), win, seed=seed)
        else:
            corr = _max_neighbor_correlation(x, win)
        uncorrelated = np.mean(corr < corr_thr, axis=0) > 0.5
    else:
        uncorrelated = np.zeros(len(names), dtype=bool)

    return {
        'flat': [n for n, f in zip(names, flat) if f],
        'noisy': [n for n, f in zip(names, noisy) if f],
        'uncorrelated': [n for n, f in zip(names, uncorrelated) if f],
    }


def detect_bad_channels(rec: Recording, flat_s: float = 10.0, noise_z: float = 4.0,
                        corr_thr: float = 0.75, montage: Optional[Montage] = None,
                        seed: int = 0) -> List[str]:
    """Union of the three bad-channel rules, in recording channel order"""
    flagged = set()
    for names in find_bad_channels(rec, flat_s, noise_z, corr_thr, montage, seed).values():
        flagged.update(names)
    return [n for n in rec.channel_names if n in flagged]


# -- spherical splines ---------------------------------------------------

def _spline_coefficients(order: int = SPLINE_ORDER) -> np.ndarray:
    coeffs = [0.0]
    for n in range(1, SPLINE_MAX_TERMS + 1):
        term = (2 * n + 1) / (n * (n + 1)) ** order / (4 * math.pi)
        if term < SPLINE_TERM_TOL:
            break
        coeffs.append(term)
    return np.array(coeffs)


def _spline_g(cosines: np.ndarray) -> np.ndarray:
    return legendre.legval(np.clip(cosines, -1.0, 1.0), _spline_coefficients())


def spline_interpolation_matrix(from_pos: np.ndarray, to_pos: np.ndarray) -> np.ndarray:
    """Matrix mapping values at from_pos to spline estimates at to_pos

    Solves the spherical-spline system with the constant term and the
    zero-sum constraint, so constant fields are reproduced exactly.
    """
    n_from = len(from_pos)
    g_from = _spline_g(from_pos @ from_pos.T)
    g_to = _spline_g(to_pos @ from_pos.T)
    system = np.zeros((n_from + 1, n_from + 1))
    system[:n_from, :n_from] = g_from
    system[:n_from, n_from] = 1.0
    system[n_from, :n_from] = 1.0
    inverse = linalg.pinv(system)
    return np.hstack([g_to, np.ones((len(to_pos), 1))]) @ inverse[:, :n_from]


def interpolate_channels(rec: Recording, montage: Montage, bad: Sequence[str]) -> Recording:
    """Replace bad scalp channels by spherical-spline estimates from good ones"""
    bad = list(bad)
    if not bad:
        return rec
    scalp = rec.channels_with_role('scalp')
    not_scalp = [b for b in bad if b not in scalp]
    if not_scalp:
        raise DataError(f"only scalp channels can be interpolated, got {not_scalp}")
    good = [c for c in scalp if c not in bad]
    if len(good) < 4:
        raise DataError(f"{rec.subject_id}: {len(good)} good scalp channels left, need >= 4")

    matrix = spline_interpolation_matrix(montage.positions_for(good), montage.positions_for(bad))
    good_idx = [rec.channel_index(c) for c in good]
    bad_idx = [rec.channel_index(c) for c in bad]
    samples = np.array(rec.samples)
    samples[:, bad_idx] = samples[:, good_idx] @ matrix.T
    logger.info("interpolated %d channel(s) for %s: %s", len(bad), rec.subject_id, ', '.join(bad))
    return rec.with_samples(samples)


# -- artifact subspace reconstruction ------------------------------------

def asr_calibrate(baseline: Recording, window_s: float = 0.5) -> AsrModel:
    """Principal axes and windowed component RMS statistics of clean data"""
    if baseline.duration_s < 30.0:
        raise DataError(f"ASR calibration needs >= 30 s of data, got {baseline.duration_s:.1f} s")
    scalp = baseline.indices_with_role('scalp')
    x = baseline.samples[:, scalp]
    center = x.mean(axis=0)
    x = x - center

    eigvals, eigvecs = linalg.eigh(x.T @ x / len(x))
    order = np.argsort(eigvals)[::-1]
    mixing = eigvecs[:, order]
    # deterministic sign: largest-magnitude loading of each axis is positive
    signs = np.sign(mixing[np.argmax(np.abs(mixing), axis=0), np.arange(mixing.shape[1])])
    mixing = mixing * np.where(signs == 0, 1.0, signs)

    win = max(1, int(round(window_s * baseline.fs)))
    step = max(1, win // 2)
    components = x @ mixing
    starts = range(0, len(components) - win + 1, step)
    rms = np.array([np.sqrt(np.mean(components[s:s + win] ** 2, axis=0)) for s in starts])

    return AsrModel(
        mixing=mixing,
        center=center,
        rms_mean=rms.mean(axis=0),
        rms_std=rms.std(axis=0),
        window_s=window_s,
        channel_names=tuple(baseline.channel_names[i] for i in scalp),
    )


def asr_repair(rec: Recording, model: AsrModel, cutoff: float = 20.0) -> Tuple[Recording, int, int]:
    """asr_clean plus the number of repaired and total windows"""
    scalp = rec.indices_with_role('scalp')
    names = tuple(rec.channel_names[i] for i in scalp)
    if names != model.channel_names:
        raise DataError(f"{rec.subject_id}: scalp channels do not match the ASR calibration")

    thresholds = model.thresholds(cutoff)
    win = max(1, int(round(model.window_s * rec.fs)))
    x = rec.samples[:, scalp]
    cleaned = np.array(x)
    repaired = total = 0
    for start in range(0, len(x), win):
        total += 1
        components = (x[start:start + win] - model.center) @ model.mixing
        rms = np.sqrt(np.mean(components ** 2, axis=0))
        flagged = rms > thresholds
        if not flagged.any():
            continue
        repaired += 1
        components[:, flagged] = 0.0
        cleaned[start:start + win] = components @ model.mixing.T + model.center

    if repaired == 0:
        return rec, 0, total
    samples = np.array(rec.samples)
    samples[:, scalp] = cleaned
    logger.info("ASR repaired %d of %d windows for %s", repaired, total, rec.subject_id)
    return rec.with_samples(samples), repaired, total


def asr_clean(rec: Recording, model: AsrModel, cutoff: float = 20.0) -> Recording:
    """Remove components whose window RMS exceeds mean + cutoff*std of calibration"""
    return asr_repair(rec, model, cutoff)[0]


# -- EOG regression and referencing --------------------------------------

def fit_eog_weights(rec: Recording) -> np.ndarray:
    """Least-squares weights [n_eog x n_scalp] of scalp channels on EOG"""
    eog = rec.indices_with_role('eog')
    if len(eog) == 0:
        raise DataError(f"{rec.subject_id} has no EOG channels to regress out")
    scalp = rec.indices_with_role('scalp')
    weights, _, _, _ = linalg.lstsq(rec.samples[:, eog], rec.samples[:, scalp])
    return weights


def regress_out_eog(rec: Recording) -> Recording:
    """Scalp residuals after regressing every scalp channel on all EOG channels"""
    weights = fit_eog_weights(rec)
    eog = rec.indices_with_role('eog')
    scalp = rec.indices_with_role('scalp')
    samples = np.array(rec.samples)
    samples[:, scalp] = rec.samples[:, scalp] - rec.samples[:, eog] @ weights
    return rec.with_samples(samples)


def common_average_reference(rec: Recording) -> Recording:
    """Subtract the per-sample scalp mean from every scalp channel"""
    scalp = rec.indices_with_role('scalp')
    if len(scalp) < 2:
        raise DataError(f"common average reference needs >= 2 scalp channels, {rec.subject_id} has {len(scalp)}")
    samples = np.array(rec.samples)
    samples[:, scalp] -= samples[:, scalp].mean(axis=1, keepdims=True)
    return rec.with_samples(samples)


# -- full chain ----------------------------------------------------------

def preprocess_recording(rec: Recording, montage: Montage, cfg, baseline_label: str,
                         seed: int = 0) -> Tuple[Recording, PreprocessLog]:
    """Filter, repair bad channels, ASR, EOG regression, CAR

    cfg is a PreprocessConfig. ASR is calibrated on the baseline segment
    (or the whole recording when no baseline is annotated).
    """
    log = PreprocessLog(subject=rec.subject_id)
    kernel = design_bandpass_fir(cfg.bandpass_low, cfg.bandpass_high, rec.fs, cfg.transition_bw)
    rec = apply_filter_zero_phase(rec, kernel)

    rules = find_bad_channels(rec, cfg.flat_s, cfg.noise_z, cfg.corr_thr, montage, seed)
    log.bad_channels = rules
    bad = [n for n in rec.channel_names if any(n in names for names in rules.values())]
    if bad:
        rec = interpolate_channels(rec, montage, bad)
        log.interpolated = bad

    if cfg.asr:
        baseline = [a for a in rec.annotations if a.condition == baseline_label]
        if baseline:
            calibration = rec.crop(baseline[0].start_s, baseline[0].end_s)
        else:
            logger.warning("%s has no %r segment; calibrating ASR on the whole recording",
                           rec.subject_id, baseline_label)
            calibration = rec
        model = asr_calibrate(calibration, cfg.asr_window_s)
        rec, log.asr_repaired_windows, log.asr_total_windows = asr_repair(rec, model, cfg.asr_cutoff)

    if cfg.eog_regression and len(rec.indices_with_role('eog')):
        weights = fit_eog_weights(rec)
        rec = regress_out_eog(rec)
        log.eog_channels = rec.channels_with_role('eog')
        log.eog_weight_norm = float(np.linalg.norm(weights))

    if cfg.car:
        rec = common_average_reference(rec)
    return rec, log
