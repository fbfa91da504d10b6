"""
Synthetic studies
Seeded multi-subject recordings with planted ground truth: spatially
smooth pink-noise background, EOG leakage, band-power effects and
directed links driven by a bivariate VAR, all keyed to annotated
condition/task segments.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import fft, optimize

from eegpipe.config import build_section
from eegpipe.connectivity import MvarModel, companion_radius, pdc
from eegpipe.errors import ConfigError, DataError
from eegpipe.models import CANONICAL_BANDS, Annotation, FrequencyBand, Montage, Recording
from eegpipe.preprocess import design_bandpass_fir, fir_filter
from eegpipe.seeding import STREAM_BEHAVIOR, derive_rng, derive_seed
from eegpipe.signal_io import save_recording, standard_montage

logger = logging.getLogger(__name__)

EFFECT_KINDS = ('bandpower', 'pdc_link')
REST_TASK = 'rest'
BURN_IN = 1000
SOURCE_WIDTH = 0.5
SOURCE_POLE_RADIUS = 0.9
BANDS_BY_NAME = {b.name: b for b in CANONICAL_BANDS}


@dataclass(frozen=True)
class PlantedEffect:
    """A ground-truth difference present only in one condition

    bandpower: channels are the targets; band power there changes by
    effect_size (relative). pdc_link: channels are (source, sink); the
    band-mean analytic PDC of the link changes by effect_size (relative).
    """
    kind: str
    channels: Tuple[str, ...]
    band: str
    effect_size: float
    condition: str
    tasks: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, 'channels', tuple(self.channels))
        if self.tasks is not None:
            object.__setattr__(self, 'tasks', tuple(self.tasks))
        if self.kind not in EFFECT_KINDS:
            raise ConfigError(f"unknown effect kind {self.kind!r}; expected one of {EFFECT_KINDS}")
        if self.band not in BANDS_BY_NAME:
            raise ConfigError(f"unknown band {self.band!r}; expected one of {sorted(BANDS_BY_NAME)}")
        if not self.effect_size > -1:
            raise ConfigError(f"effect size must be > -1, got {self.effect_size}")
        if self.kind == 'pdc_link' and (len(self.channels) != 2 or self.channels[0] == self.channels[1]):
            raise ConfigError("pdc_link effects need two distinct channels (source, sink)")
        if self.kind == 'bandpower' and not self.channels:
            raise ConfigError("bandpower effects need at least one target channel")

    @property
    def frequency_band(self) -> FrequencyBand:
        return BANDS_BY_NAME[self.band]

    def applies_to(self, condition: str, task: str) -> bool:
        return condition == self.condition and (self.tasks is None or task in self.tasks)

    def feature_descriptors(self) -> List[str]:
        if self.kind == 'bandpower':
            return [f"bp:{ch}:{self.band}" for ch in self.channels]
        return [f"pdc:{self.channels[0]}->{self.channels[1]}:{self.band}"]


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    n_subjects: int = 23
    fs: float = 500.0
    montage: str = 'easycap57'
    channels: Optional[Tuple[str, ...]] = None
    eog_channels: Tuple[str, ...] = ('HEOG_L', 'HEOG_R', 'VEOG_U', 'VEOG_L')
    conditions: Tuple[str, ...] = ('Neutral', 'One-Window', 'Two-Windows', 'Wide')
    tasks: Tuple[str, ...] = ('Stroop', 'Digit Span', 'Benton', 'Visual Memory', 'Arithmetic')
    segment_s: float = 25.0
    baseline_s: float = 60.0
    closed_rest_s: float = 60.0
    baseline_label: str = 'rest_open'
    effects: Tuple[PlantedEffect, ...] = ()
    jitter: float = 0.2
    background_rms: float = 1e-5
    noise_floor: float = 5e-7
    n_sources: int = 12
    eog_rms: float = 5e-5
    link_coupling: float = 0.01
    link_rms_ratio: float = 0.5
    burst_rate_per_min: float = 0.0
    emit_behavior: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'effects', tuple(
            e if isinstance(e, PlantedEffect) else PlantedEffect(**e) for e in self.effects
        ))
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"synth seed must be a non-negative integer, got {self.seed!r}")
        if self.n_subjects < 1 or self.fs <= 0:
            raise ConfigError("synth spec needs n_subjects >= 1 and fs > 0")
        if self.segment_s <= 0 or self.baseline_s < 0 or self.closed_rest_s < 0:
            raise ConfigError("synth segment durations must be positive")
        if not self.conditions or not self.tasks:
            raise ConfigError("synth spec needs at least one condition and one task")
        for effect in self.effects:
            if effect.condition not in self.conditions:
                raise ConfigError(f"effect condition {effect.condition!r} is not a spec condition")
            unknown = [t for t in effect.tasks or () if t not in self.tasks]
            if unknown:
                raise ConfigError(f"effect task(s) {unknown} are not spec tasks")
            if effect.frequency_band.hi >= self.fs / 2:
                raise ConfigError(f"effect band {effect.band} exceeds Nyquist at fs={self.fs:g}")

    @classmethod
    def from_dict(cls, data: Dict) -> 'SynthSpec':
        if 'seed' not in data:
            raise ConfigError("synth spec is missing the mandatory 'seed'")
        data = dict(data)
        effects = []
        for i, item in enumerate(data.pop('effects', [])):
            effects.append(build_section(PlantedEffect, item, f"effects[{i}]."))
        spec = build_section(cls, data, '')
        return spec.with_effects(effects)

    @classmethod
    def load(cls, path: str) -> 'SynthSpec':
        if not os.path.exists(path):
            raise ConfigError(f"synth spec not found: {path}")
        try:
            with open(path, 'r') as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"synth spec {path} is not valid JSON: {e}") from None

    def with_effects(self, effects: Sequence[PlantedEffect]) -> 'SynthSpec':
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values['effects'] = tuple(effects)
        return SynthSpec(**values)

    def to_dict(self) -> Dict:
        return json.loads(json.dumps(asdict(self)))

    def segments(self) -> List[Annotation]:
        """Session layout: eyes-open rest, eyes-closed rest, then task x condition blocks"""
        layout = [(self.baseline_label, REST_TASK, self.baseline_s), ('rest_closed', REST_TASK, self.closed_rest_s)]
        layout += [(c, t, self.segment_s) for t in self.tasks for c in self.conditions]
        annotations, start = [], 0.0
        for condition, task, duration in layout:
            if duration > 0:
                annotations.append(Annotation(start, start + duration, condition, task))
                start += duration
        return annotations


# -- primitive generators ------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def gen_var_process(coefficients: np.ndarray, noise_cov: np.ndarray, n: int, seed,
                    burn_in: int = BURN_IN) -> np.ndarray:
    """Gaussian-innovation VAR simulation, [n x m], burn-in discarded"""
    coefficients = np.asarray(coefficients, dtype=float)
    if coefficients.ndim == 2:
        coefficients = coefficients[np.newaxis]
    p, m, _ = coefficients.shape
    radius = companion_radius(coefficients)
    if radius >= 1.0:
        raise DataError(f"unstable VAR coefficients (companion spectral radius {radius:.4f})")
    try:
        chol = np.linalg.cholesky(np.asarray(noise_cov, dtype=float))
    except np.linalg.LinAlgError:
        raise DataError("VAR innovation covariance is not positive definite") from None

    rng = _rng(seed)
    innovations = rng.standard_normal((n + burn_in, m)) @ chol.T
    stacked = np.hstack(list(coefficients))
    out = np.zeros((n + burn_in + p, m))
    for t in range(p, n + burn_in + p):
        history = out[t - p:t][::-1].ravel()
        out[t] = stacked @ history + innovations[t - p]
    return out[p + burn_in:]


def gen_oscillation(band: FrequencyBand, amplitude: float, duration_s: float, fs: float, seed) -> np.ndarray:
    """Band-limited noise with RMS equal to amplitude"""
    if not (0 < band.lo < band.hi < fs / 2):
        raise DataError(f"band {band.name} [{band.lo}, {band.hi}] must lie inside (0, {fs / 2:g}) Hz")
    n = int(round(duration_s * fs))
    if amplitude == 0 or n == 0:
        return np.zeros(n)
    kernel = design_bandpass_fir(band.lo, band.hi, fs, min(1.0, band.hi - band.lo))
    pad = kernel.length
    white = _rng(seed).standard_normal(n + 2 * pad)
    narrow = fir_filter(white, kernel.taps)[pad:pad + n]
    return narrow * (amplitude / np.sqrt(np.mean(narrow ** 2)))


def gen_pink_noise(n: int, n_channels: int, seed, exponent: float = 1.0) -> np.ndarray:
    """Unit-variance 1/f^exponent noise per column"""
    rng = _rng(seed)
    spectrum = fft.rfft(rng.standard_normal((n, n_channels)), axis=0)
    freqs = fft.rfftfreq(n)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-exponent / 2)
    shaped = fft.irfft(spectrum * scale[:, np.newaxis], n=n, axis=0)
    shaped -= shaped.mean(axis=0)
    return shaped / shaped.std(axis=0)


def _source_positions(n_sources: int) -> np.ndarray:
    """Fibonacci points on the upper hemisphere"""
    k = np.arange(n_sources) + 0.5
    z = 1.0 - k / n_sources
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(1.0 - z ** 2)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


# -- directed links ------------------------------------------------------

def link_model(band: FrequencyBand, coupling: float, fs: float) -> MvarModel:
    """Bivariate VAR(2): resonant source at the band centre driving the sink at lag 1"""
    centre = 2 * math.pi * (band.lo + band.hi) / 2 / fs
    r = SOURCE_POLE_RADIUS
    coefficients = np.zeros((2, 2, 2))
    coefficients[0, 0, 0] = 2 * r * math.cos(centre)
    coefficients[1, 0, 0] = -r * r
    coefficients[0, 1, 0] = coupling
    return MvarModel(coefficients, np.eye(2), fs, ('source', 'sink'))


def link_band_pdc(band: FrequencyBand, coupling: float, fs: float, n_freqs: int = 64) -> float:
    """Band-mean analytic PDC sink <- source of link_model"""
    grid = np.linspace(band.lo, band.hi, n_freqs)
    return float(pdc(link_model(band, coupling, fs), grid).values[1, 0].mean())


def coupling_for_change(band: FrequencyBand, base: float, relative_change: float, fs: float) -> float:
    """Coupling whose band-mean PDC is (1 + relative_change) x that of base"""
    target = (1.0 + relative_change) * link_band_pdc(band, base, fs)
    upper = max(10.0, 100.0 * base)
    ceiling = link_band_pdc(band, upper, fs)
    if target >= ceiling:
        logger.warning("PDC change %.2f not reachable for band %s; using coupling %g",
                       relative_change, band.name, upper)
        return upper
    return float(optimize.brentq(lambda c: link_band_pdc(band, c, fs) - target, 0.0, upper, xtol=1e-12))


def _ar2_variance(a1: float, a2: float) -> float:
    return (1 - a2) / ((1 + a2) * ((1 - a2) ** 2 - a1 ** 2))


# -- study generation ----------------------------------------------------

def _channel_layout(spec: SynthSpec, montage: Montage) -> Tuple[List[str], List[str]]:
    scalp = list(spec.channels) if spec.channels is not None else list(montage.channel_names)
    missing = [c for c in scalp if c not in montage]
    if missing:
        raise DataError(f"synth channel(s) {missing} not in montage {montage.name}")
    for effect in spec.effects:
        absent = [c for c in effect.channels if c not in scalp]
        if absent:
            raise DataError(f"effect channel(s) {absent} not among the generated scalp channels")
    names = scalp + list(spec.eog_channels)
    roles = ['scalp'] * len(scalp) + ['eog'] * len(spec.eog_channels)
    return names, roles


def _blinks(n: int, fs: float, rng: np.random.Generator, rate_per_min: float = 15.0) -> np.ndarray:
    out = np.zeros(n)
    count = rng.poisson(rate_per_min * n / fs / 60.0)
    t = np.arange(n) / fs
    for centre in np.sort(rng.uniform(0, n / fs, count)):
        lo, hi = int(max(0, (centre - 0.5) * fs)), int(min(n, (centre + 0.5) * fs))
        out[lo:hi] += np.exp(-0.5 * ((t[lo:hi] - centre) / 0.05) ** 2)
    return out


def _effect_factor(effect: PlantedEffect, jitter: float) -> float:
    return max(effect.effect_size * jitter, -0.95)


def gen_subject(spec: SynthSpec, index: int, montage: Optional[Montage] = None) -> Tuple[Recording, Dict]:
    """One subject's recording and its per-subject ground truth"""
    montage = montage or standard_montage(spec.montage)
    names, roles = _channel_layout(spec, montage)
    scalp = [n for n, r in zip(names, roles) if r == 'scalp']
    positions = montage.positions_for(scalp)
    annotations = spec.segments()
    fs = spec.fs
    n = int(round(annotations[-1].end_s * fs))
    rng = derive_rng(spec.seed, index)
    jitter = float(rng.lognormal(0.0, spec.jitter)) if spec.jitter > 0 else 1.0

    sources = _source_positions(spec.n_sources)
    distance2 = np.sum((positions[:, np.newaxis] - sources[np.newaxis]) ** 2, axis=2)
    mixing = np.exp(-distance2 / (2 * SOURCE_WIDTH ** 2))
    x = gen_pink_noise(n, spec.n_sources, rng) @ mixing.T
    x *= spec.background_rms / x.std(axis=0)

    horizontal = gen_pink_noise(n, 1, rng, exponent=2.0)[:, 0]
    vertical = gen_pink_noise(n, 1, rng, exponent=2.0)[:, 0] + 4.0 * _blinks(n, fs, rng)
    vertical /= vertical.std()
    nasion = np.array([1.0, 0.0, 0.0])
    frontal = np.exp(-np.sum((positions - nasion) ** 2, axis=1) / 0.5)
    x += spec.eog_rms * (np.outer(vertical, 0.2 * frontal) + np.outer(horizontal, 0.1 * frontal * positions[:, 1]))
    eog = spec.eog_rms * np.column_stack([horizontal, -horizontal, vertical, -0.3 * vertical])[:, :len(spec.eog_channels)]

    truth_effects = []
    for effect in spec.effects:
        band = effect.frequency_band
        factor = _effect_factor(effect, jitter)
        if effect.kind == 'bandpower':
            kernel = design_bandpass_fir(band.lo, band.hi, fs, min(1.0, band.hi - band.lo))
            cols = [scalp.index(c) for c in effect.channels]
            gain = math.sqrt(1.0 + factor) - 1.0
            for ann in annotations:
                if effect.applies_to(ann.condition, ann.task):
                    i0, i1 = int(round(ann.start_s * fs)), int(round(ann.end_s * fs))
                    x[i0:i1, cols] += gain * fir_filter(x[i0:i1, cols], kernel.taps)
        else:
            src, sink = (scalp.index(c) for c in effect.channels)
            base = link_model(band, spec.link_coupling, fs)
            strong = coupling_for_change(band, spec.link_coupling, factor, fs)
            a1, a2 = base.coefficients[0, 0, 0], base.coefficients[1, 0, 0]
            src_var = _ar2_variance(a1, a2)
            target = spec.link_rms_ratio * spec.background_rms
            scale = np.array([target / math.sqrt(src_var), target / math.sqrt(1 + spec.link_coupling ** 2 * src_var)])
            for ann in annotations:
                coupling = strong if effect.applies_to(ann.condition, ann.task) else spec.link_coupling
                model = link_model(band, coupling, fs)
                i0, i1 = int(round(ann.start_s * fs)), int(round(ann.end_s * fs))
                drive = gen_var_process(model.coefficients, model.noise_cov, i1 - i0, rng)
                x[i0:i1, src] += scale[0] * drive[:, 0]
                x[i0:i1, sink] += scale[1] * drive[:, 1]
        truth_effects.append({'effect': asdict(effect), 'applied_change': factor})

    if spec.burst_rate_per_min > 0:
        width = int(round(0.2 * fs))
        for _ in range(rng.poisson(spec.burst_rate_per_min * n / fs / 60.0)):
            start = int(rng.integers(0, max(1, n - width)))
            cols = rng.choice(len(scalp), size=min(3, len(scalp)), replace=False)
            x[start:start + width, cols] += 50 * spec.background_rms * rng.standard_normal((width, len(cols)))

    samples = np.hstack([x, eog])
    samples += spec.noise_floor * rng.standard_normal(samples.shape)
    rec = Recording(samples, fs, names, roles, f"S{index + 1:02d}", annotations).to_float32()
    return rec, {'subject': rec.subject_id, 'jitter': jitter, 'effects': truth_effects}


def gen_behavior(spec: SynthSpec) -> pd.DataFrame:
    """Behavioral table without any planted condition effect"""
    rng_seed = derive_seed(spec.seed, STREAM_BEHAVIOR)
    rows = []
    for index in range(spec.n_subjects):
        rng = derive_rng(rng_seed, index)
        for task in spec.tasks:
            for condition in spec.conditions:
                submitted = int(rng.integers(15, 31))
                rows.append({
                    'subject': f"S{index + 1:02d}",
                    'condition': condition,
                    'task': task,
                    'n_correct': int(rng.binomial(submitted, 0.8)),
                    'n_submitted': submitted,
                    'duration_s': round(float(rng.uniform(30.0, 120.0)), 3),
                })
    return pd.DataFrame(rows)


def ground_truth(spec: SynthSpec, per_subject: List[Dict]) -> Dict:
    return {
        'seed': spec.seed,
        'n_subjects': spec.n_subjects,
        'planted': [
            {
                'kind': e.kind,
                'features': e.feature_descriptors(),
                'condition': e.condition,
                'tasks': list(e.tasks) if e.tasks is not None else None,
                'effect_size': e.effect_size,
                'expected_sign': int(np.sign(e.effect_size)),
            }
            for e in spec.effects
        ],
        'subjects': per_subject,
    }


def gen_study(spec: SynthSpec) -> Tuple[List[Recording], Dict]:
    """Every subject's recording plus the ground-truth manifest"""
    montage = standard_montage(spec.montage)
    recordings, per_subject = [], []
    for index in range(spec.n_subjects):
        rec, truth = gen_subject(spec, index, montage)
        recordings.append(rec)
        per_subject.append(truth)
    logger.info("generated %d synthetic subjects (%d planted effects)", spec.n_subjects, len(spec.effects))
    return recordings, ground_truth(spec, per_subject)


def write_study(spec: SynthSpec, directory: str) -> Dict:
    """Generate and save recordings, ground truth and (optionally) behavior.csv"""
    montage = standard_montage(spec.montage)
    per_subject = []
    os.makedirs(directory, exist_ok=True)
    for index in range(spec.n_subjects):
        rec, truth = gen_subject(spec, index, montage)
        save_recording(rec, directory)
        per_subject.append(truth)
    truth = ground_truth(spec, per_subject)
    with open(os.path.join(directory, '_ground_truth.json'), 'w') as f:
        json.dump(truth, f, indent=2, sort_keys=True)
    with open(os.path.join(directory, '_synth_spec.json'), 'w') as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
    if spec.emit_behavior:
        gen_behavior(spec).to_csv(os.path.join(directory, 'behavior.csv'), index=False, lineterminator='\n')
    logger.info("wrote %d synthetic recordings to %s", spec.n_subjects, directory)
    return truth
