"""
Configuration
Process-level settings come from the environment (optionally a .env file);
analysis parameters come from a versioned JSON pipeline config whose
defaults are the standard decoding protocol.
"""
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from eegpipe.errors import ConfigError

load_dotenv()

PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
REPO_DIR = os.path.dirname(PACKAGE_DIR)


class Config:
    """Process configuration (never affects numerical results)"""

    LOG_LEVEL = os.getenv('EEGPIPE_LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.getenv('EEGPIPE_LOG_FORMAT', 'text')
    N_JOBS = int(os.getenv('EEGPIPE_N_JOBS', '1'))
    OUTPUT_DIR = os.getenv('EEGPIPE_OUTPUT_DIR', os.path.join(os.getcwd(), 'runs'))
    TEMPLATES_DIR = os.getenv('EEGPIPE_TEMPLATES_DIR', os.path.join(REPO_DIR, 'templates'))
    MONTAGE_FILE = os.getenv('EEGPIPE_MONTAGE_FILE', os.path.join(PACKAGE_DIR, 'data', 'montages.json'))


FORMAT_VERSION = 1

# 28 electrodes with uniform scalp coverage
DEFAULT_PDC_SUBSET = (
    'Fp1', 'Fp2',
    'F7', 'F3', 'Fz', 'F4', 'F8',
    'FC5', 'FC1', 'FC2', 'FC6',
    'T7', 'C3', 'Cz', 'C4', 'T8',
    'CP5', 'CP1', 'CP2', 'CP6',
    'P7', 'P3', 'Pz', 'P4', 'P8',
    'O1', 'Oz', 'O2',
)

DEFAULT_BANDS = (
    ('delta', 1.0, 4.0),
    ('theta', 4.0, 8.0),
    ('alpha', 8.0, 12.0),
    ('beta', 12.0, 30.0),
    ('gamma', 30.0, 40.0),
)


@dataclass(frozen=True)
class InputConfig:
    recordings_dir: Optional[str] = None
    synth_spec: Optional[str] = None
    montage: str = 'easycap57'
    behavior_csv: Optional[str] = None


@dataclass(frozen=True)
class PreprocessConfig:
    enabled: bool = True
    bandpass_low: float = 0.5
    bandpass_high: float = 50.0
    transition_bw: float = 0.5
    flat_s: float = 10.0
    noise_z: float = 4.0
    corr_thr: float = 0.75
    asr: bool = True
    asr_cutoff: float = 20.0
    asr_window_s: float = 0.5
    eog_regression: bool = True
    car: bool = True


@dataclass(frozen=True)
class FeaturesConfig:
    window_s: float = 4.0
    hop_s: float = 2.0
    span_s: float = 25.0
    baseline_label: str = 'rest_open'
    baseline_span_s: float = 60.0
    bands: Tuple[Tuple[str, float, float], ...] = DEFAULT_BANDS
    nw: float = 4.0
    n_tapers: int = 7
    bandpower: bool = True
    pdc: bool = True
    mvar_order: int = 15
    pdc_subset: Tuple[str, ...] = DEFAULT_PDC_SUBSET
    pdc_n_freqs: int = 64


@dataclass(frozen=True)
class SelectionConfig:
    alpha: float = 0.01
    # None: one comparison per feature column
    n_tests: Optional[int] = None


@dataclass(frozen=True)
class MlConfig:
    degree: int = 2
    coef0: float = 1.0
    C: float = 1.0
    tol: float = 1e-3
    max_iter: int = 200000
    n_per_class: int = 40
    sample_with_replacement: bool = False
    k_folds: int = 5
    inner_cv: bool = True
    n_features: int = 180
    sweep: bool = True
    sweep_max: int = 400
    sweep_schedule: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class ComparisonsConfig:
    reference: str = 'Neutral'
    alternatives: Optional[Tuple[str, ...]] = None
    tasks: Optional[Tuple[str, ...]] = None
    significance_levels: Tuple[float, ...] = (0.05, 0.01)


@dataclass(frozen=True)
class OutputsConfig:
    features_csv: bool = True
    plots: bool = True
    summary: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved analysis configuration (format_version 1)"""
    seed: int
    output_dir: str = 'runs/latest'
    format_version: int = FORMAT_VERSION
    input: InputConfig = field(default_factory=InputConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    ml: MlConfig = field(default_factory=MlConfig)
    comparisons: ComparisonsConfig = field(default_factory=ComparisonsConfig)
    outputs: OutputsConfig = field(default_factory=OutputsConfig)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PipelineConfig':
        if not isinstance(data, dict):
            raise ConfigError("pipeline config must be a JSON object")
        if 'seed' not in data:
            raise ConfigError("pipeline config is missing the mandatory 'seed'")
        version = data.get('format_version', FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported format_version {version} (expected {FORMAT_VERSION})")
        config = build_section(cls, data, '')
        config.validate()
        return config

    @classmethod
    def load(cls, path: str, overrides: Optional[List[str]] = None) -> 'PipelineConfig':
        """Load a JSON config file and apply section.key=value overrides"""
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        for item in overrides or []:
            apply_override(data, item)
        return cls.from_dict(data)

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        sources = [self.input.recordings_dir, self.input.synth_spec]
        if sum(s is not None for s in sources) != 1:
            raise ConfigError("input needs exactly one of recordings_dir or synth_spec")
        f = self.features
        if not (0 < f.window_s <= f.span_s) or f.hop_s <= 0:
            raise ConfigError("features: need 0 < window_s <= span_s and hop_s > 0")
        if not f.bandpower and not f.pdc:
            raise ConfigError("features: at least one of bandpower or pdc must be enabled")
        if not 0 < self.selection.alpha < 1:
            raise ConfigError("selection.alpha must be in (0, 1)")
        m = self.ml
        if m.C <= 0 or m.degree < 1 or m.k_folds < 2 or m.n_per_class < 1 or m.n_features < 1:
            raise ConfigError("ml: need C > 0, degree >= 1, k_folds >= 2, n_per_class >= 1, n_features >= 1")


def apply_override(data: Dict[str, Any], item: str) -> None:
    """Apply one 'a.b=value' override; value is parsed as JSON when possible"""
    if '=' not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, raw = item.split('=', 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    keys = dotted.split('.')
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {key} is not a section")
    node[keys[-1]] = value


def build_section(cls, data: Dict[str, Any], path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        section = fields[name].default_factory
        if section is not dataclasses.MISSING and dataclasses.is_dataclass(section):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + name} must be an object")
            kwargs[name] = build_section(section, value, f"{path}{name}.")
        else:
            kwargs[name] = _tupled(value)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid config section {path or '<root>'}: {e}") from None


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value
