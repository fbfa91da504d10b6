"""
Shared domain records
Immutable containers passed between pipeline stages. Arrays are stored
read-only so a record can be shared across threads without copying.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from eegpipe.errors import DataError

CHANNEL_ROLES = ('scalp', 'eog', 'other')
LABEL_COLUMNS = ['subject', 'condition', 'task', 'start_s']


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Annotation:
    """A labelled segment of a recording, in seconds"""
    start_s: float
    end_s: float
    condition: str
    task: str

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def to_dict(self) -> Dict:
        return {
            'start_s': self.start_s,
            'end_s': self.end_s,
            'condition': self.condition,
            'task': self.task,
        }


@dataclass(frozen=True, eq=False)
class Recording:
    """Multichannel EEG in volts, samples × channels"""
    samples: np.ndarray
    fs: float
    channel_names: Tuple[str, ...]
    channel_roles: Tuple[str, ...]
    subject_id: str
    annotations: Tuple[Annotation, ...] = ()

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 2:
            raise DataError(f"samples must be 2-D, got shape {samples.shape}")
        object.__setattr__(self, 'samples', _frozen_array(samples))
        object.__setattr__(self, 'channel_names', tuple(self.channel_names))
        object.__setattr__(self, 'channel_roles', tuple(self.channel_roles))
        object.__setattr__(self, 'annotations', tuple(self.annotations))

        if not self.fs > 0:
            raise DataError(f"sampling rate must be positive, got {self.fs}")
        n_channels = self.samples.shape[1]
        if len(self.channel_names) != n_channels or len(self.channel_roles) != n_channels:
            raise DataError(
                f"{n_channels} channels but {len(self.channel_names)} names and "
                f"{len(self.channel_roles)} roles"
            )
        if len(set(self.channel_names)) != n_channels:
            raise DataError("channel names must be unique")
        unknown = sorted(set(self.channel_roles) - set(CHANNEL_ROLES))
        if unknown:
            raise DataError(f"unknown channel role(s): {unknown}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"recording {self.subject_id} contains non-finite samples")
        duration = self.duration_s
        for ann in self.annotations:
            if ann.start_s < 0 or ann.end_s > duration + 1e-9 or ann.end_s <= ann.start_s:
                raise DataError(
                    f"annotation {ann.condition}/{ann.task} [{ann.start_s}, {ann.end_s}] "
                    f"outside recording of {duration:.3f} s"
                )

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs

    def channels_with_role(self, role: str) -> List[str]:
        return [n for n, r in zip(self.channel_names, self.channel_roles) if r == role]

    def indices_with_role(self, role: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.channel_roles) if r == role], dtype=int)

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise DataError(f"channel {name!r} not in recording {self.subject_id}") from None

    def with_samples(self, samples: np.ndarray) -> 'Recording':
        """Copy with new sample values and the same metadata"""
        return replace(self, samples=samples)

    def to_float32(self) -> 'Recording':
        """Copy with samples rounded to float32, the on-disk precision"""
        return self.with_samples(self.samples.astype(np.float32).astype(np.float64))

    def crop(self, start_s: float, end_s: float) -> 'Recording':
        """Sub-recording over [start_s, end_s); annotations are dropped"""
        i0 = int(round(start_s * self.fs))
        i1 = int(round(end_s * self.fs))
        return replace(self, samples=self.samples[i0:i1], annotations=())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.fs == other.fs
            and self.channel_names == other.channel_names
            and self.channel_roles == other.channel_roles
            and self.subject_id == other.subject_id
            and self.annotations == other.annotations
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples.view(np.uint64), other.samples.view(np.uint64))
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Montage:
    """Named electrode positions on the unit sphere"""
    name: str
    channel_names: Tuple[str, ...]
    positions: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        object.__setattr__(self, 'channel_names', tuple(self.channel_names))
        if positions.shape != (len(self.channel_names), 3):
            raise DataError(f"montage {self.name}: positions shape {positions.shape}")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise DataError(f"montage {self.name}: duplicate channel names")
        norms = np.linalg.norm(positions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise DataError(f"montage {self.name}: positions are not unit vectors")
        object.__setattr__(self, 'positions', _frozen_array(positions))

    def __contains__(self, name: str) -> bool:
        return name in self.channel_names

    def positions_for(self, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.channel_names]
        if missing:
            raise DataError(f"channel(s) {missing} missing from montage {self.name}")
        index = {n: i for i, n in enumerate(self.channel_names)}
        return self.positions[[index[n] for n in names]]


@dataclass(frozen=True, eq=False)
class Window:
    """One fixed-length epoch cut from an annotated segment"""
    subject: str
    condition: str
    task: str
    start_s: float
    data: np.ndarray
    fs: float
    channel_names: Tuple[str, ...]
    channel_roles: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, 'data', _frozen_array(self.data))
        object.__setattr__(self, 'channel_names', tuple(self.channel_names))
        object.__setattr__(self, 'channel_roles', tuple(self.channel_roles))

    @property
    def scalp_names(self) -> List[str]:
        return [n for n, r in zip(self.channel_names, self.channel_roles) if r == 'scalp']


@dataclass(frozen=True)
class FrequencyBand:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not (0 <= self.lo < self.hi):
            raise DataError(f"band {self.name}: need 0 <= lo < hi, got [{self.lo}, {self.hi}]")

    def to_dict(self) -> Dict:
        return {'name': self.name, 'lo': self.lo, 'hi': self.hi}


CANONICAL_BANDS = (
    FrequencyBand('delta', 1.0, 4.0),
    FrequencyBand('theta', 4.0, 8.0),
    FrequencyBand('alpha', 8.0, 12.0),
    FrequencyBand('beta', 12.0, 30.0),
    FrequencyBand('gamma', 30.0, 40.0),
)


@dataclass(frozen=True)
class FeatureDescriptor:
    """What a feature column measures

    kind is 'bandpower' (channels = (channel,)) or 'pdc'
    (channels = (source, sink)).
    """
    kind: str
    channels: Tuple[str, ...]
    band: str

    def __str__(self) -> str:
        if self.kind == 'bandpower':
            return f"bp:{self.channels[0]}:{self.band}"
        return f"pdc:{self.channels[0]}->{self.channels[1]}:{self.band}"

    @classmethod
    def parse(cls, text: str) -> 'FeatureDescriptor':
        try:
            prefix, body, band = text.split(':')
        except ValueError:
            raise DataError(f"malformed feature descriptor {text!r}") from None
        if prefix == 'bp':
            return cls('bandpower', (body,), band)
        if prefix == 'pdc' and '->' in body:
            source, sink = body.split('->')
            return cls('pdc', (source, sink), band)
        raise DataError(f"malformed feature descriptor {text!r}")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Windows × features with per-window labels

    labels is a DataFrame with columns subject, condition, task, start_s,
    one row per window in the same order as values.
    """
    values: np.ndarray
    descriptors: Tuple[FeatureDescriptor, ...]
    labels: pd.DataFrame

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DataError(f"feature values must be 2-D, got shape {values.shape}")
        object.__setattr__(self, 'values', _frozen_array(values))
        object.__setattr__(self, 'descriptors', tuple(self.descriptors))
        labels = self.labels.reset_index(drop=True)[LABEL_COLUMNS].copy()
        object.__setattr__(self, 'labels', labels)
        if len(self.descriptors) != values.shape[1]:
            raise DataError(f"{values.shape[1]} columns but {len(self.descriptors)} descriptors")
        if len(labels) != values.shape[0]:
            raise DataError(f"{values.shape[0]} rows but {len(labels)} label rows")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def descriptor_strings(self) -> List[str]:
        return [str(d) for d in self.descriptors]

    def column(self, descriptor) -> np.ndarray:
        key = str(descriptor)
        try:
            return self.values[:, self.descriptor_strings.index(key)]
        except ValueError:
            raise DataError(f"feature {key} not in matrix") from None

    def select_rows(self, mask) -> 'FeatureMatrix':
        mask = np.asarray(mask)
        return FeatureMatrix(self.values[mask], self.descriptors, self.labels.iloc[mask])

    def select_columns(self, descriptors: Iterable) -> 'FeatureMatrix':
        index = {s: i for i, s in enumerate(self.descriptor_strings)}
        keys = [str(d) for d in descriptors]
        missing = [k for k in keys if k not in index]
        if missing:
            raise DataError(f"feature(s) not in matrix: {missing[:5]}")
        cols = [index[k] for k in keys]
        return FeatureMatrix(self.values[:, cols], [self.descriptors[c] for c in cols], self.labels)

    def with_values(self, values: np.ndarray) -> 'FeatureMatrix':
        return FeatureMatrix(values, self.descriptors, self.labels)

    def with_labels(self, labels: pd.DataFrame) -> 'FeatureMatrix':
        return FeatureMatrix(self.values, self.descriptors, labels)

    def hstack(self, other: 'FeatureMatrix') -> 'FeatureMatrix':
        """Join column blocks computed from the same windows"""
        if not self.labels.equals(other.labels):
            raise DataError("cannot join feature blocks computed from different windows")
        return FeatureMatrix(
            np.hstack([self.values, other.values]),
            self.descriptors + other.descriptors,
            self.labels,
        )

    @staticmethod
    def vstack(blocks: Sequence['FeatureMatrix']) -> 'FeatureMatrix':
        if not blocks:
            raise DataError("no feature blocks to stack")
        first = blocks[0].descriptor_strings
        for block in blocks[1:]:
            if block.descriptor_strings != first:
                raise DataError("cannot stack feature blocks with different columns")
        return FeatureMatrix(
            np.vstack([b.values for b in blocks]),
            blocks[0].descriptors,
            pd.concat([b.labels for b in blocks], ignore_index=True),
        )


@dataclass(frozen=True)
class BehavioralRecord:
    subject: str
    condition: str
    task: str
    n_correct: int
    n_submitted: int
    duration_s: float

    def __post_init__(self):
        if not (0 <= self.n_correct <= self.n_submitted):
            raise DataError(
                f"{self.subject}/{self.condition}/{self.task}: need 0 <= n_correct <= n_submitted"
            )
        if not self.duration_s > 0:
            raise DataError(f"{self.subject}/{self.condition}/{self.task}: duration must be positive")


@dataclass(frozen=True)
class TestResult:
    """Kruskal-Wallis outcome"""
    statistic: float
    p_value: float
    group_sizes: Tuple[int, ...] = field(default=())

    __test__ = False  # not a pytest class

    def to_dict(self) -> Dict:
        return {
            'H': self.statistic,
            'p': self.p_value,
            'group_sizes': list(self.group_sizes),
        }
