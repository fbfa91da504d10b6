"""
Recording and dataset IO
A recording on disk is a JSON manifest next to a raw little-endian binary
(sample-major: s0c0, s0c1, ..., s1c0, ...). Montages are bundled data.
"""
import json
import logging
import math
import os
from functools import lru_cache
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from eegpipe.config import Config
from eegpipe.errors import ConfigError, DataError
from eegpipe.models import (
    CHANNEL_ROLES, LABEL_COLUMNS, Annotation, FeatureDescriptor, FeatureMatrix,
    Montage, Recording, Window,
)

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DTYPES = {'float32': '<f4'}


def load_recording(manifest_path: str) -> Recording:
    """Load a recording from its JSON manifest"""
    if not os.path.exists(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        with open(manifest_path, 'r') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {e}") from None

    required = ['fs', 'n_samples', 'channel_names', 'channel_roles', 'data_file']
    missing = [k for k in required if k not in manifest]
    if missing:
        raise DataError(f"manifest {manifest_path} lacks field(s): {missing}")
    if manifest.get('format_version', MANIFEST_VERSION) != MANIFEST_VERSION:
        raise DataError(f"manifest {manifest_path}: unsupported format_version")

    roles = list(manifest['channel_roles'])
    unknown = sorted(set(roles) - set(CHANNEL_ROLES))
    if unknown:
        raise DataError(f"manifest {manifest_path}: unknown channel role(s) {unknown}")

    dtype_name = manifest.get('dtype', 'float32')
    if dtype_name not in DTYPES:
        raise DataError(f"manifest {manifest_path}: unsupported dtype {dtype_name!r}")
    dtype = np.dtype(DTYPES[dtype_name])

    data_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), manifest['data_file'])
    if not os.path.exists(data_path):
        raise DataError(f"data file not found: {data_path}")

    n_samples = int(manifest['n_samples'])
    n_channels = len(manifest['channel_names'])
    expected = dtype.itemsize * n_samples * n_channels
    actual = os.path.getsize(data_path)
    if actual != expected:
        raise DataError(
            f"{data_path}: {actual} bytes but manifest declares {n_samples} x {n_channels} "
            f"{dtype_name} ({expected} bytes)"
        )

    raw = np.fromfile(data_path, dtype=dtype).reshape(n_samples, n_channels)
    if not np.all(np.isfinite(raw)):
        raise DataError(f"{data_path} contains non-finite samples")
    scale = float(manifest.get('scale', 1.0))
    samples = raw.astype(np.float64)
    if scale != 1.0:
        samples = samples * scale

    annotations = [
        Annotation(float(a['start_s']), float(a['end_s']), str(a['condition']), str(a['task']))
        for a in manifest.get('annotations', [])
    ]
    rec = Recording(
        samples=samples,
        fs=float(manifest['fs']),
        channel_names=manifest['channel_names'],
        channel_roles=roles,
        subject_id=str(manifest.get('subject_id', os.path.splitext(os.path.basename(manifest_path))[0])),
        annotations=annotations,
    )
    logger.debug("loaded %s: %d samples x %d channels at %g Hz",
                 rec.subject_id, rec.n_samples, rec.n_channels, rec.fs)
    return rec


def save_recording(rec: Recording, directory: str) -> str:
    """Write manifest + float32 binary; returns the manifest path

    Samples must already be float32-exact (see Recording.to_float32), so
    loading the files back reproduces rec bit for bit.
    """
    if not np.array_equal(rec.samples.astype(np.float32).astype(np.float64), rec.samples):
        raise DataError(
            f"recording {rec.subject_id} has samples that float32 cannot hold exactly; "
            f"round them with to_float32() before saving"
        )
    dtype_name = 'float32'
    stem = _safe_stem(rec.subject_id)
    data_file = f"{stem}.f32"
    manifest = {
        'format_version': MANIFEST_VERSION,
        'subject_id': rec.subject_id,
        'fs': rec.fs,
        'n_samples': rec.n_samples,
        'channel_names': list(rec.channel_names),
        'channel_roles': list(rec.channel_roles),
        'annotations': [a.to_dict() for a in rec.annotations],
        'data_file': data_file,
        'dtype': dtype_name,
        'scale': 1.0,
    }
    manifest_path = os.path.join(directory, f"{stem}.json")
    try:
        os.makedirs(directory, exist_ok=True)
        np.ascontiguousarray(rec.samples, dtype=DTYPES[dtype_name]).tofile(os.path.join(directory, data_file))
        with open(manifest_path, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    except OSError as e:
        raise DataError(f"cannot write recording {rec.subject_id} to {directory}: {e}") from None
    return manifest_path


def load_recordings_dir(directory: str) -> List[Recording]:
    """Load every manifest in a directory, ordered by file name"""
    if not os.path.isdir(directory):
        raise DataError(f"recordings directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.endswith('.json') and not n.startswith('_'))
    if not names:
        raise DataError(f"no recording manifests in {directory}")
    return [load_recording(os.path.join(directory, n)) for n in names]


@lru_cache(maxsize=None)
def _montage_file(path: str) -> Dict:
    with open(path, 'r') as f:
        return json.load(f)


def standard_montage(layout: str, montage_file: Optional[str] = None) -> Montage:
    """Bundled electrode layout by name"""
    data = _montage_file(montage_file or Config.MONTAGE_FILE)
    layouts = data['layouts']
    if layout not in layouts:
        raise ConfigError(f"unknown montage {layout!r}; bundled: {sorted(layouts)}")
    names, positions = [], []
    for name, inclination, azimuth in layouts[layout]['channels']:
        theta, phi = math.radians(inclination), math.radians(azimuth)
        names.append(name)
        positions.append([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
    positions = np.array(positions)
    positions /= np.linalg.norm(positions, axis=1, keepdims=True)
    return Montage(layout, names, positions)


def window_count(span_s: float, window_s: float, hop_s: float) -> int:
    """floor((span - window) / hop) + 1, tolerant to float round-off"""
    return int(math.floor((span_s - window_s) / hop_s + 1e-9)) + 1


def segment_windows(rec: Recording, window_s: float, hop_s: float, span_s: float,
                    conditions: Optional[Iterable[str]] = None) -> List[Window]:
    """Cut fixed-length windows from the start of each annotated segment

    Windows start at segment_start + k*hop_s and must lie inside the first
    min(span_s, segment length) seconds. conditions restricts the segments
    used.
    """
    if hop_s <= 0:
        raise DataError(f"hop must be positive, got {hop_s}")
    if not 0 < window_s <= span_s:
        raise DataError(f"need 0 < window_s <= span_s, got {window_s} and {span_s}")
    wanted = None if conditions is None else set(conditions)
    win_samples = int(round(window_s * rec.fs))

    windows = []
    for ann in rec.annotations:
        if wanted is not None and ann.condition not in wanted:
            continue
        if ann.duration_s + 1e-9 < window_s:
            raise DataError(
                f"{rec.subject_id} {ann.condition}/{ann.task}: segment of {ann.duration_s:g} s "
                f"is shorter than the {window_s:g} s window"
            )
        usable = min(span_s, ann.duration_s)
        for k in range(window_count(usable, window_s, hop_s)):
            start_s = ann.start_s + k * hop_s
            i0 = int(round(start_s * rec.fs))
            if i0 + win_samples > rec.n_samples:
                raise DataError(f"{rec.subject_id}: window at {start_s:g} s runs past the recording")
            windows.append(Window(
                subject=rec.subject_id,
                condition=ann.condition,
                task=ann.task,
                start_s=start_s,
                data=rec.samples[i0:i0 + win_samples],
                fs=rec.fs,
                channel_names=rec.channel_names,
                channel_roles=rec.channel_roles,
            ))
    return windows


def window_labels(windows: Iterable[Window]) -> pd.DataFrame:
    """Label frame (one row per window) for a FeatureMatrix"""
    return pd.DataFrame(
        [(w.subject, w.condition, w.task, w.start_s) for w in windows],
        columns=LABEL_COLUMNS,
    )


def check_windows(windows: List[Window]) -> Window:
    """Raise unless all windows share fs, channels and length; returns the first"""
    if not windows:
        raise DataError("no windows to extract features from")
    first = windows[0]
    for w in windows[1:]:
        if (w.fs != first.fs or w.channel_names != first.channel_names
                or w.channel_roles != first.channel_roles or w.data.shape != first.data.shape):
            raise DataError(
                f"inconsistent windows: {w.subject}/{w.condition}/{w.task}@{w.start_s:g}s "
                f"differs from {first.subject}/{first.condition}/{first.task}@{first.start_s:g}s"
            )
    return first


def save_feature_matrix(fm: FeatureMatrix, csv_path: str) -> str:
    """CSV with descriptor header plus a labels sidecar; returns the sidecar path"""
    frame = pd.DataFrame(fm.values, columns=fm.descriptor_strings)
    frame.to_csv(csv_path, index=False, float_format='%.17g', lineterminator='\n')
    sidecar = os.path.splitext(csv_path)[0] + '.labels.json'
    with open(sidecar, 'w') as f:
        json.dump(fm.labels.to_dict(orient='records'), f, indent=1, sort_keys=True)
    return sidecar


def load_feature_matrix(csv_path: str) -> FeatureMatrix:
    sidecar = os.path.splitext(csv_path)[0] + '.labels.json'
    for path in (csv_path, sidecar):
        if not os.path.exists(path):
            raise DataError(f"feature file not found: {path}")
    frame = pd.read_csv(csv_path, float_precision='round_trip')
    with open(sidecar, 'r') as f:
        labels = pd.DataFrame(json.load(f), columns=LABEL_COLUMNS)
    labels['subject'] = labels['subject'].astype(str)
    descriptors = [FeatureDescriptor.parse(c) for c in frame.columns]
    return FeatureMatrix(frame.to_numpy(dtype=float), descriptors, labels)


def _safe_stem(subject_id: str) -> str:
    return ''.join(c if c.isalnum() or c in '-_' else '_' for c in subject_id) or 'recording'
