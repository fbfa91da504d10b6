"""
Run output writer
Writes the JSON, CSV and summary files of a run into its output directory
and records their SHA-256 digests in the run manifest.
"""
import hashlib
import json
import logging
import os
from typing import Any, Dict, Optional

import markdown
import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader

from eegpipe.errors import DataError
from eegpipe.models import FeatureMatrix
from eegpipe.signal_io import save_feature_matrix

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'run-manifest.json'


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


class ReportBuilder:
    """Writes every artifact of a run into one output directory"""

    def __init__(self, templates_dir: str, output_dir: str):
        self.templates_dir = templates_dir
        self.output_dir = output_dir
        self.env = Environment(loader=FileSystemLoader(templates_dir), keep_trailing_newline=True,
                               trim_blocks=True, lstrip_blocks=True)

        os.makedirs(output_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def write_json(self, name: str, payload: Any) -> str:
        """Sorted-key, NaN-free JSON with a trailing newline"""
        filepath = self.path(name)
        try:
            text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        except ValueError as e:
            raise DataError(f"{name}: {e}") from None
        os.makedirs(os.path.dirname(filepath), exist_ok=True)
        with open(filepath, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text + '\n')
        return filepath

    def write_frame(self, name: str, frame: pd.DataFrame) -> str:
        filepath = self.path(name)
        frame.to_csv(filepath, index=False, float_format='%.10g', lineterminator='\n')
        return filepath

    def write_features(self, fm: FeatureMatrix, name: str = 'features.csv') -> str:
        filepath = self.path(name)
        save_feature_matrix(fm, filepath)
        return filepath

    def render_summary(self, context: Dict) -> Dict[str, str]:
        """
        Render the run summary as Markdown and HTML

        Returns:
            Dict with paths to the generated files
        """
        content = self.env.get_template('summary_template.md').render(**context)
        md_path = self.path('summary.md')
        with open(md_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(content)

        body = markdown.markdown(content, extensions=['tables'])
        html = self.env.get_template('summary_template.html').render(title=context.get('title', 'eegpipe run'), body=body)
        html_path = self.path('summary.html')
        with open(html_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(html)

        return {'markdown': md_path, 'html': html_path}

    def write_manifest(self, config: Dict, seed: int, complete: bool,
                       failed_stage: Optional[str] = None, error: Optional[str] = None) -> str:
        """run-manifest.json: config, seed and the sha256 of every other file in the run"""
        files = {}
        for root, _, names in os.walk(self.output_dir):
            for name in names:
                full = os.path.join(root, name)
                rel = os.path.relpath(full, self.output_dir).replace(os.sep, '/')
                if rel != MANIFEST_NAME:
                    files[rel] = sha256_file(full)
        manifest = {
            'complete': complete,
            'config': config,
            'seed': seed,
            'files': dict(sorted(files.items())),
        }
        if not complete:
            manifest['failed_stage'] = failed_stage
            manifest['error'] = error
        logger.info("manifest: %d files, complete=%s", len(files), complete)
        return self.write_json(MANIFEST_NAME, manifest)
