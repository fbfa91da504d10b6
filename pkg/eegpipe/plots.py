"""
SVG plots
Scalp maps and accuracy plots rendered from Jinja2 templates. Every number
is formatted before it reaches the template, so the same inputs always give
the same bytes.
"""
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape

from eegpipe.config import Config
from eegpipe.errors import DataError
from eegpipe.ml import EvaluationReport, SweepResult
from eegpipe.models import Montage

logger = logging.getLogger(__name__)

NEGATIVE_RGB = (33, 102, 172)   # #2166ac
MIDPOINT_RGB = (247, 247, 247)  # #f7f7f7
POSITIVE_RGB = (178, 24, 43)    # #b2182b

TOPO_SIZE = 400
TOPO_RADIUS = 150
LEGEND_STEPS = 11


def _environment(templates_dir: Optional[str] = None) -> Environment:
    return Environment(
        loader=FileSystemLoader(templates_dir or Config.TEMPLATES_DIR),
        autoescape=select_autoescape(enabled_extensions=('svg.j2',), default_for_string=False),
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )


def _fmt(value: float) -> str:
    text = f"{value:.2f}"
    return '0.00' if text == '-0.00' else text


def diverging_color(value: float, vmax: float) -> str:
    """Blue-white-red hex color, symmetric about 0, saturating at +/- vmax"""
    t = 0.0 if vmax <= 0 else max(-1.0, min(1.0, value / vmax))
    end = POSITIVE_RGB if t > 0 else NEGATIVE_RGB
    rgb = [round(m + abs(t) * (e - m)) for m, e in zip(MIDPOINT_RGB, end)]
    return '#{:02x}{:02x}{:02x}'.format(*rgb)


def project(position: np.ndarray, cx: float, cy: float, scale: float) -> Tuple[float, float]:
    """Azimuthal equidistant projection from the vertex, nose up

    The ear line (inclination 90 degrees) lands on the head circle.
    """
    x, y, z = position
    inclination = math.acos(max(-1.0, min(1.0, z)))
    azimuth = math.atan2(y, x)
    r = inclination / (math.pi / 2)
    return cx - r * math.sin(azimuth) * scale, cy - r * math.cos(azimuth) * scale


def render_topomap(values: Mapping[str, float], montage: Montage, out_path: str,
                   title: str = '', templates_dir: Optional[str] = None) -> str:
    """One colored marker per electrode on a head outline"""
    if not values:
        raise DataError("topomap needs at least one electrode value")
    missing = [name for name in values if name not in montage]
    if missing:
        raise DataError(f"electrode(s) {missing} missing from montage {montage.name}")
    bad = [name for name, v in values.items() if not math.isfinite(float(v))]
    if bad:
        raise DataError(f"non-finite topomap value(s) at {bad}")

    names = [n for n in montage.channel_names if n in values]
    vmax = max(abs(float(values[n])) for n in names) or 1.0
    centre = TOPO_SIZE / 2
    electrodes = []
    for name, position in zip(names, montage.positions_for(names)):
        px, py = project(position, centre, centre, TOPO_RADIUS)
        value = float(values[name])
        electrodes.append({
            'name': name,
            'x': _fmt(px),
            'y': _fmt(py),
            'value': _fmt(value),
            'color': diverging_color(value, vmax),
        })
    legend = [
        {'y': _fmt(60 + 20 * i), 'color': diverging_color(vmax * (1 - 2 * i / (LEGEND_STEPS - 1)), vmax)}
        for i in range(LEGEND_STEPS)
    ]
    svg = _environment(templates_dir).get_template('topomap.svg.j2').render(
        title=title,
        size=TOPO_SIZE,
        width=TOPO_SIZE + 80,
        centre=_fmt(centre),
        radius=TOPO_RADIUS,
        nose=f"{_fmt(centre - 12)},{_fmt(centre - TOPO_RADIUS + 1)} {_fmt(centre)},{_fmt(centre - TOPO_RADIUS - 16)} "
             f"{_fmt(centre + 12)},{_fmt(centre - TOPO_RADIUS + 1)}",
        electrodes=electrodes,
        legend=legend,
        legend_x=TOPO_SIZE + 20,
        vmax=_fmt(vmax),
        vmin=_fmt(-vmax),
    )
    return _write(svg, out_path)


@dataclass(frozen=True)
class AccuracySeries:
    """One comparison's per-subject accuracies, optionally with its scrambled baseline"""
    name: str
    accuracies: Tuple[float, ...]
    baseline: Optional[Tuple[float, ...]] = None

    @classmethod
    def from_report(cls, name: str, report: EvaluationReport) -> 'AccuracySeries':
        baseline = report.baseline_accuracies
        return cls(name, tuple(float(a) for a in report.accuracies),
                   None if baseline is None else tuple(float(a) for a in baseline))


PlotData = Union[SweepResult, Sequence[AccuracySeries]]

PLOT_TOP, PLOT_BOTTOM, PLOT_LEFT = 40, 300, 60
SERIES_WIDTH = 100
SWEEP_WIDTH = 480


def _y(accuracy: float) -> float:
    return PLOT_BOTTOM - accuracy * (PLOT_BOTTOM - PLOT_TOP)


def _strip_context(series: Sequence[AccuracySeries]) -> Dict:
    columns = []
    for i, item in enumerate(series):
        if not item.accuracies:
            raise DataError(f"series {item.name!r} has no accuracies")
        cx = PLOT_LEFT + SERIES_WIDTH * i + SERIES_WIDTH / 2
        dots = [
            {'x': _fmt(cx + 6 * ((j % 5) - 2)), 'y': _fmt(_y(a))}
            for j, a in enumerate(item.accuracies)
        ]
        band = None
        if item.baseline:
            lo, hi = min(item.baseline), max(item.baseline)
            band = {
                'x': _fmt(cx - 30), 'y': _fmt(_y(hi)), 'width': 60,
                'height': _fmt(max(_y(lo) - _y(hi), 1.0)),
                'median_y': _fmt(_y(float(np.median(item.baseline)))),
                'x1': _fmt(cx - 30), 'x2': _fmt(cx + 30),
            }
        columns.append({
            'name': item.name, 'x': _fmt(cx), 'dots': dots, 'band': band,
            'median_y': _fmt(_y(float(np.median(item.accuracies)))),
            'x1': _fmt(cx - 20), 'x2': _fmt(cx + 20),
        })
    return {'mode': 'strip', 'columns': columns, 'width': PLOT_LEFT + SERIES_WIDTH * len(series) + 20}


def _sweep_context(sweep: SweepResult) -> Dict:
    if not sweep.points:
        raise DataError("sweep has no points")
    top = max(sweep.counts)

    def x(count: int) -> float:
        return PLOT_LEFT + count / top * SWEEP_WIDTH

    def path(points, lo, hi):
        upper = [f"{_fmt(x(p.n_features))},{_fmt(_y(getattr(p, hi)))}" for p in points]
        lower = [f"{_fmt(x(p.n_features))},{_fmt(_y(getattr(p, lo)))}" for p in reversed(points)]
        return ' '.join(upper + lower)

    def curve(points, attr):
        return ' '.join(f"{_fmt(x(p.n_features))},{_fmt(_y(getattr(p, attr)))}" for p in points)

    ticks = sorted({sweep.counts[0], sweep.counts[len(sweep.counts) // 2], top})
    return {
        'mode': 'sweep',
        'width': PLOT_LEFT + SWEEP_WIDTH + 40,
        'iqr': path(sweep.points, 'q1', 'q3'),
        'curve': curve(sweep.points, 'median'),
        'baseline_iqr': path(sweep.points, 'baseline_q1', 'baseline_q3'),
        'baseline_curve': curve(sweep.points, 'baseline_median'),
        'best_x': _fmt(x(sweep.best_count)),
        'best_count': sweep.best_count,
        'x_ticks': [{'x': _fmt(x(c)), 'label': c} for c in ticks],
        'name': sweep.name,
    }


def render_accuracy_plot(data: PlotData, out_path: str, title: str = '',
                         templates_dir: Optional[str] = None) -> str:
    """Dot strip per comparison (scrambled baseline in gray) or a sweep curve with its IQR band"""
    if isinstance(data, SweepResult):
        context = _sweep_context(data)
    else:
        series = list(data)
        if not series:
            raise DataError("accuracy plot needs at least one series")
        context = _strip_context(series)
    y_ticks = [{'y': _fmt(_y(a)), 'label': f"{a:.1f}"} for a in (0.0, 0.25, 0.5, 0.75, 1.0)]
    svg = _environment(templates_dir).get_template('accuracy.svg.j2').render(
        title=title,
        height=PLOT_BOTTOM + 60,
        top=PLOT_TOP,
        bottom=PLOT_BOTTOM,
        left=PLOT_LEFT,
        chance_y=_fmt(_y(0.5)),
        y_ticks=y_ticks,
        **context,
    )
    return _write(svg, out_path)


def _write(svg: str, out_path: str) -> str:
    directory = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(directory, exist_ok=True)
    with open(out_path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(svg)
    logger.debug("wrote %s", out_path)
    return out_path

