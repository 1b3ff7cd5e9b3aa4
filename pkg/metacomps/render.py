"""
SVG line charts of per-task curves, and reading them back.

Charts are drawn with matplotlib on the Agg backend and saved as SVG. Each
learner contributes two artists tagged by gid: "series-<learner>" is the mean
line (one vertex per task index) and "band-<learner>" the +/- one standard
error band. Read-back goes through svgpathtools: the vertices of a series
path are its data points in SVG user units (y grows downwards).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from svgpathtools import Document, parse_path, svg2paths2

from .results import METRICS, Curve, RunRecord, curve_for, group_by_learner

logger = logging.getLogger(__name__)

SVG_NS = "{http://www.w3.org/2000/svg}"
SERIES_GID = "series-"
BAND_GID = "band-"
FIGSIZE = (6.4, 4.0)

# (colour, matplotlib linestyle) per series, cycled.
SERIES_STYLES = [
    ("#1f77b4", "-"),
    ("#d62728", "--"),
    ("#2ca02c", ":"),
    ("#9467bd", "-."),
]

METRIC_LABELS = {
    "episodes_to_success": "episodes to success",
    "mean_return": "average return",
}

_RC = {"svg.fonttype": "none", "svg.hashsalt": "comps", "path.simplify": False}


def _draw_series(ax, name: str, curve: Curve, colour: str, linestyle: str) -> None:
    x = np.asarray(curve.task_indices, dtype=np.float64)
    mean = np.asarray(curve.mean, dtype=np.float64)
    se = np.asarray(curve.se, dtype=np.float64)
    if x.size == 1:
        # A lone vertex has no drawable segment; repeat it so the series path exists.
        x, mean, se = np.repeat(x, 2), np.repeat(mean, 2), np.repeat(se, 2)
    band = ax.fill_between(x, mean - se, mean + se, color=colour, alpha=0.2, linewidth=0)
    band.set_gid(f"{BAND_GID}{name}")
    (line,) = ax.plot(x, mean, color=colour, linestyle=linestyle, linewidth=2,
                      marker="o", markersize=4, label=name)
    line.set_gid(f"{SERIES_GID}{name}")


def render_curves(records: Sequence[RunRecord], metric: str, path: Path, n_cap: Optional[int] = None) -> Path:
    """Write a per-task chart of `metric` with one styled series (line, points, SE band) per learner."""
    if metric not in METRICS:
        raise ValueError(f"Unknown metric {metric!r}; expected one of {', '.join(METRICS)}")
    if not records:
        raise ValueError("Cannot render a chart from empty records")

    curves: List[Tuple[str, Curve]] = [(learner.value, curve_for(metric, rows, n_cap))
                                       for learner, rows in group_by_learner(records).items()]
    tasks = sorted({t for _, c in curves for t in c.task_indices})

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        try:
            for idx, (name, curve) in enumerate(curves):
                colour, linestyle = SERIES_STYLES[idx % len(SERIES_STYLES)]
                _draw_series(ax, name, curve, colour, linestyle)
            ax.set_xticks(tasks)
            ax.set_xlabel("task index")
            ax.set_ylabel(METRIC_LABELS[metric])
            ax.grid(True, alpha=0.3)
            ax.legend(loc="best", fontsize=9)
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)

    logger.info(f"Chart written: {path} ({metric}, {len(curves)} series)")
    return Path(path)


def _groups(path: Path, prefix: str):
    root = Document(str(path)).tree.getroot()
    seen = set()
    for el in root.iter(f"{SVG_NS}g"):
        gid = el.get("id", "")
        if gid.startswith(prefix) and gid not in seen:
            seen.add(gid)
            yield gid[len(prefix):], el


def _style(el) -> Dict[str, str]:
    pairs = (item.split(":", 1) for item in el.get("style", "").split(";") if ":" in item)
    return {k.strip(): v.strip() for k, v in pairs}


def read_chart_points(path: Path) -> Dict[str, List[Tuple[float, float]]]:
    """Data points per series name, in drawing order, parsed back from a rendered chart."""
    points: Dict[str, List[Tuple[float, float]]] = {}
    for name, group in _groups(path, SERIES_GID):
        line = group.find(f"{SVG_NS}path")
        if line is None:
            continue
        parsed = parse_path(line.get("d", ""))
        if len(parsed) == 0:
            continue
        vertices = [seg.start for seg in parsed] + [parsed[-1].end]
        series: List[Tuple[float, float]] = []
        for z in vertices:
            pt = (float(z.real), float(z.imag))
            if not series or series[-1] != pt:
                series.append(pt)
        points[name] = series
    return points


def read_chart_styles(path: Path) -> Dict[str, Tuple[str, str]]:
    """(stroke, dash pattern) of each series line; the dash pattern is empty for solid lines."""
    styles: Dict[str, Tuple[str, str]] = {}
    for name, group in _groups(path, SERIES_GID):
        line = group.find(f"{SVG_NS}path")
        if line is not None:
            style = _style(line)
            styles[name] = (style.get("stroke", ""), style.get("stroke-dasharray", ""))
    return styles


def diagnose_chart(path: Path) -> str:
    """Summarize a chart file: canvas, path count, and points per series."""
    try:
        paths, _, svg_attributes = svg2paths2(str(path))
        info = f"SVG chart: {path}\n"
        info += f"Canvas: {svg_attributes.get('width', '?')} x {svg_attributes.get('height', '?')}\n"
        info += f"Paths found: {len(paths)}\n"
        bands = sorted(name for name, _ in _groups(path, BAND_GID))
        if bands:
            info += f"SE bands: {', '.join(bands)}\n"
        points = read_chart_points(path)
        if points:
            info += "Series:\n"
            for name, pts in points.items():
                info += f"  {name}: {len(pts)} points\n"
        else:
            info += "No data series found!\n"
        return info
    except Exception as e:
        return f"Error diagnosing chart {path}: {e}"
