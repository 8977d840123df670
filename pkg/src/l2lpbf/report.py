"""Static SVG figures and a text summary from run outputs.

The charts are written by hand as SVG so the package needs no plotting
library and the output is plain, diffable text.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .controller import RESULTS_HEADER
from .plant import RUN_LOG_HEADER

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class ReportError(ValueError):
    pass


@dataclass
class RunData:
    name: str
    results: dict  # column -> array
    log: dict | None = None
    manifest: dict | None = None

    @property
    def n_layers(self) -> int:
        return len(self.results["layer"])


def _read_table(path, header, label) -> dict:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise ReportError(f"{label} not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != list(header):
            raise ReportError(f"{path}: line 1: expected header {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ReportError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ReportError(f"{path}: line {lineno}: non-numeric field") from None
    if not rows:
        raise ReportError(f"{path}: no data rows")
    data = np.array(rows)
    return {name: data[:, j] for j, name in enumerate(header)}


def read_results(path) -> dict:
    return _read_table(path, RESULTS_HEADER, "results file")


def read_run_log(path) -> dict:
    return _read_table(path, RUN_LOG_HEADER, "run log")


def load_run(results_path) -> RunData:
    """Results CSV plus the run log and manifest written beside it, if present."""
    results_path = Path(results_path)
    results = read_results(results_path)
    folder = results_path.parent
    log = read_run_log(folder / "run_log.csv") if (folder / "run_log.csv").exists() else None
    manifest = None
    if (folder / "manifest.json").exists():
        manifest = json.loads((folder / "manifest.json").read_text())
    name = manifest.get("mode", folder.name) if manifest else folder.name
    if manifest and manifest.get("geometry"):
        name = f"{name}/{manifest['geometry']}"
    return RunData(name, results, log, manifest)


# ----------------------------------------------------------------------
# svg primitives


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _num(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:g}"


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""
    color: str = PALETTE[0]
    dashed: bool = False
    markers: bool = False


class Panel:
    """One x-y chart inside a figure."""

    def __init__(self, title: str, xlabel: str, ylabel: str, integer_x: bool = False):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.integer_x = integer_x
        self.series: list[Series] = []
        self.hlines: list[tuple[float, str, str]] = []

    def add(self, x, y, **kw) -> "Panel":
        self.series.append(Series(np.asarray(x, float), np.asarray(y, float), **kw))
        return self

    def hline(self, y: float, label: str = "", color: str = "#555555") -> "Panel":
        self.hlines.append((float(y), label, color))
        return self

    def _limits(self):
        xs = np.concatenate([s.x for s in self.series]) if self.series else np.array([0.0, 1.0])
        ys = [s.y[np.isfinite(s.y)] for s in self.series] + [np.array([h[0] for h in self.hlines])]
        ys = np.concatenate(ys) if ys else np.array([0.0, 1.0])
        if ys.size == 0:
            ys = np.array([0.0, 1.0])
        ylo, yhi = float(ys.min()), float(ys.max())
        pad = 0.05 * (yhi - ylo) if yhi > ylo else 1.0
        return float(xs.min()), float(xs.max()), ylo - pad, yhi + pad

    def render(self, ox: float, oy: float, w: float, h: float) -> list[str]:
        left, right, top, bottom = 70, 20, 30, 45
        pw, ph = w - left - right, h - top - bottom
        x0, x1, y0, y1 = self._limits()
        if x1 <= x0:
            x0, x1 = x0 - 0.5, x1 + 0.5

        def sx(v):
            return ox + left + (v - x0) / (x1 - x0) * pw

        def sy(v):
            return oy + top + ph - (v - y0) / (y1 - y0) * ph

        out = [f'<rect x="{_num(ox + left)}" y="{_num(oy + top)}" width="{_num(pw)}" '
               f'height="{_num(ph)}" fill="none" stroke="#000"/>',
               f'<text x="{_num(ox + left + pw / 2)}" y="{_num(oy + 18)}" '
               f'text-anchor="middle" font-weight="bold">{escape(self.title)}</text>',
               f'<text x="{_num(ox + left + pw / 2)}" y="{_num(oy + h - 8)}" '
               f'text-anchor="middle">{escape(self.xlabel)}</text>',
               f'<text transform="translate({_num(ox + 16)},{_num(oy + top + ph / 2)}) rotate(-90)" '
               f'text-anchor="middle">{escape(self.ylabel)}</text>']
        for t in nice_ticks(x0, x1):
            if x0 <= t <= x1 and not (self.integer_x and t != round(t)):
                out.append(f'<line x1="{_num(sx(t))}" y1="{_num(oy + top + ph)}" x2="{_num(sx(t))}" '
                           f'y2="{_num(oy + top + ph + 5)}" stroke="#000"/>')
                out.append(f'<text x="{_num(sx(t))}" y="{_num(oy + top + ph + 18)}" '
                           f'text-anchor="middle">{_label(t)}</text>')
        for t in nice_ticks(y0, y1):
            if y0 <= t <= y1:
                out.append(f'<line x1="{_num(ox + left - 5)}" y1="{_num(sy(t))}" '
                           f'x2="{_num(ox + left)}" y2="{_num(sy(t))}" stroke="#000"/>')
                out.append(f'<text x="{_num(ox + left - 8)}" y="{_num(sy(t) + 4)}" '
                           f'text-anchor="end">{_label(t)}</text>')
        for y, label, color in self.hlines:
            out.append(f'<line x1="{_num(ox + left)}" y1="{_num(sy(y))}" x2="{_num(ox + left + pw)}" '
                       f'y2="{_num(sy(y))}" stroke="{color}" stroke-dasharray="2,3"/>')
            if label:
                out.append(f'<text x="{_num(ox + left + pw - 4)}" y="{_num(sy(y) - 4)}" '
                           f'text-anchor="end" fill="{color}">{escape(label)}</text>')
        for k, s in enumerate(self.series):
            ok = np.isfinite(s.x) & np.isfinite(s.y)
            pts = " ".join(f"{_num(sx(a))},{_num(sy(b))}" for a, b in zip(s.x[ok], s.y[ok]))
            dash = ' stroke-dasharray="6,4"' if s.dashed else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{s.color}" '
                       f'stroke-width="1.5"{dash}/>')
            if s.markers:
                out.extend(f'<circle cx="{_num(sx(a))}" cy="{_num(sy(b))}" r="3" fill="{s.color}"/>'
                           for a, b in zip(s.x[ok], s.y[ok]))
            if s.label:
                ly = oy + top + 14 + 14 * k
                out.append(f'<line x1="{_num(ox + left + 8)}" y1="{_num(ly - 4)}" '
                           f'x2="{_num(ox + left + 28)}" y2="{_num(ly - 4)}" stroke="{s.color}"{dash}/>')
                out.append(f'<text x="{_num(ox + left + 32)}" y="{_num(ly)}">{escape(s.label)}</text>')
        return out


def render_figure(panels: Sequence[Panel], width: int = 760, panel_height: int = 230,
                  columns: int = 1) -> str:
    rows = math.ceil(len(panels) / columns)
    pw = width / columns
    body = []
    for i, panel in enumerate(panels):
        r, c = divmod(i, columns)
        body.extend(panel.render(c * pw, r * panel_height, pw, panel_height))
    height = rows * panel_height
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="#fff"/>',
        *body, "</svg>", ""])


# ----------------------------------------------------------------------
# figures


def _target_um(run: RunData, default: float | None) -> float | None:
    if run.manifest and run.manifest.get("target_depth_m") is not None:
        return run.manifest["target_depth_m"] * 1e6
    return default


def time_series_figure(run: RunData, target_um: float | None = None) -> str:
    """Power, depth and length against time for one run (needs the run log)."""
    if run.log is None:
        raise ReportError(f"{run.name}: no run log next to the results file")
    log = run.log
    t_ms = log["time_s"] * 1e3
    # break the polyline between layers so the recoat gaps stay visible
    panels = [Panel("Laser power", "time [ms]", "power [W]"),
              Panel("Melt-pool depth", "time [ms]", "depth [um]"),
              Panel("Melt-pool length", "time [ms]", "length [um]")]
    for layer in np.unique(log["layer"]):
        sel = log["layer"] == layer
        panels[0].add(t_ms[sel], log["power_w"][sel])
        panels[1].add(t_ms[sel], log["depth_m"][sel] * 1e6)
        panels[2].add(t_ms[sel], log["length_m"][sel] * 1e6)
    target_um = _target_um(run, target_um)
    if target_um is not None:
        panels[1].hline(target_um, "target")
    if run.manifest and run.manifest.get("u_min") is not None:
        panels[0].hline(run.manifest["u_min"], "u_min")
        panels[0].hline(run.manifest["u_max"], "u_max")
    return render_figure(panels)


def layer_means_figure(runs: Sequence[RunData], target_um: float | None = None) -> str:
    """Layer-mean depth, power and end-of-layer surface temperature for all runs."""
    panels = [Panel("Layer-mean depth", "layer", "depth [um]", integer_x=True),
              Panel("Layer-mean power", "layer", "power [W]", integer_x=True),
              Panel("End-of-layer surface temperature", "layer", "temperature [K]", integer_x=True)]
    for k, run in enumerate(runs):
        r = run.results
        color = PALETTE[k % len(PALETTE)]
        layer = r["layer"] + 1
        panels[0].add(layer, r["mean_depth_m"] * 1e6, label=run.name, color=color, markers=True)
        panels[1].add(layer, r["mean_power_w"], label=run.name, color=color, markers=True)
        panels[2].add(layer, r["end_surface_k"], label=run.name, color=color, markers=True)
    target = target_um
    for run in runs:
        target = _target_um(run, target)
    if target is not None:
        panels[0].hline(target, "target")
    return render_figure(panels)


def summary_text(runs: Sequence[RunData], target_um: float | None = None) -> str:
    lines = []
    for run in runs:
        r = run.results
        target = _target_um(run, target_um)
        lines.append(f"run {run.name}: {run.n_layers} layers")
        lines.append("layer  theta[K]  power[W]  depth[um]  length[um]  end_surface[K]")
        for j in range(run.n_layers):
            lines.append(f"{int(r['layer'][j]):5d}  {r['theta_k'][j]:8.1f}  {r['mean_power_w'][j]:8.2f}  "
                         f"{r['mean_depth_m'][j] * 1e6:9.2f}  {r['mean_length_m'][j] * 1e6:10.1f}  "
                         f"{r['end_surface_k'][j]:14.1f}")
        if target is not None:
            err = np.abs(r["mean_depth_m"] * 1e6 - target)
            lines.append(f"|depth - target|: final {err[-1]:.2f} um, worst {err.max():.2f} um")
        lines.append("")
    return "\n".join(lines)


def write_report(results_paths: Sequence, out_dir, target_um: float | None = None) -> list[Path]:
    """Write figures and ``summary.txt`` into ``out_dir``; returns the files written."""
    if not results_paths:
        raise ReportError("no results files given")
    runs = [load_run(p) for p in results_paths]
    n = {run.n_layers for run in runs}
    if len(n) > 1:
        raise ReportError(f"runs differ in layer count: {sorted(n)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, run in enumerate(runs):
        if run.log is not None:
            path = out_dir / f"run{k}_timeseries.svg"
            path.write_text(time_series_figure(run, target_um))
            written.append(path)
    path = out_dir / "layer_means.svg"
    path.write_text(layer_means_figure(runs, target_um))
    written.append(path)
    path = out_dir / "summary.txt"
    path.write_text(summary_text(runs, target_um))
    written.append(path)
    return written
