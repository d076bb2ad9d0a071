"""Dependency-free SVG charts rendered from report dictionaries.

Every plotted mark carries ``data-series``, ``data-x`` and ``data-value``
attributes holding the exact report value (``repr`` of the float), so the
figures can be checked against the reports they came from.
"""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

from .errors import ValidationError
from .reports import write_text

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 60}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _nice_range(values):
    lo, hi = min(values), max(values)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    pad = 0.08 * (hi - lo)
    return lo - pad, hi + pad


def _ticks(lo, hi, n=5):
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-9:
        out.append(round(t, 10))
        t += step
    return out


class _Canvas:
    def __init__(self, title, xlabel, ylabel):
        self.parts = []
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def add(self, text):
        self.parts.append(text)

    def frame(self, ylo, yhi):
        self.ylo, self.yhi = ylo, yhi
        self.add(f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        self.add(f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(self.title)}</text>')
        self.add(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>')
        self.add(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>')
        for t in _ticks(ylo, yhi):
            y = self.sy(t)
            self.add(f'<line x1="{self.x0 - 4}" y1="{y:.2f}" x2="{self.x1}" y2="{y:.2f}" stroke="#e0e0e0"/>')
            self.add(f'<text x="{self.x0 - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{t:g}</text>')
        if ylo < 0 < yhi:
            y = self.sy(0.0)
            self.add(f'<line x1="{self.x0}" y1="{y:.2f}" x2="{self.x1}" y2="{y:.2f}" stroke="#888" '
                     'stroke-dasharray="4 3"/>')
        self.add(f'<text x="{(self.x0 + self.x1) / 2:.1f}" y="{HEIGHT - 18}" text-anchor="middle" '
                 f'font-size="12">{escape(self.xlabel)}</text>')
        cy = (self.y0 + self.y1) / 2
        self.add(f'<text x="18" y="{cy:.1f}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 18 {cy:.1f})">{escape(self.ylabel)}</text>')

    def sy(self, v):
        return self.y0 - (v - self.ylo) / (self.yhi - self.ylo) * (self.y0 - self.y1)

    def slot(self, i, n):
        """Centre of category slot ``i`` of ``n``."""
        return self.x0 + (i + 0.5) * (self.x1 - self.x0) / n

    def xlabel_at(self, x, text):
        self.add(f'<text x="{x:.2f}" y="{self.y0 + 18}" text-anchor="middle" font-size="11">{escape(text)}</text>')

    def legend(self, names):
        for i, name in enumerate(names):
            y = self.y1 + 10 + 18 * i
            color = PALETTE[i % len(PALETTE)]
            self.add(f'<rect x="{self.x1 + 14}" y="{y - 9}" width="12" height="12" fill="{color}"/>')
            self.add(f'<text x="{self.x1 + 32}" y="{y + 1}" font-size="11">{escape(name)}</text>')

    def svg(self):
        body = "\n".join(self.parts)
        return (f'<?xml version="1.0" encoding="UTF-8"?>\n<svg xmlns="http://www.w3.org/2000/svg" '
                f'width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">\n{body}\n</svg>\n')


def _mark(series, x, value, extra=""):
    return f'data-series={quoteattr(str(series))} data-x={quoteattr(str(x))} data-value="{value!r}"{extra}'


def line_chart(title, xlabel, ylabel, categories, series):
    """``series`` maps name -> list of ``(value, ci_low, ci_high)`` per category (CI may be None)."""
    if not categories:
        raise ValidationError("nothing to plot")
    values = [v for pts in series.values() for p in pts for v in p if v is not None]
    if not values or not all(math.isfinite(v) for v in values):
        raise ValidationError("plot values must be finite")
    canvas = _Canvas(title, xlabel, ylabel)
    canvas.frame(*_nice_range(values))
    n = len(categories)
    for i, cat in enumerate(categories):
        canvas.xlabel_at(canvas.slot(i, n), str(cat))
    for k, (name, pts) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = [(canvas.slot(i, n), canvas.sy(p[0])) for i, p in enumerate(pts)]
        if len(coords) > 1:
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in coords)
            canvas.add(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for (x, y), cat, (v, lo, hi) in zip(coords, categories, pts):
            extra = ""
            if lo is not None and hi is not None:
                canvas.add(f'<line x1="{x:.2f}" y1="{canvas.sy(lo):.2f}" x2="{x:.2f}" y2="{canvas.sy(hi):.2f}" '
                           f'stroke="{color}" stroke-width="1.5"/>')
                extra = f' data-ci-low="{lo!r}" data-ci-high="{hi!r}"'
            canvas.add(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{color}" {_mark(name, cat, v, extra)}/>')
            canvas.add(f'<text x="{x + 7:.2f}" y="{y - 7:.2f}" font-size="10" fill="{color}">{v:.2f}</text>')
    canvas.legend(list(series))
    return canvas.svg()


def bar_chart(title, xlabel, ylabel, categories, series):
    """Grouped bars; ``series`` maps name -> value per category."""
    if not categories or not series:
        raise ValidationError("nothing to plot")
    values = [v for vals in series.values() for v in vals]
    if not all(math.isfinite(v) for v in values):
        raise ValidationError("plot values must be finite")
    canvas = _Canvas(title, xlabel, ylabel)
    canvas.frame(*_nice_range(values))
    n, m = len(categories), len(series)
    slot_w = (canvas.x1 - canvas.x0) / n
    bar_w = 0.8 * slot_w / m
    base = canvas.sy(0.0)
    for i, cat in enumerate(categories):
        canvas.xlabel_at(canvas.slot(i, n), str(cat))
    for k, (name, vals) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        for i, (cat, v) in enumerate(zip(categories, vals)):
            x = canvas.x0 + i * slot_w + 0.1 * slot_w + k * bar_w
            y = canvas.sy(v)
            top, h = min(y, base), abs(base - y)
            canvas.add(f'<rect x="{x:.2f}" y="{top:.2f}" width="{bar_w:.2f}" height="{h:.2f}" fill="{color}" '
                       f'{_mark(name, cat, v)}/>')
            canvas.add(f'<text x="{x + bar_w / 2:.2f}" y="{top - 4:.2f}" text-anchor="middle" '
                       f'font-size="9">{v:.2f}</text>')
    canvas.legend(list(series))
    return canvas.svg()


# ------------------------------------------------------ report renderers


def _rows(report, key="rows"):
    try:
        rows = report[key]
        return sorted(rows, key=lambda r: r["horizon_min"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed report: missing {exc}") from None


def delta_vs_horizon_svg(report):
    rows = _rows(report)
    title = f"Percent Delta_drivers by horizon ({report.get('preset', '?')}, {report.get('family', '?')})"
    return line_chart(title, "horizon (min)", "Delta_drivers (% of univariate loss)",
                      [r["horizon_min"] for r in rows],
                      {"pct": [(r["pct"], 100 * r["ci_low"] / r["l_uni"], 100 * r["ci_high"] / r["l_uni"])
                               for r in rows]})


def delta_vs_noise_svg(report):
    try:
        levels = report["levels"]
    except (KeyError, TypeError):
        raise ValidationError("malformed sweep report: missing levels") from None
    names = [lv["noise_level"] for lv in levels]
    horizons = sorted({r["horizon_min"] for lv in levels for r in lv["rows"]})
    series = {}
    for h in horizons:
        pts = []
        for lv in levels:
            row = next((r for r in lv["rows"] if r["horizon_min"] == h), None)
            if row is None:
                raise ValidationError(f"sweep level {lv['noise_level']} has no {h}-min row")
            pts.append((row["pct"], 100 * row["ci_low"] / row["l_uni"], 100 * row["ci_high"] / row["l_uni"]))
        series[f"{h} min"] = pts
    return line_chart("Percent Delta_drivers across diary fidelity", "noise level",
                      "Delta_drivers (% of univariate loss)", names, series)


def attribution_svg(delta_report=None, sweep_report=None):
    sources = []
    if delta_report is not None:
        for name, att in sorted(delta_report.get("attribution", {}).items()):
            sources.append((f"{name} ({delta_report.get('preset', '?')})", att))
    if sweep_report is not None:
        for lv in sweep_report.get("levels", []):
            sources.append((f"multi (sweep {lv['noise_level']})", lv["attribution"]))
    if not sources:
        raise ValidationError("no attribution data in the given reports")
    groups = sorted({g for _, att in sources for g in att["shares"]})
    series = {name: [float(att["shares"].get(g, 0.0)) for g in groups] for name, att in sources}
    return bar_chart("Permutation-importance shares", "channel group", "share of loss increase", groups, series)


def render_delta_vs_horizon(report, path):
    return write_text(Path(path), delta_vs_horizon_svg(report))


def render_delta_vs_noise(report, path):
    return write_text(Path(path), delta_vs_noise_svg(report))


def render_attribution(delta_report, sweep_report, path):
    return write_text(Path(path), attribution_svg(delta_report, sweep_report))


def annotations(svg_text):
    """``(series, x, value)`` for every annotated mark, in document order."""
    root = ET.fromstring(svg_text.encode("utf-8"))
    out = []
    for el in root.iter():
        if "data-value" in el.attrib:
            out.append((el.attrib["data-series"], el.attrib["data-x"], float(el.attrib["data-value"])))
    return out
