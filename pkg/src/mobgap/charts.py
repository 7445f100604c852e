"""Static SVG 1.1 charts.

Output depends only on the inputs: coordinates are printed with two decimals
and text uses generic font families, so the same data always yields the same
bytes.
"""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

from .errors import ValidationError
from .gaps import GapResult
from .kprototypes import DispersionCurve

WIDTH = 640
HEIGHT = 400
MARGIN = {"left": 72, "right": 24, "top": 48, "bottom": 64}
FONT = 'font-family="sans-serif"'


def _n(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _header(width: int, height: int, title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<title>{escape(title)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{_n(width / 2)}" y="24" text-anchor="middle" font-size="16" {FONT}>{escape(title)}</text>',
    ]


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = start
    while t <= hi + step * 1e-9:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _fmt_tick(v: float) -> str:
    return f"{v:g}"


def render_elbow_svg(curve: DispersionCurve, selected_k: int | None = None,
                     width: int = WIDTH, height: int = HEIGHT) -> str:
    """Average dispersion against k, with the selected k circled."""
    if not curve.points:
        raise ValidationError("cannot draw an empty dispersion curve")
    ks, ds = curve.ks, curve.dispersions
    x0, x1 = MARGIN["left"], width - MARGIN["right"]
    y0, y1 = MARGIN["top"], height - MARGIN["bottom"]
    ymax = max(ds) * 1.05 or 1.0

    def px(k):
        if len(ks) == 1:
            return (x0 + x1) / 2
        return x0 + (k - ks[0]) / (ks[-1] - ks[0]) * (x1 - x0)

    def py(d):
        return y1 - d / ymax * (y1 - y0)

    out = _header(width, height, "Elbow curve")
    out.append(f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for k in ks:
        out.append(f'<text x="{_n(px(k))}" y="{y1 + 18}" text-anchor="middle" font-size="12" {FONT}>{k}</text>')
    for t in _nice_ticks(0.0, ymax):
        out.append(f'<line x1="{x0 - 4}" y1="{_n(py(t))}" x2="{x0}" y2="{_n(py(t))}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{_n(py(t) + 4)}" text-anchor="end" font-size="12" {FONT}>'
                   f"{_fmt_tick(t)}</text>")
    out.append(f'<text x="{_n((x0 + x1) / 2)}" y="{height - 20}" text-anchor="middle" font-size="13" {FONT}>'
               "Number of clusters</text>")
    out.append(f'<text x="18" y="{_n((y0 + y1) / 2)}" text-anchor="middle" font-size="13" {FONT} '
               f'transform="rotate(-90 18 {_n((y0 + y1) / 2)})">Average dispersion</text>')
    if len(ks) > 1:
        pts = " ".join(f"{_n(px(k))},{_n(py(d))}" for k, d in zip(ks, ds))
        out.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>')
    for k, d in zip(ks, ds):
        out.append(f'<circle class="point" cx="{_n(px(k))}" cy="{_n(py(d))}" r="4" fill="steelblue"/>')
    if selected_k is not None:
        if selected_k not in ks:
            raise ValidationError(f"selected k={selected_k} is not on the curve")
        d = ds[ks.index(selected_k)]
        out.append(f'<circle class="selected" cx="{_n(px(selected_k))}" cy="{_n(py(d))}" r="9" '
                   'fill="none" stroke="firebrick" stroke-width="2"/>')
        out.append(f'<text x="{_n(px(selected_k) + 12)}" y="{_n(py(d) - 12)}" font-size="12" '
                   f'fill="firebrick" {FONT}>k = {selected_k}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_gap_svg(results: Sequence[GapResult], title: str | None = None,
                   width: int = WIDTH, height: int = HEIGHT) -> str:
    """One bar per group for a single metric.

    Bars without a significant difference at 5% carry an asterisk; groups
    lacking one income class are labelled ``n/a`` and drawn without a bar.
    """
    if not results:
        raise ValidationError("no gap results to draw")
    metric = results[0].metric
    if any(r.metric.name != metric.name for r in results):
        raise ValidationError("all results in one chart must share a metric")
    title = title or f"{metric.name} difference ({metric.unit}), not-low minus low"
    vals = [r.difference for r in results if r.difference is not None]
    lo, hi = min([0.0, *vals]), max([0.0, *vals])
    if hi == lo:
        hi = lo + 1.0
    pad = (hi - lo) * 0.1
    lo, hi = (lo - pad if lo < 0 else lo), (hi + pad if hi > 0 else hi)

    x0, x1 = MARGIN["left"], width - MARGIN["right"]
    y0, y1 = MARGIN["top"], height - MARGIN["bottom"]

    def py(v):
        return y1 - (v - lo) / (hi - lo) * (y1 - y0)

    slot = (x1 - x0) / len(results)
    bar = slot * 0.6
    out = _header(width, height, title)
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for t in _nice_ticks(lo, hi):
        out.append(f'<line x1="{x0 - 4}" y1="{_n(py(t))}" x2="{x0}" y2="{_n(py(t))}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{_n(py(t) + 4)}" text-anchor="end" font-size="12" {FONT}>'
                   f"{_fmt_tick(t)}</text>")
    out.append(f'<line x1="{x0}" y1="{_n(py(0))}" x2="{x1}" y2="{_n(py(0))}" stroke="black"/>')
    for i, r in enumerate(results):
        cx = x0 + slot * (i + 0.5)
        out.append(f'<text x="{_n(cx)}" y="{y1 + 18}" text-anchor="middle" font-size="12" {FONT}>'
                   f"{escape(r.group_label)}</text>")
        if r.difference is None:
            out.append(f'<text x="{_n(cx)}" y="{_n(py(0) - 6)}" text-anchor="middle" font-size="12" {FONT}>'
                       "n/a</text>")
            continue
        top, bottom = sorted((py(r.difference), py(0)))
        out.append(f'<rect class="bar" x="{_n(cx - bar / 2)}" y="{_n(top)}" width="{_n(bar)}" '
                   f'height="{_n(bottom - top)}" fill="{"steelblue" if r.difference >= 0 else "darkorange"}"/>')
        label = f"{r.difference:.2f}" + ("" if r.significant_5pct else "*")
        ly = top - 6 if r.difference >= 0 else bottom + 14
        out.append(f'<text x="{_n(cx)}" y="{_n(ly)}" text-anchor="middle" font-size="12" {FONT}>'
                   f"{escape(label)}</text>")
    out.append(f'<text x="{x0}" y="{height - 12}" font-size="11" {FONT}>'
               "* not statistically significant at the 5% level</text>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
