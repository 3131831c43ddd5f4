"""Minimal hand-written SVG charts (no plotting dependency).

Emits self-contained, valid-XML SVG files: vertical bar charts with
optional symmetric error bars, and histograms from (bin_left, count)
pairs. Layout is fixed-size with margins sized for short labels.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 720, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 110


def _svg_header(title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" font-size="16" text-anchor="middle" '
        f'font-family="sans-serif">{escape(title)}</text>',
    ]


def _axes(x0, y0, x1, y1) -> list[str]:
    return [
        f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]


def _y_ticks(y_max: float, x0: int, y0: int, y1: int) -> list[str]:
    parts = []
    for i in range(5):
        frac = i / 4
        y = y1 - frac * (y1 - y0)
        value = frac * y_max
        parts.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" '
                     'stroke="black"/>')
        parts.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" font-size="11" '
                     f'text-anchor="end" font-family="sans-serif">{value:.3g}</text>')
    return parts


def bar_chart_svg(path: str | Path, title: str, labels: list[str],
                  values: list[float], errors: list[float] | None = None) -> Path:
    """Vertical bars with optional error whiskers; NaN values are skipped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x0, y0 = MARGIN_L, MARGIN_T
    x1, y1 = WIDTH - MARGIN_R, HEIGHT - MARGIN_B
    finite = [v for v in values if v == v]
    top = max([v + (e if errors else 0.0)
               for v, e in zip(finite, (errors or [0.0] * len(values)))] or [1.0])
    y_max = top * 1.15 if top > 0 else 1.0
    n = max(len(values), 1)
    slot = (x1 - x0) / n
    bar_w = slot * 0.6

    parts = _svg_header(title) + _axes(x0, y0, x1, y1) + _y_ticks(y_max, x0, y0, y1)
    for i, (label, value) in enumerate(zip(labels, values)):
        cx = x0 + slot * (i + 0.5)
        lx = cx
        parts.append(
            f'<text x="{lx:.1f}" y="{y1 + 12}" font-size="11" font-family="sans-serif" '
            f'text-anchor="end" transform="rotate(-40 {lx:.1f} {y1 + 12})">'
            f'{escape(str(label))}</text>')
        if value != value:  # NaN: annotate instead of drawing a bar
            parts.append(f'<text x="{cx:.1f}" y="{y1 - 6}" font-size="11" '
                         f'text-anchor="middle" font-family="sans-serif">n/a</text>')
            continue
        h = (value / y_max) * (y1 - y0)
        parts.append(f'<rect x="{cx - bar_w / 2:.1f}" y="{y1 - h:.1f}" '
                     f'width="{bar_w:.1f}" height="{h:.1f}" fill="#4878a8"/>')
        if errors is not None and errors[i] == errors[i]:
            e = (errors[i] / y_max) * (y1 - y0)
            parts.append(f'<line x1="{cx:.1f}" y1="{y1 - h - e:.1f}" x2="{cx:.1f}" '
                         f'y2="{min(y1, y1 - h + e):.1f}" stroke="black"/>')
            for yy in (y1 - h - e, min(y1, y1 - h + e)):
                parts.append(f'<line x1="{cx - 4:.1f}" y1="{yy:.1f}" '
                             f'x2="{cx + 4:.1f}" y2="{yy:.1f}" stroke="black"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def histogram_svg(path: str | Path, title: str, bin_lefts: list[float],
                  counts: list[int], bin_width: float,
                  x_label: str = "distance above hip landmark [mm]",
                  vlines: list[float] | None = None) -> Path:
    """Histogram bars from precomputed bins, with optional threshold lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x0, y0 = MARGIN_L, MARGIN_T
    x1, y1 = WIDTH - MARGIN_R, HEIGHT - MARGIN_B
    y_max = max(max(counts, default=1), 1) * 1.15
    lo = min(bin_lefts, default=0.0)
    hi = max(bin_lefts, default=0.0) + bin_width
    span = max(hi - lo, 1e-9)

    def sx(v):
        return x0 + (v - lo) / span * (x1 - x0)

    parts = _svg_header(title) + _axes(x0, y0, x1, y1) + _y_ticks(y_max, x0, y0, y1)
    for left, count in zip(bin_lefts, counts):
        h = (count / y_max) * (y1 - y0)
        parts.append(f'<rect x="{sx(left):.1f}" y="{y1 - h:.1f}" '
                     f'width="{max(sx(left + bin_width) - sx(left) - 1, 1):.1f}" '
                     f'height="{h:.1f}" fill="#6a9f58"/>')
    for left in (bin_lefts[i] for i in range(0, len(bin_lefts), max(1, len(bin_lefts) // 8))):
        parts.append(f'<text x="{sx(left):.1f}" y="{y1 + 16}" font-size="11" '
                     f'text-anchor="middle" font-family="sans-serif">{left:.0f}</text>')
    for v in vlines or []:
        parts.append(f'<line x1="{sx(v):.1f}" y1="{y0}" x2="{sx(v):.1f}" y2="{y1}" '
                     'stroke="red" stroke-dasharray="6,4"/>')
    parts.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 8}" font-size="12" '
                 f'text-anchor="middle" font-family="sans-serif">{escape(x_label)}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path
