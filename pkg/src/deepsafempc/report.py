"""CSV and self-contained SVG emission for run artifacts.

Charts are written as plain SVG polylines with the numeric series embedded
in a desc element, so artifacts stay inspectable without any plotting
stack. CSV is the canonical data format; the SVG is a convenience view.
"""

from __future__ import annotations

import json
from typing import Sequence

_COLORS = ("#c0392b", "#2a6fbb", "#1e8e4e", "#8e44ad", "#b7791f")


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(v) for v in row) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def line_chart_svg(
    path,
    series: dict[str, Sequence[float]],
    title: str,
    x_label: str = "step",
    y_label: str = "value",
    width: int = 720,
    height: int = 420,
) -> None:
    """Write a minimal line chart; each named series becomes one polyline."""
    margin = 60.0
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin

    all_y = [float(v) for vals in series.values() for v in vals]
    n_max = max((len(vals) for vals in series.values()), default=0)
    if not all_y or n_max == 0:
        y_lo, y_hi, n_max = 0.0, 1.0, 1
    else:
        y_lo, y_hi = min(all_y), max(all_y)
        if y_hi - y_lo < 1e-12:
            y_lo -= 0.5
            y_hi += 0.5

    def sx(i: float) -> float:
        return margin + plot_w * (i / max(1, n_max - 1))

    def sy(v: float) -> float:
        return margin + plot_h * (1.0 - (v - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<desc>{json.dumps({name: [float(v) for v in vals] for name, vals in series.items()})}</desc>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="#333" stroke-width="1"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="#333" stroke-width="1"/>',
        f'<text x="{width / 2:.1f}" y="{height - 16}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">{x_label}</text>',
        f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 18 {height / 2:.1f})">{y_label}</text>',
        f'<text x="{margin - 6}" y="{sy(y_hi) + 4:.1f}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{y_hi:.4g}</text>',
        f'<text x="{margin - 6}" y="{sy(y_lo) + 4:.1f}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{y_lo:.4g}</text>',
    ]
    for idx, (name, vals) in enumerate(series.items()):
        color = _COLORS[idx % len(_COLORS)]
        points = " ".join(f"{sx(i):.2f},{sy(float(v)):.2f}" for i, v in enumerate(vals))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{width - margin}" y="{margin + 16 * idx:.1f}" text-anchor="end" '
            f'font-size="12" font-family="sans-serif" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
