"""Minimal SVG line charts.  CSV files are the contract; these are previews."""
from __future__ import annotations

from typing import Dict, Sequence, Tuple
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
W, H, PAD, RIGHT = 640, 360, 56, 140


def _scale(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def line_chart(path, series: Dict[str, Tuple[Sequence[float], Sequence[float]]], xlabel: str = "",
               ylabel: str = "", title: str = "", markers: bool = True) -> None:
    """Write one polyline (with point markers) per named series."""
    xs = [x for pts in series.values() for x in pts[0]]
    ys = [y for pts in series.values() for y in pts[1]]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    sx = _scale(min(xs), max(xs), PAD, W - RIGHT)
    sy = _scale(min(ys), max(ys), H - PAD, PAD)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" '
           f'font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - RIGHT}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>']
    for frac in (0.0, 0.5, 1.0):
        xv = min(xs) + frac * (max(xs) - min(xs))
        yv = min(ys) + frac * (max(ys) - min(ys))
        out.append(f'<text x="{sx(xv):.1f}" y="{H - PAD + 14}" text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{PAD - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
    out.append(f'<text x="{(W - RIGHT + PAD) / 2}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">'
               f'{escape(ylabel)}</text>')
    out.append(f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for k, (name, (px, py)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(px, py))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if markers:
            out += [f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.5" fill="{color}"/>' for x, y in zip(px, py)]
        out.append(f'<text x="{W - RIGHT + 10}" y="{PAD + 14 * k}" fill="{color}">{escape(str(name))}</text>')
    out.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(out) + "\n")
