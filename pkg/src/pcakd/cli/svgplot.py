"""Minimal hand-rolled SVG emitters for the analyze and evaluate commands.

Nothing here aims beyond readable static plots: explained-variance bars
with the cumulative curve per layer, and a content-vs-style scatter.
"""

from __future__ import annotations

import os
from xml.sax.saxutils import escape

PANEL_W = 380
PANEL_H = 230
MARGIN_L = 52
MARGIN_R = 14
MARGIN_T = 30
MARGIN_B = 36

BAR_COLOR = "#4caf50"
CURVE_COLOR = "#1565c0"
THRESHOLD_COLOR = "#c62828"
POINT_COLOR = "#1565c0"
MEAN_COLOR = "#c62828"
AXIS_COLOR = "#444444"
TEXT_STYLE = 'font-family="sans-serif" font-size="11" fill="#222222"'


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def save_svg(path: str | os.PathLike, svg_text: str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(svg_text)
    os.replace(tmp, path)


def _panel_axes(ox: float, oy: float, title: str) -> list[str]:
    x0, y0 = ox + MARGIN_L, oy + PANEL_H - MARGIN_B
    x1, y1 = ox + PANEL_W - MARGIN_R, oy + MARGIN_T
    return [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="{AXIS_COLOR}"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="{AXIS_COLOR}"/>',
        f'<text x="{ox + PANEL_W / 2:.1f}" y="{oy + 18}" text-anchor="middle" '
        f'{TEXT_STYLE}>{escape(title)}</text>',
    ]


def variance_profile_svg(profiles, threshold: float | None = None,
                         picks=None) -> str:
    """Bars of per-index explained variance plus the cumulative curve.

    One panel per layer profile; optional threshold line and a marker at
    the picked channel count.
    """
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" '
        f'height="{PANEL_H * len(profiles)}" viewBox="0 0 {PANEL_W} '
        f'{PANEL_H * len(profiles)}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for pi, prof in enumerate(profiles):
        oy = pi * PANEL_H
        x0, y0 = MARGIN_L, oy + PANEL_H - MARGIN_B
        plot_w = PANEL_W - MARGIN_L - MARGIN_R
        plot_h = PANEL_H - MARGIN_T - MARGIN_B
        n = len(prof.mev)
        parts += _panel_axes(0, oy,
                             f"layer {prof.layer_id}: explained variance "
                             f"({prof.images} images)")
        peak = max(max(prof.mev), 1e-12)
        bar_w = plot_w / n
        for i, v in enumerate(prof.mev):
            h = plot_h * (v / peak)
            parts.append(
                f'<rect x="{x0 + i * bar_w:.2f}" y="{y0 - h:.2f}" '
                f'width="{max(bar_w - 0.5, 0.5):.2f}" height="{h:.2f}" '
                f'fill="{BAR_COLOR}"/>')
        pts = " ".join(
            f"{x0 + (i + 0.5) * bar_w:.2f},{y0 - plot_h * c:.2f}"
            for i, c in enumerate(prof.mcev))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{CURVE_COLOR}" stroke-width="1.5"/>')
        if threshold is not None:
            ty = y0 - plot_h * threshold
            parts.append(
                f'<line x1="{x0}" y1="{ty:.2f}" x2="{x0 + plot_w}" '
                f'y2="{ty:.2f}" stroke="{THRESHOLD_COLOR}" '
                f'stroke-dasharray="4 3"/>')
        if picks is not None:
            px = x0 + (picks[pi] - 0.5) * bar_w
            parts.append(
                f'<line x1="{px:.2f}" y1="{y0 - plot_h}" x2="{px:.2f}" '
                f'y2="{y0}" stroke="{THRESHOLD_COLOR}"/>')
            parts.append(
                f'<text x="{px + 4:.2f}" y="{oy + MARGIN_T + 12}" '
                f'{TEXT_STYLE}>{picks[pi]}</text>')
        parts.append(
            f'<text x="{x0 - 6}" y="{y0 + 4}" text-anchor="end" '
            f'{TEXT_STYLE}>0</text>')
        parts.append(
            f'<text x="{x0 - 6}" y="{y0 - plot_h + 4}" text-anchor="end" '
            f'{TEXT_STYLE}>1</text>')
        parts.append(
            f'<text x="{x0 + plot_w:.2f}" y="{y0 + 14}" text-anchor="end" '
            f'{TEXT_STYLE}>{n}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def scatter_svg(xs, ys, xlabel: str = "x", ylabel: str = "y",
                title: str = "") -> str:
    """Scatter of per-pair points with a cross at the mean."""
    xs, ys = [float(x) for x in xs], [float(y) for y in ys]
    if len(xs) != len(ys) or not xs:
        raise ValueError("scatter needs matching non-empty coordinate lists")

    def span(vals):
        lo, hi = min(vals), max(vals)
        if hi <= lo:
            pad = abs(lo) * 0.1 + 1e-6
            return lo - pad, hi + pad
        pad = (hi - lo) * 0.06
        return lo - pad, hi + pad

    x_lo, x_hi = span(xs)
    y_lo, y_hi = span(ys)
    x0, y0 = MARGIN_L, PANEL_H - MARGIN_B
    plot_w = PANEL_W - MARGIN_L - MARGIN_R
    plot_h = PANEL_H - MARGIN_T - MARGIN_B

    def sx(v):
        return x0 + plot_w * (v - x_lo) / (x_hi - x_lo)

    def sy(v):
        return y0 - plot_h * (v - y_lo) / (y_hi - y_lo)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" '
        f'height="{PANEL_H}" viewBox="0 0 {PANEL_W} {PANEL_H}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    parts += _panel_axes(0, 0, title or f"{ylabel} vs {xlabel}")
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" '
                     f'fill="{POINT_COLOR}" fill-opacity="0.7"/>')
    mx = sum(xs) / len(xs)
    my = sum(ys) / len(ys)
    parts.append(f'<path d="M {sx(mx) - 5:.2f} {sy(my):.2f} h 10 '
                 f'M {sx(mx):.2f} {sy(my) - 5:.2f} v 10" '
                 f'stroke="{MEAN_COLOR}" stroke-width="2"/>')
    for frac in (0.0, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<text x="{sx(xv):.2f}" y="{y0 + 14}" '
                     f'text-anchor="middle" {TEXT_STYLE}>{_fmt(xv)}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{sy(yv) + 4:.2f}" '
                     f'text-anchor="end" {TEXT_STYLE}>{_fmt(yv)}</text>')
    parts.append(f'<text x="{x0 + plot_w / 2:.1f}" y="{PANEL_H - 6}" '
                 f'text-anchor="middle" {TEXT_STYLE}>{escape(xlabel)}</text>')
    parts.append(f'<text x="14" y="{MARGIN_T - 8}" {TEXT_STYLE}>'
                 f'{escape(ylabel)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
