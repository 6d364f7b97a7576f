"""Deterministic SVG figures: accuracy-vs-epsilon curve and cloud galleries."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .errors import UsageError

WIDTH, HEIGHT = 480, 320
MARGIN = 50


def _fmt(v):
    return f"{v:.2f}"


class _Svg:
    def __init__(self, width, height):
        self.width, self.height = width, height
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]

    def add(self, line):
        self.parts.append(line)

    def text(self, x, y, s, anchor="middle", size=12, cls=None):
        c = f' class="{cls}"' if cls else ""
        self.add(f'<text{c} x="{_fmt(x)}" y="{_fmt(y)}" font-family="sans-serif" '
                 f'font-size="{size}" text-anchor="{anchor}">{escape(s)}</text>')

    def render(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def accuracy_curve_svg(rows, absolute_threshold=False, title="Perturbed accuracy vs. epsilon"):
    """SVG text for a line chart of perturbed accuracy against epsilon.

    ``rows`` are sweep rows with ``epsilon``, ``i_acc`` and ``f_acc``.
    """
    if len(rows) < 2:
        raise UsageError("accuracy curve needs at least two sweep rows")
    eps = np.array([r.epsilon for r in rows], dtype=float)
    acc = np.array([r.f_acc for r in rows], dtype=float)
    lo, hi = eps.min(), eps.max()
    span = hi - lo if hi > lo else 1.0
    x0, x1 = MARGIN, WIDTH - MARGIN / 2
    y0, y1 = HEIGHT - MARGIN, MARGIN / 2

    def px(e):
        return x0 + (e - lo) / span * (x1 - x0)

    def py(a):
        return y0 - a * (y0 - y1)

    svg = _Svg(WIDTH, HEIGHT)
    svg.text(WIDTH / 2, 16, title, size=13)
    svg.add(f'<line class="axis" x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x1)}" y2="{_fmt(y0)}" stroke="black"/>')
    svg.add(f'<line class="axis" x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x0)}" y2="{_fmt(y1)}" stroke="black"/>')
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        svg.text(x0 - 6, py(a) + 4, f"{a:.2f}", anchor="end", size=10)
    for e in eps:
        svg.text(px(e), y0 + 16, f"{e:g}", size=10)
    svg.text((x0 + x1) / 2, HEIGHT - 10, "epsilon")
    svg.text(14, (y0 + y1) / 2, "accuracy")

    threshold = 0.5 if absolute_threshold else 0.5 * rows[0].i_acc
    svg.add(f'<line class="threshold" x1="{_fmt(x0)}" y1="{_fmt(py(threshold))}" x2="{_fmt(x1)}" '
            f'y2="{_fmt(py(threshold))}" stroke="red" stroke-dasharray="4 3"/>')
    pts = " ".join(f"{_fmt(px(e))},{_fmt(py(a))}" for e, a in zip(eps, acc))
    svg.add(f'<polyline class="curve" points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>')
    for e, a in zip(eps, acc):
        svg.add(f'<circle class="marker" cx="{_fmt(px(e))}" cy="{_fmt(py(a))}" r="3.5" fill="steelblue"/>')
    return svg.render()


def plot_accuracy_curve(report, path):
    text = accuracy_curve_svg(report.rows, getattr(report, "absolute_threshold", False))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


PANEL = 160


def _panel(svg, points, x_off, y_off, cls):
    svg.add(f'<g class="{cls}" transform="translate({_fmt(x_off)},{_fmt(y_off)})">')
    svg.add(f'<rect x="0" y="0" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/>')
    pad = 6
    for x, y in np.asarray(points, dtype=float)[:, :2]:
        # XY projection; data lives in the unit cube, y grows upward
        cx = pad + x * (PANEL - 2 * pad)
        cy = PANEL - pad - y * (PANEL - 2 * pad)
        svg.add(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="1.2" fill="black"/>')
    svg.add("</g>")


def gallery_svg(entries, class_names=None):
    """SVG gallery, one row per entry: clean and perturbed XY projections.

    Each entry is ``(epsilon, clean_points, perturbed_points, i_pred, f_pred)``.
    """
    if not entries:
        raise UsageError("gallery needs at least one clean/perturbed pair")

    def name(c):
        return class_names[c] if class_names else str(c)

    row_h = PANEL + 40
    svg = _Svg(2 * PANEL + 3 * 20, len(entries) * row_h + 10)
    for r, (eps, clean, pert, i_pred, f_pred) in enumerate(entries):
        top = 10 + r * row_h
        svg.text(20 + PANEL + 10, top + 14, f"eps={eps:g}: {name(i_pred)} → {name(f_pred)}", cls="title")
        _panel(svg, clean, 20, top + 24, "scatter clean")
        _panel(svg, pert, 40 + PANEL, top + 24, "scatter perturbed")
    return svg.render()


def render_cloud_gallery(entries, path, class_names=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(gallery_svg(entries, class_names))
    return path
