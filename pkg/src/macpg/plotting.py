"""Learning-curve plots written directly as SVG text.

Output depends only on the input numbers, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f")
WIDTH, HEIGHT = 720, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 150, 36, 48


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over at most ``window`` points (shorter at the start)."""
    x = np.asarray(x, dtype=np.float64)
    if window <= 1:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def nice_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    """Evenly spaced round numbers spanning at least [lo, hi]."""
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.floor(lo / step + 1e-9)
    last = math.ceil(hi / step - 1e-9)
    return [round(k * step, 10) for k in range(first, last + 1)]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:g}"


def learning_curve_svg(series: dict, title: str, y_label: str = "return per episode") -> str:
    """SVG for ``{label: (mean, stderr_or_None)}``; bands show mean +- stderr.

    Series are drawn in sorted label order so the output does not depend on
    dict insertion order.
    """
    if not series:
        raise ValueError("nothing to plot")
    labels = sorted(series)
    n_max = max(len(series[k][0]) for k in labels)
    lows, highs = [], []
    for k in labels:
        mean, se = series[k]
        mean = np.asarray(mean, dtype=np.float64)
        band = np.zeros_like(mean) if se is None else np.asarray(se, dtype=np.float64)
        lows.append(np.min(mean - band))
        highs.append(np.max(mean + band))
    y_ticks = nice_ticks(min(0.0, min(lows)), max(highs))
    y_lo, y_hi = y_ticks[0], y_ticks[-1]
    x_ticks = nice_ticks(0, max(n_max - 1, 1))
    x_hi = max(x_ticks[-1], 1)
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(i):
        return MARGIN_L + pw * i / x_hi

    def py(v):
        return MARGIN_T + ph * (1 - (v - y_lo) / (y_hi - y_lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-size="14">'
           f'{escape(title)}</text>']
    for t in y_ticks:
        y = _fmt(py(t))
        out.append(f'<line x1="{MARGIN_L}" x2="{MARGIN_L + pw}" y1="{y}" y2="{y}" '
                   f'stroke="#e0e0e0"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{y}" text-anchor="end" '
                   f'dominant-baseline="middle">{_label(t)}</text>')
    for t in x_ticks:
        x = _fmt(px(t))
        out.append(f'<text x="{x}" y="{MARGIN_T + ph + 18}" text-anchor="middle">{_label(t)}</text>')
    out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" '
               f'stroke="black"/>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.0f}" y="{HEIGHT - 8}" text-anchor="middle">'
               f'episode</text>')
    out.append(f'<text transform="translate(16 {MARGIN_T + ph / 2:.0f}) rotate(-90)" '
               f'text-anchor="middle">{escape(y_label)}</text>')

    for j, k in enumerate(labels):
        color = PALETTE[j % len(PALETTE)]
        mean, se = series[k]
        mean = np.asarray(mean, dtype=np.float64)
        xs = [_fmt(px(i)) for i in range(len(mean))]
        if se is not None:
            se = np.asarray(se, dtype=np.float64)
            upper = [f"{x},{_fmt(py(v))}" for x, v in zip(xs, mean + se)]
            lower = [f"{x},{_fmt(py(v))}" for x, v in zip(xs[::-1], (mean - se)[::-1])]
            out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{x},{_fmt(py(v))}" for x, v in zip(xs, mean))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>')
        ly = MARGIN_T + 14 + 18 * j
        lx = MARGIN_L + pw + 12
        out.append(f'<line x1="{lx}" x2="{lx + 18}" y1="{ly}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="3"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}" dominant-baseline="middle">{escape(k)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
