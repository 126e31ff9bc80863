"""Tiny deterministic SVG emitters: heatmaps, scatters, curves, bars.

No plotting dependency; output is a plain XML string whose bytes depend
only on the inputs (fixed float formatting, no timestamps).
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PAD = 40.0
PLOT = 400.0
SIZE = PLOT + 2 * PAD

PALETTE = ("#3b6bb0", "#c84b4b", "#4f9d55", "#8961ad", "#d28a3d", "#5c5c5c")

# dark-to-bright ramp used for density heatmaps
_RAMP = (
    (0.0, (0x44, 0x01, 0x54)),
    (0.25, (0x3b, 0x52, 0x8b)),
    (0.5, (0x21, 0x91, 0x8c)),
    (0.75, (0x5e, 0xc9, 0x62)),
    (1.0, (0xfd, 0xe7, 0x25)),
)


def _f(v: float) -> str:
    return f"{float(v):.4f}"


def ramp_color(t: float) -> str:
    t = min(1.0, max(0.0, float(t)))
    for (t0, c0), (t1, c1) in zip(_RAMP, _RAMP[1:]):
        if t <= t1:
            w = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
            rgb = [round(a + w * (b - a)) for a, b in zip(c0, c1)]
            return "#{:02x}{:02x}{:02x}".format(*rgb)
    return "#{:02x}{:02x}{:02x}".format(*_RAMP[-1][1])


def _document(parts: list[str], width: float = SIZE, height: float = SIZE) -> str:
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" '
        f'height="{_f(height)}" viewBox="0 0 {_f(width)} {_f(height)}">\n'
    )
    return head + "\n".join(parts) + "\n</svg>\n"


def _frame(title: str) -> list[str]:
    parts = [
        f'<rect x="{_f(PAD)}" y="{_f(PAD)}" width="{_f(PLOT)}" '
        f'height="{_f(PLOT)}" fill="none" stroke="#333333" stroke-width="1"/>'
    ]
    if title:
        parts.append(
            f'<text x="{_f(SIZE / 2)}" y="{_f(PAD - 12)}" font-size="16" '
            f'font-family="sans-serif" text-anchor="middle">{escape(title)}</text>'
        )
    return parts


class _Map:
    """Data-to-pixel transform for a fixed rectangular view."""

    def __init__(self, x0, x1, y0, y1):
        self.x0, self.x1, self.y0, self.y1 = x0, x1, y0, y1

    def x(self, v) -> float:
        return PAD + (v - self.x0) / (self.x1 - self.x0) * PLOT

    def y(self, v) -> float:
        return PAD + (self.y1 - v) / (self.y1 - self.y0) * PLOT


def heatmap(values: np.ndarray, bounds=(-1.0, 1.0, -1.0, 1.0),
            title: str = "") -> str:
    """values[iy, ix] over a uniform grid on bounds (x0, x1, y0, y1);
    row iy = 0 sits at the bottom edge."""
    values = np.asarray(values, dtype=np.float64)
    ny, nx = values.shape
    vmax = float(values.max())
    scale = 1.0 / vmax if vmax > 0 else 0.0
    cw, ch = PLOT / nx, PLOT / ny
    parts = []
    for iy in range(ny):
        ypix = PAD + PLOT - (iy + 1) * ch
        for ix in range(nx):
            color = ramp_color(values[iy, ix] * scale)
            parts.append(
                f'<rect x="{_f(PAD + ix * cw)}" y="{_f(ypix)}" '
                f'width="{_f(cw)}" height="{_f(ch)}" fill="{color}"/>'
            )
    parts.extend(_frame(title))
    return _document(parts)


def scatter(points: np.ndarray, bounds=(-1.0, 1.0, -1.0, 1.0), title: str = "",
            color: str = PALETTE[0], radius: float = 1.6,
            backdrop: np.ndarray | None = None) -> str:
    m = _Map(*bounds)
    parts = []

    def circles(pts, fill, r):
        out = []
        for x, y in np.asarray(pts, dtype=np.float64):
            out.append(
                f'<circle cx="{_f(m.x(x))}" cy="{_f(m.y(y))}" r="{_f(r)}" '
                f'fill="{fill}" fill-opacity="0.55"/>'
            )
        return out

    if backdrop is not None:
        parts.extend(circles(backdrop, "#bbbbbb", radius * 0.75))
    parts.extend(circles(points, color, radius))
    parts.extend(_frame(title))
    return _document(parts)


def curves(series: list[tuple[str, np.ndarray, np.ndarray]], title: str = "",
           xlabel: str = "", ylabel: str = "") -> str:
    """series = [(label, xs, ys), ...]; bounds fit the data with 5% headroom."""
    xs_all = np.concatenate([np.asarray(s[1], dtype=np.float64) for s in series])
    ys_all = np.concatenate([np.asarray(s[2], dtype=np.float64) for s in series])
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    padx, pady = 0.05 * (x1 - x0), 0.05 * (y1 - y0)
    m = _Map(x0 - padx, x1 + padx, y0 - pady, y1 + pady)
    parts = []
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(m.x(x))},{_f(m.y(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{_f(PAD + 8)}" y="{_f(PAD + 16 + 14 * i)}" '
            f'font-size="11" font-family="sans-serif" fill="{color}">'
            f'{escape(label)}</text>'
        )
    for v, anchor, px, py in (
        (x0, "start", PAD, SIZE - PAD / 3),
        (x1, "end", PAD + PLOT, SIZE - PAD / 3),
        (y0, "start", 2.0, PAD + PLOT),
        (y1, "start", 2.0, PAD + 10),
    ):
        parts.append(
            f'<text x="{_f(px)}" y="{_f(py)}" font-size="10" '
            f'font-family="sans-serif" text-anchor="{anchor}">{_f(v)}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{_f(SIZE / 2)}" y="{_f(SIZE - 6)}" font-size="12" '
            f'font-family="sans-serif" text-anchor="middle">{escape(xlabel)}</text>'
        )
    if ylabel:
        parts.append(
            f'<text x="12" y="{_f(SIZE / 2)}" font-size="12" '
            f'font-family="sans-serif" text-anchor="middle" '
            f'transform="rotate(-90 12 {_f(SIZE / 2)})">{escape(ylabel)}</text>'
        )
    parts.extend(_frame(title))
    return _document(parts)


def grouped_bars(group_labels: list[str], series_labels: list[str],
                 values: np.ndarray, title: str = "") -> str:
    """values[group][series]; bars share a zero baseline."""
    values = np.asarray(values, dtype=np.float64)
    lo = min(0.0, float(values.min()))
    hi = max(0.0, float(values.max()))
    if hi == lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    m = _Map(0.0, 1.0, lo - pad, hi + pad)
    ngroups, nseries = values.shape
    group_w = 1.0 / ngroups
    bar_w = group_w * 0.8 / nseries
    parts = []
    zero = m.y(0.0)
    for gi in range(ngroups):
        for si in range(nseries):
            v = values[gi, si]
            left = gi * group_w + group_w * 0.1 + si * bar_w
            top = min(m.y(v), zero)
            parts.append(
                f'<rect x="{_f(m.x(left))}" y="{_f(top)}" '
                f'width="{_f(bar_w * PLOT)}" height="{_f(abs(m.y(v) - zero))}" '
                f'fill="{PALETTE[si % len(PALETTE)]}"/>'
            )
        parts.append(
            f'<text x="{_f(m.x(gi * group_w + group_w / 2))}" '
            f'y="{_f(SIZE - PAD / 3)}" font-size="11" font-family="sans-serif" '
            f'text-anchor="middle">{escape(group_labels[gi])}</text>'
        )
    parts.append(
        f'<line x1="{_f(PAD)}" y1="{_f(zero)}" x2="{_f(PAD + PLOT)}" '
        f'y2="{_f(zero)}" stroke="#333333" stroke-width="1"/>'
    )
    for si, label in enumerate(series_labels):
        color = PALETTE[si % len(PALETTE)]
        parts.append(
            f'<text x="{_f(PAD + 8)}" y="{_f(PAD + 16 + 14 * si)}" '
            f'font-size="11" font-family="sans-serif" fill="{color}">'
            f'{escape(label)}</text>'
        )
    for v, py in ((lo, PAD + PLOT), (hi, PAD + 10)):
        parts.append(
            f'<text x="2" y="{_f(py)}" font-size="10" '
            f'font-family="sans-serif">{_f(v)}</text>'
        )
    parts.extend(_frame(title))
    return _document(parts)
