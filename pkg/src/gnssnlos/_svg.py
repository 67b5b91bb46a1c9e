"""Tiny hand-rolled SVG emitters.

Charts are written directly so outputs are byte-identical across runs and
platforms; a plotting library would embed dates and hashed element ids.
"""

from __future__ import annotations


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def bar_chart(labels, values, title: str, width: int = 640, height: int = 360) -> str:
    """Vertical bar chart with a zero baseline; values may be negative."""
    margin = 60
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    vmax = max(max(values), 0.0)
    vmin = min(min(values), 0.0)
    span = (vmax - vmin) or 1.0
    zero_y = margin + plot_h * (vmax / span)
    n = len(values)
    bar_w = plot_w / max(n, 1) * 0.6
    step = plot_w / max(n, 1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>',
        f'<line x1="{margin}" y1="{_fmt(zero_y)}" x2="{width - margin}" y2="{_fmt(zero_y)}" '
        f'stroke="black" stroke-width="1"/>',
    ]
    for i, (label, value) in enumerate(zip(labels, values)):
        x = margin + i * step + (step - bar_w) / 2
        h = abs(value) / span * plot_h
        y = zero_y - h if value >= 0 else zero_y
        parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w)}" height="{_fmt(h)}" '
            f'fill="#4878a8"/>'
        )
        parts.append(
            f'<text x="{_fmt(x + bar_w / 2)}" y="{height - margin + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{label}</text>'
        )
        vy = y - 4 if value >= 0 else y + h + 12
        parts.append(
            f'<text x="{_fmt(x + bar_w / 2)}" y="{_fmt(vy)}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{value:.3f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def line_overlay(series, title: str, xlabel: str, ylabel: str,
                 width: int = 640, height: int = 480) -> str:
    """Overlayed 2-D polylines; `series` is a list of (name, color, xs, ys)."""
    margin = 60
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    all_x = [x for _, _, xs, _ in series for x in xs]
    all_y = [y for _, _, _, ys in series for y in ys]
    if not all_x:
        all_x, all_y = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return margin + (x - x_lo) / x_span * plot_w

    def sy(y):
        return height - margin - (y - y_lo) / y_span * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>',
        f'<rect x="{margin}" y="{margin}" width="{plot_w}" height="{plot_h}" fill="none" '
        f'stroke="black" stroke-width="1"/>',
        f'<text x="{width / 2}" y="{height - 16}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">{xlabel}</text>',
        f'<text x="18" y="{height / 2}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 18 {height / 2})">{ylabel}</text>',
    ]
    for idx, (name, color, xs, ys) in enumerate(series):
        points = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = margin + 18 + idx * 16
        parts.append(
            f'<line x1="{width - margin - 110}" y1="{ly - 4}" x2="{width - margin - 86}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{width - margin - 80}" y="{ly}" font-family="sans-serif" '
            f'font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
