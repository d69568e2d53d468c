"""Dependency-free SVG emission for sweep results.

The chart mirrors the loss-weight sensitivity figure: one marker per KD
run over the loss-weight axis, and a horizontal reference line for the
weight-free stage-distillation result. Elements carry stable classes
(``kd-point``, ``sskd-line``) so tests can assert structure.
"""

from __future__ import annotations

from .errors import UsageError

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 36, 48


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def sweep_svg(points, reference, title="top-1 vs loss weight", reference_label="sskd"):
    """SVG text for KD (loss_weight, top1) points plus one reference line."""
    if not points:
        raise UsageError("no sweep points to plot")
    xs = [float(p[0]) for p in points]
    ys = [float(p[1]) for p in points] + [float(reference)]
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = min(ys), max(ys)
    pad = max((y_hi - y_lo) * 0.15, 0.5)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return MARGIN_T + (y_hi - y) / (y_hi - y_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#999"/>',
    ]
    for tx in sorted(set(xs)):
        out.append(
            f'<text x="{px(tx):.1f}" y="{HEIGHT - MARGIN_B + 16}" text-anchor="middle" '
            f'font-size="11">{tx:g}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        out.append(
            f'<text x="{MARGIN_L - 6}" y="{py(ty):.1f}" text-anchor="end" '
            f'font-size="11">{ty:.1f}</text>'
        )
        out.append(
            f'<line x1="{MARGIN_L}" y1="{py(ty):.1f}" x2="{WIDTH - MARGIN_R}" '
            f'y2="{py(ty):.1f}" stroke="#eee"/>'
        )
    out.append(
        f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">'
        "loss weight</text>"
    )
    ref_y = py(float(reference))
    out.append(
        f'<line class="sskd-line" x1="{MARGIN_L}" y1="{ref_y:.2f}" '
        f'x2="{WIDTH - MARGIN_R}" y2="{ref_y:.2f}" stroke="#c22" stroke-width="2" '
        'stroke-dasharray="6,3"/>'
    )
    out.append(
        f'<text x="{WIDTH - MARGIN_R - 4}" y="{ref_y - 6:.2f}" text-anchor="end" '
        f'font-size="11" fill="#c22">{reference_label} = {float(reference):.2f}</text>'
    )
    path = " ".join(
        f"{'M' if i == 0 else 'L'} {px(x):.2f} {py(y):.2f}"
        for i, (x, y) in enumerate(sorted(zip(xs, [float(p[1]) for p in points])))
    )
    out.append(f'<path d="{path}" fill="none" stroke="#26c" stroke-width="1.5"/>')
    for x, y in zip(xs, [float(p[1]) for p in points]):
        out.append(
            f'<circle class="kd-point" cx="{px(x):.2f}" cy="{py(y):.2f}" r="4" fill="#26c"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_sweep_svg(points, reference, path, **kw):
    with open(path, "w", encoding="utf-8") as f:
        f.write(sweep_svg(points, reference, **kw))
