"""Bare-bones SVG bar charts (no plotting dependency)."""

from __future__ import annotations

from html import escape

PALETTE = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7"]
WIDTH, HEIGHT, PAD = 640, 320, 40


def _frame(title: str, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">'
    )
    t = f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>'
    axes = (
        f'<path d="M{PAD} {PAD} L{PAD} {HEIGHT - PAD} L{WIDTH - PAD} {HEIGHT - PAD}" '
        'stroke="black" fill="none"/>'
    )
    return "\n".join([head, t, axes, *body, "</svg>"]) + "\n"


def bar_chart(series: dict[str, list[float]], title: str = "", threshold: float | None = None) -> str:
    """Grouped bars, one group per index, one colour per series; optional dashed threshold line."""
    names = list(series)
    groups = max((len(v) for v in series.values()), default=0)
    top = max([max(v, default=0.0) for v in series.values()] + [threshold or 0.0, 1e-12])
    plot_w, plot_h = WIDTH - 2 * PAD, HEIGHT - 2 * PAD
    group_w = plot_w / max(groups, 1)
    bar_w = group_w * 0.8 / max(len(names), 1)
    body = []
    for j, name in enumerate(names):
        colour = PALETTE[j % len(PALETTE)]
        for i, v in enumerate(series[name]):
            h = plot_h * v / top
            x = PAD + i * group_w + group_w * 0.1 + j * bar_w
            body.append(
                f'<rect x="{x:.2f}" y="{HEIGHT - PAD - h:.2f}" width="{bar_w:.2f}" '
                f'height="{h:.2f}" fill="{colour}"/>'
            )
        body.append(
            f'<text x="{WIDTH - PAD}" y="{PAD + 14 * j}" text-anchor="end" font-size="11" '
            f'fill="{colour}">{escape(name)}</text>'
        )
    if threshold is not None:
        y = HEIGHT - PAD - plot_h * threshold / top
        body.append(
            f'<path d="M{PAD} {y:.2f} L{WIDTH - PAD} {y:.2f}" stroke="black" stroke-dasharray="6,4"/>'
        )
    return _frame(title, body)


def stacked_bars(counts: dict[str, dict[str, int]], title: str = "") -> str:
    """One stacked bar per key of ``counts``; segments are the inner categories."""
    keys = list(counts)
    categories = sorted({c for inner in counts.values() for c in inner})
    top = max([sum(inner.values()) for inner in counts.values()] + [1])
    plot_w, plot_h = WIDTH - 2 * PAD, HEIGHT - 2 * PAD
    slot = plot_w / max(len(keys), 1)
    body = []
    for i, key in enumerate(keys):
        y = HEIGHT - PAD
        for j, cat in enumerate(categories):
            h = plot_h * counts[key].get(cat, 0) / top
            y -= h
            body.append(
                f'<rect x="{PAD + i * slot + slot * 0.1:.2f}" y="{y:.2f}" width="{slot * 0.8:.2f}" '
                f'height="{h:.2f}" fill="{PALETTE[j % len(PALETTE)]}"/>'
            )
    for j, cat in enumerate(categories):
        body.append(
            f'<text x="{WIDTH - PAD}" y="{PAD + 14 * j}" text-anchor="end" font-size="11" '
            f'fill="{PALETTE[j % len(PALETTE)]}">{escape(cat)}</text>'
        )
    return _frame(title, body)
