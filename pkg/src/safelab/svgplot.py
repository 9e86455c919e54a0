"""Dependency-free SVG figures for training metrics.

Fixed 800x500 canvas. Data coordinates map linearly into a padded plot
rectangle; each figure documents its own mapping in a comment element so
the output is self-describing.
"""

from __future__ import annotations

import numpy as np

__all__ = ["learning_curves_svg", "cost_vs_max_reward_svg"]

WIDTH, HEIGHT = 800, 500
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 15, 30, 40
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


class _Panel:
    """Linear mapping from data space into one pixel rectangle."""

    def __init__(self, x0, y0, x1, y1, xlim, ylim):
        self.x0, self.y0, self.x1, self.y1 = x0, y0, x1, y1
        self.xlim, self.ylim = xlim, ylim

    def px(self, x):
        lo, hi = self.xlim
        span = (hi - lo) or 1.0
        return self.x0 + (x - lo) / span * (self.x1 - self.x0)

    def py(self, y):
        lo, hi = self.ylim
        span = (hi - lo) or 1.0
        return self.y1 - (y - lo) / span * (self.y1 - self.y0)

    def polyline(self, xs, ys, color, width=1.5, dash=None):
        pts = " ".join(f"{self.px(x):.2f},{self.py(y):.2f}" for x, y in zip(xs, ys))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        return (
            f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{dash_attr} '
            f'points="{pts}"/>'
        )

    def band(self, xs, lo_ys, hi_ys, color, opacity=0.2):
        fwd = [f"{self.px(x):.2f},{self.py(y):.2f}" for x, y in zip(xs, hi_ys)]
        back = [f"{self.px(x):.2f},{self.py(y):.2f}" for x, y in zip(xs[::-1], lo_ys[::-1])]
        return (
            f'<polygon fill="{color}" fill-opacity="{opacity}" stroke="none" '
            f'points="{" ".join(fwd + back)}"/>'
        )

    def frame(self, xlabel, ylabel):
        parts = [
            f'<rect x="{self.x0}" y="{self.y0}" width="{self.x1 - self.x0}" '
            f'height="{self.y1 - self.y0}" fill="none" stroke="#333"/>'
        ]
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            xv = self.xlim[0] + frac * (self.xlim[1] - self.xlim[0])
            yv = self.ylim[0] + frac * (self.ylim[1] - self.ylim[0])
            parts.append(
                f'<text x="{self.px(xv):.1f}" y="{self.y1 + 14}" font-size="10" '
                f'text-anchor="middle">{_fmt(xv)}</text>'
            )
            parts.append(
                f'<text x="{self.x0 - 4}" y="{self.py(yv) + 3:.1f}" font-size="10" '
                f'text-anchor="end">{_fmt(yv)}</text>'
            )
        parts.append(
            f'<text x="{(self.x0 + self.x1) / 2:.0f}" y="{self.y1 + 30}" font-size="12" '
            f'text-anchor="middle">{xlabel}</text>'
        )
        parts.append(
            f'<text x="{self.x0 - 45}" y="{(self.y0 + self.y1) / 2:.0f}" font-size="12" '
            f'text-anchor="middle" transform="rotate(-90 {self.x0 - 45} '
            f'{(self.y0 + self.y1) / 2:.0f})">{ylabel}</text>'
        )
        return parts


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1000 or abs(v) < 0.01:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _svg(parts) -> str:
    body = "\n".join(parts)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">\n<rect width="{WIDTH}" height="{HEIGHT}" '
        f'fill="white"/>\n{body}\n</svg>\n'
    )


def _limits(arrays, pad=0.05):
    lo = min(float(np.min(a)) for a in arrays)
    hi = max(float(np.max(a)) for a in arrays)
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    return lo - pad * span, hi + pad * span


def learning_curves_svg(per_seed_metrics: list, c_th: float, path, title: str = "") -> None:
    """Two stacked panels: mean eval return and mean eval cost across seeds.

    The band spans the min..max across seeds per step; the cost panel draws
    a dashed horizontal line at the threshold.
    """
    if not per_seed_metrics:
        raise ValueError("need at least one metrics sequence")
    steps = np.array([row["step"] for row in per_seed_metrics[0]], dtype=np.float64)
    for rows in per_seed_metrics:
        if len(rows) != len(steps):
            raise ValueError("metrics sequences must share the same step grid")
    returns = np.array([[row["eval_return"] for row in rows] for rows in per_seed_metrics])
    costs = np.array([[row["eval_cost"] for row in rows] for rows in per_seed_metrics])

    half = (HEIGHT - MARGIN_T - MARGIN_B - 30) / 2
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    top = _Panel(x0, MARGIN_T, x1, MARGIN_T + half, _limits([steps]), _limits([returns]))
    bot = _Panel(
        x0,
        MARGIN_T + half + 30,
        x1,
        HEIGHT - MARGIN_B,
        _limits([steps]),
        _limits([costs, np.array([c_th])]),
    )
    parts = [f"<!-- linear axes; canvas {WIDTH}x{HEIGHT}; band = min..max over seeds -->"]
    if title:
        parts.append(
            f'<text x="{WIDTH / 2:.0f}" y="18" font-size="13" text-anchor="middle">{title}</text>'
        )
    parts += top.frame("update step", "eval return")
    parts.append(top.band(steps, returns.min(axis=0), returns.max(axis=0), COLORS[0]))
    parts.append(top.polyline(steps, returns.mean(axis=0), COLORS[0]))
    parts += bot.frame("update step", "eval cost")
    parts.append(bot.band(steps, costs.min(axis=0), costs.max(axis=0), COLORS[1]))
    parts.append(bot.polyline(steps, costs.mean(axis=0), COLORS[1]))
    parts.append(
        bot.polyline(
            np.array([steps[0], steps[-1]]), np.array([c_th, c_th]), "#000000", 1.0, "6,4"
        )
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_svg(parts))


def cost_vs_max_reward_svg(per_seed_metrics: list, path, title: str = "") -> None:
    """Best return achieved so far against cumulative environment cost, per seed."""
    if not per_seed_metrics:
        raise ValueError("need at least one metrics sequence")
    xs_all = [np.array([row["cum_env_cost"] for row in rows]) for rows in per_seed_metrics]
    ys_all = [np.array([row["max_return_so_far"] for row in rows]) for rows in per_seed_metrics]
    panel = _Panel(
        MARGIN_L, MARGIN_T + 10, WIDTH - MARGIN_R, HEIGHT - MARGIN_B,
        _limits(xs_all), _limits(ys_all),
    )
    parts = [f"<!-- linear axes; canvas {WIDTH}x{HEIGHT}; one polyline per seed -->"]
    if title:
        parts.append(
            f'<text x="{WIDTH / 2:.0f}" y="18" font-size="13" text-anchor="middle">{title}</text>'
        )
    parts += panel.frame("cumulative environment cost", "max return so far")
    for i, (xs, ys) in enumerate(zip(xs_all, ys_all)):
        parts.append(panel.polyline(xs, ys, COLORS[i % len(COLORS)]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_svg(parts))
