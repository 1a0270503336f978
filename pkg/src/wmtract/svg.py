"""Deterministic SVG 1.1 Bland-Altman scatter plots."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

from .errors import InsufficientDataError

WIDTH, HEIGHT = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 80, 20, 20, 50
PAD = 0.08


def _fmt(v: float) -> str:
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def _span(lo: float, hi: float) -> tuple[float, float]:
    if hi == lo:
        half = 0.5 if lo == 0 else abs(lo) * 0.1
        return lo - half, hi + half
    pad = (hi - lo) * PAD
    return lo - pad, hi + pad


@dataclass(frozen=True)
class Viewport:
    """Linear data-to-pixel map of the plotting area."""

    x0: float
    x1: float
    y0: float
    y1: float

    @classmethod
    def fit(cls, table: Sequence[tuple[float, float]], loa: Sequence[float]) -> "Viewport":
        xs = [m for m, _ in table]
        ys = [d for _, d in table] + list(loa)
        return cls(*_span(min(xs), max(xs)), *_span(min(ys), max(ys)))

    def px(self, x: float) -> float:
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)

    def py(self, y: float) -> float:
        return HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)

    def data_y(self, py: float) -> float:
        return self.y0 + (HEIGHT - BOTTOM - py) / (HEIGHT - TOP - BOTTOM) * (self.y1 - self.y0)


def emit_bland_altman_svg(
    table: Sequence[tuple[float, float]],
    loa: Sequence[float],
    measure: str = "measure",
    unit: str = "",
) -> str:
    """One circle per (mean, diff) pair and horizontal lines at ``loa``
    (lower limit, mean difference, upper limit)."""
    if len(table) == 0:
        raise InsufficientDataError("Bland-Altman table is empty")
    if len(loa) != 3:
        raise ValueError("loa must be (lower, mean, upper)")
    vp = Viewport.fit(table, loa)
    u = f" ({unit})" if unit else ""
    xl, xr = _fmt(LEFT), _fmt(WIDTH - RIGHT)
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="{LEFT}" y="{TOP}" width="{WIDTH - LEFT - RIGHT}" height="{HEIGHT - TOP - BOTTOM}" '
        'fill="none" stroke="black"/>',
    ]
    for cls, y, dash in (("loa-lower", loa[0], "4,3"), ("mean-diff", loa[1], ""), ("loa-upper", loa[2], "4,3")):
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        yy = _fmt(vp.py(y))
        out.append(f'<line class="{cls}" x1="{xl}" y1="{yy}" x2="{xr}" y2="{yy}" stroke="gray"{dash_attr}/>')
    for m, d in table:
        out.append(f'<circle cx="{_fmt(vp.px(m))}" cy="{_fmt(vp.py(d))}" r="3" fill="steelblue"/>')
    for x in (vp.x0, vp.x1):
        out.append(f'<text x="{_fmt(vp.px(x))}" y="{HEIGHT - BOTTOM + 15}" font-size="10" text-anchor="middle">{x:.4g}</text>')
    for y in (vp.y0, vp.y1):
        out.append(f'<text x="{LEFT - 5}" y="{_fmt(vp.py(y))}" font-size="10" text-anchor="end">{y:.4g}</text>')
    name = escape(measure)
    out.append(
        f'<text x="{(LEFT + WIDTH - RIGHT) / 2:.1f}" y="{HEIGHT - 10}" font-size="12" text-anchor="middle">'
        f"Mean of scan and rescan {name}{escape(u)}</text>"
    )
    cy = (TOP + HEIGHT - BOTTOM) / 2
    out.append(
        f'<text x="15" y="{cy:.1f}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {cy:.1f})">'
        f"Rescan - scan {name}{escape(u)}</text>"
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"
