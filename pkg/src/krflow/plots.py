"""Minimal SVG line charts for run artifacts.

Hand-rolled polyline renderer: the output is a standalone SVG string with
axes, tick labels, and a legend.  No plotting dependency; charts are meant
for quick inspection of potential profiles, time traces, and decay fits,
not for publication.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

WIDTH = 640
HEIGHT = 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 58, 16, 34, 44

PALETTE = ("#1f6fb2", "#d95f02", "#2a9d64", "#aa3377",
           "#7a6aa8", "#8c7115", "#444444")


def _finite_range(values) -> Optional[tuple]:
    lo = math.inf
    hi = -math.inf
    for v in values:
        if math.isfinite(v):
            lo = min(lo, v)
            hi = max(hi, v)
    if lo > hi:
        return None
    if lo == hi:
        pad = 0.5 if lo == 0 else abs(lo) * 0.05
        return lo - pad, hi + pad
    return lo, hi


def _ticks(lo: float, hi: float, count: int = 5) -> list:
    span = hi - lo
    raw = span / max(count - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if span / step <= count:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * span:
        ticks.append(0.0 if abs(t) < 1e-12 * span else t)
        t += step
    return ticks


def _fmt(x: float) -> str:
    text = f"{x:.4g}"
    return "0" if text in ("-0", "-0.0") else text


class Chart:
    """One x/y line chart; add series, then render to an SVG string."""

    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.series: list = []

    def add(self, label: str, xs: Sequence[float],
            ys: Sequence[float]) -> "Chart":
        xs = [float(x) for x in xs]
        ys = [float(y) for y in ys]
        if len(xs) != len(ys):
            raise ValueError("series length mismatch")
        self.series.append((label, xs, ys))
        return self

    def _extent(self) -> tuple:
        xr = _finite_range(x for _, xs, _ in self.series for x in xs)
        yr = _finite_range(y for _, _, ys in self.series for y in ys)
        if xr is None or yr is None:
            raise ValueError("no finite data to plot")
        return xr, yr

    def render(self) -> str:
        (x0, x1), (y0, y1) = self._extent()
        iw = WIDTH - MARGIN_L - MARGIN_R
        ih = HEIGHT - MARGIN_T - MARGIN_B

        def sx(x: float) -> float:
            return MARGIN_L + (x - x0) / (x1 - x0) * iw

        def sy(y: float) -> float:
            return MARGIN_T + (y1 - y) / (y1 - y0) * ih

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{self.title}</text>',
        ]
        axis = 'stroke="#333" stroke-width="1"'
        grid = 'stroke="#ddd" stroke-width="0.5"'
        font = 'font-family="sans-serif" font-size="10" fill="#333"'
        for tx in _ticks(x0, x1):
            px = sx(tx)
            out.append(f'<line x1="{px:.1f}" y1="{MARGIN_T}" x2="{px:.1f}" '
                       f'y2="{HEIGHT - MARGIN_B}" {grid}/>')
            out.append(f'<text x="{px:.1f}" y="{HEIGHT - MARGIN_B + 14}" '
                       f'text-anchor="middle" {font}>{_fmt(tx)}</text>')
        for ty in _ticks(y0, y1):
            py = sy(ty)
            out.append(f'<line x1="{MARGIN_L}" y1="{py:.1f}" '
                       f'x2="{WIDTH - MARGIN_R}" y2="{py:.1f}" {grid}/>')
            out.append(f'<text x="{MARGIN_L - 6}" y="{py + 3:.1f}" '
                       f'text-anchor="end" {font}>{_fmt(ty)}</text>')
        out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{iw}" '
                   f'height="{ih}" fill="none" {axis}/>')
        out.append(f'<text x="{MARGIN_L + iw / 2:.1f}" y="{HEIGHT - 8}" '
                   f'text-anchor="middle" {font}>{self.xlabel}</text>')
        out.append(f'<text x="14" y="{MARGIN_T + ih / 2:.1f}" '
                   f'text-anchor="middle" {font} transform="rotate(-90 14 '
                   f'{MARGIN_T + ih / 2:.1f})">{self.ylabel}</text>')

        for i, (label, xs, ys) in enumerate(self.series):
            color = PALETTE[i % len(PALETTE)]
            pts: list = []
            chunks: list = []
            for x, y in zip(xs, ys):
                if math.isfinite(x) and math.isfinite(y):
                    pts.append(f"{sx(x):.2f},{sy(y):.2f}")
                elif pts:          # break the polyline at gaps
                    chunks.append(pts)
                    pts = []
            if pts:
                chunks.append(pts)
            for chunk in chunks:
                if len(chunk) == 1:
                    cx, cy = chunk[0].split(",")
                    out.append(f'<circle cx="{cx}" cy="{cy}" r="2" '
                               f'fill="{color}"/>')
                else:
                    out.append(f'<polyline points="{" ".join(chunk)}" '
                               f'fill="none" stroke="{color}" '
                               f'stroke-width="1.5"/>')
            ly = MARGIN_T + 12 + 14 * i
            lx = WIDTH - MARGIN_R - 150
            out.append(f'<line x1="{lx}" y1="{ly - 3}" x2="{lx + 18}" '
                       f'y2="{ly - 3}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{lx + 22}" y="{ly}" {font}>{label}</text>')

        out.append("</svg>")
        return "\n".join(out)


def write_flow_plots(directory, run, max_profiles: int = 6) -> list:
    """Write profile and trace charts for a finished run; return paths."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rho = run.scenario.grid.nodes
    snaps = [s for s in run.snapshots if not s.degenerate]
    if len(snaps) > max_profiles:
        idx = [round(i * (len(snaps) - 1) / (max_profiles - 1))
               for i in range(max_profiles)]
        snaps = [snaps[i] for i in sorted(set(idx))]

    u_chart = Chart("potential profiles", "rho", "u")
    v_chart = Chart("velocity profiles", "rho", "v")
    d_chart = Chart("log det(g(t))/det(g0)", "rho", "log ratio")
    for s in snaps:
        label = f"t = {s.t:.3f}"
        u_chart.add(label, rho, s.u.values)
        v_chart.add(label, rho, s.v.values)
        ratio = s.g.det() / run.scenario.reference.det()
        d_chart.add(label, rho, [math.log(r) if r > 0 else math.nan
                                 for r in ratio])

    rows = run.ledger.steps
    ts = [row["t"] for row in rows]
    trace = Chart("potential envelope trace", "t", "u")
    trace.add("max u", ts, [row["u_max"] for row in rows])
    trace.add("min u", ts, [row["u_min"] for row in rows])

    paths = []
    for name, chart in (("potential_profiles", u_chart),
                        ("velocity_profiles", v_chart),
                        ("det_ratio_profiles", d_chart),
                        ("envelope_trace", trace)):
        p = directory / f"{name}.svg"
        p.write_text(chart.render())
        paths.append(p)
    return paths


__all__ = ["Chart", "write_flow_plots"]
