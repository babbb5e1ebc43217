"""Minimal standalone SVG charts.  Output is a pure function of the input rows
(fixed number formatting, no timestamps)."""
from __future__ import annotations

import csv
import math
from html import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _f(v: float) -> str:
    return f"{v:.2f}"


def _doc(width, height, body) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n' + "".join(body) + "</svg>\n"
    )


def _axes(x0, y0, w, h, xr, yr, xlabel, ylabel, title):
    out = [f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(w)}" height="{_f(h)}" fill="none" stroke="#333"/>\n',
           f'<text x="{_f(x0 + w / 2)}" y="{_f(y0 - 8)}" text-anchor="middle" font-size="12">{escape(title)}</text>\n',
           f'<text x="{_f(x0 + w / 2)}" y="{_f(y0 + h + 30)}" text-anchor="middle">{escape(xlabel)}</text>\n',
           f'<text x="{_f(x0 - 42)}" y="{_f(y0 + h / 2)}" text-anchor="middle" '
           f'transform="rotate(-90 {_f(x0 - 42)} {_f(y0 + h / 2)})">{escape(ylabel)}</text>\n']
    for k in range(5):
        fx = xr[0] + (xr[1] - xr[0]) * k / 4
        fy = yr[0] + (yr[1] - yr[0]) * k / 4
        px = x0 + w * k / 4
        py = y0 + h - h * k / 4
        out.append(f'<text x="{_f(px)}" y="{_f(y0 + h + 14)}" text-anchor="middle">{fx:.3g}</text>\n')
        out.append(f'<text x="{_f(x0 - 4)}" y="{_f(py + 4)}" text-anchor="end">{fy:.3g}</text>\n')
    return out


def _range(values, pad=0.05):
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str) -> str:
    W, H, x0, y0, w, h = 520, 360, 70, 40, 320, 260
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    xr, yr = _range(xs), _range([0.0] + ys)
    sx = lambda x: x0 + w * (x - xr[0]) / (xr[1] - xr[0])  # noqa: E731
    sy = lambda y: y0 + h - h * (y - yr[0]) / (yr[1] - yr[0])  # noqa: E731
    body = _axes(x0, y0, w, h, xr, yr, xlabel, ylabel, title)
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in pts)
        body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>\n')
        for x, y in pts:
            body.append(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="3" fill="{color}"/>\n')
        ly = y0 + 14 * i + 6
        body.append(f'<rect x="{x0 + w + 12}" y="{_f(ly - 8)}" width="10" height="10" fill="{color}"/>\n')
        body.append(f'<text x="{x0 + w + 26}" y="{_f(ly + 1)}">{escape(label)}</text>\n')
    return _doc(W, H, body)


def histogram_chart(rows: list[tuple[float, float, int, int]], title: str) -> str:
    """``rows`` are ``(bin_lo, bin_hi, count_correct, count_incorrect)``; overlaid bars."""
    W, H, x0, y0, w, h = 520, 360, 70, 40, 340, 260
    xr = (rows[0][0], rows[-1][1])
    ymax = max(max(c, i) for _, _, c, i in rows) or 1
    yr = (0.0, ymax * 1.05)
    sx = lambda x: x0 + w * (x - xr[0]) / (xr[1] - xr[0])  # noqa: E731
    sy = lambda y: y0 + h - h * (y - yr[0]) / (yr[1] - yr[0])  # noqa: E731
    body = _axes(x0, y0, w, h, xr, yr, "L_cond - L_uncond", "count", title)
    for col, color in ((2, PALETTE[0]), (3, PALETTE[1])):
        for r in rows:
            if r[col]:
                body.append(f'<rect x="{_f(sx(r[0]))}" y="{_f(sy(r[col]))}" width="{_f(sx(r[1]) - sx(r[0]))}" '
                            f'height="{_f(sy(0) - sy(r[col]))}" fill="{color}" fill-opacity="0.5"/>\n')
    if xr[0] < 0 < xr[1]:
        body.append(f'<line x1="{_f(sx(0))}" y1="{y0}" x2="{_f(sx(0))}" y2="{y0 + h}" stroke="#000" '
                    f'stroke-dasharray="4 3"/>\n')
    for i, (label, color) in enumerate((("correct", PALETTE[0]), ("incorrect", PALETTE[1]))):
        ly = y0 + 14 * i + 6
        body.append(f'<rect x="{x0 + w + 12}" y="{_f(ly - 8)}" width="10" height="10" fill="{color}" '
                    f'fill-opacity="0.5"/>\n<text x="{x0 + w + 26}" y="{_f(ly + 1)}">{label}</text>\n')
    return _doc(W, H, body)


def _hue(angle: float) -> str:
    return f"hsl({int(round(math.degrees(angle))) % 360},75%,45%)"


def scatter_grid(panels: list[dict], ncols: int, extent: float = 3.0) -> str:
    """Each panel: ``{"title": str, "points": [(x, y, angle), ...]}``; colour encodes angle."""
    cell, pad, top = 200, 16, 24
    nrows = max(1, math.ceil(len(panels) / ncols))
    W = ncols * (cell + pad) + pad
    H = nrows * (cell + pad + top) + pad
    body = []
    for k, panel in enumerate(panels):
        r, c = divmod(k, ncols)
        px = pad + c * (cell + pad)
        py = pad + top + r * (cell + pad + top)
        body.append(f'<text x="{_f(px + cell / 2)}" y="{_f(py - 6)}" text-anchor="middle">'
                    f'{escape(panel["title"])}</text>\n')
        body.append(f'<rect x="{px}" y="{py}" width="{cell}" height="{cell}" fill="none" stroke="#999"/>\n')
        s = cell / (2 * extent)
        for x, y, a in panel["points"]:
            if abs(x) <= extent and abs(y) <= extent:
                body.append(f'<circle cx="{_f(px + cell / 2 + s * x)}" cy="{_f(py + cell / 2 - s * y)}" '
                            f'r="1" fill="{_hue(a)}"/>\n')
    return _doc(W, H, body)
