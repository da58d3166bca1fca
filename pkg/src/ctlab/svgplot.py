"""Dependency-free SVG emission for line charts and scatter overlays.

Plots are plain hand-written SVG so runs stay diff-able and the package
needs no raster backend. Only what the lab uses: polyline charts with
linear or log-10 y axes, and scatter layers (points, connecting segments,
axis-aligned ellipses) sharing one coordinate frame.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 720, 460
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 36, 46

PALETTE = ["#1f6fb2", "#2a9d5c", "#d1495b", "#8d6cab", "#c88a2d", "#3b8ea5"]


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo] if math.isfinite(lo) else []
    raw = (hi - lo) / max(n, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-12 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.2e}"
    return f"{v:.6g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-family="sans-serif" '
            f'font-size="14">{escape(title)}</text>',
            f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) / 2}" y="{HEIGHT - 10}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{(MARGIN_T + HEIGHT - MARGIN_B) / 2}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" transform="rotate(-90 14 '
            f'{(MARGIN_T + HEIGHT - MARGIN_B) / 2})">{escape(ylabel)}</text>',
        ]

    def add(self, fragment: str) -> None:
        self.parts.append(fragment)

    def write(self, path) -> None:
        self.parts.append("</svg>")
        Path(path).write_text("\n".join(self.parts) + "\n", encoding="utf-8")


class _Frame:
    """Affine map from data coordinates to the plot viewport."""

    def __init__(self, x_range, y_range, log_y: bool = False):
        self.log_y = log_y
        x0, x1 = x_range
        y0, y1 = y_range
        if x1 <= x0:
            x0, x1 = x0 - 0.5, x0 + 0.5
        if y1 <= y0:
            y0, y1 = y0 - 0.5, y0 + 0.5
        self.x0, self.x1, self.y0, self.y1 = x0, x1, y0, y1

    def px(self, x: float) -> float:
        return MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)

    def py(self, y: float) -> float:
        return (
            HEIGHT
            - MARGIN_B
            - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
        )

    def axes(self, canvas: _Canvas) -> None:
        left, right = MARGIN_L, WIDTH - MARGIN_R
        top, bottom = MARGIN_T, HEIGHT - MARGIN_B
        canvas.add(
            f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
            f'fill="none" stroke="#444" stroke-width="1"/>'
        )
        for tx in _nice_ticks(self.x0, self.x1):
            px = self.px(tx)
            canvas.add(
                f'<line x1="{px:.2f}" y1="{bottom}" x2="{px:.2f}" y2="{bottom + 4}" stroke="#444"/>'
                f'<text x="{px:.2f}" y="{bottom + 16}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10">{_fmt(tx)}</text>'
            )
        for ty in _nice_ticks(self.y0, self.y1):
            py = self.py(ty)
            label = _fmt(10.0**ty) if self.log_y else _fmt(ty)
            canvas.add(
                f'<line x1="{left - 4}" y1="{py:.2f}" x2="{left}" y2="{py:.2f}" stroke="#444"/>'
                f'<text x="{left - 6}" y="{py + 3:.2f}" text-anchor="end" '
                f'font-family="sans-serif" font-size="10">{label}</text>'
            )


def line_plot(
    path,
    series: list[tuple[str, list[float], list[float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_y: bool = False,
) -> None:
    """Polyline chart; series with no finite points are legended but not drawn."""
    canvas = _Canvas(title, xlabel, ylabel)
    cleaned = []
    for label, xs, ys in series:
        pts = [
            (float(x), float(y))
            for x, y in zip(xs, ys)
            if math.isfinite(x) and math.isfinite(y) and (not log_y or y > 0.0)
        ]
        if log_y:
            pts = [(x, math.log10(y)) for x, y in pts]
        cleaned.append((label, pts))
    allpts = [p for _, pts in cleaned for p in pts]
    if allpts:
        xs = [p[0] for p in allpts]
        ys = [p[1] for p in allpts]
        pad = 0.05 * (max(ys) - min(ys) or 1.0)
        frame = _Frame((min(xs), max(xs)), (min(ys) - pad, max(ys) + pad), log_y)
    else:
        frame = _Frame((0.0, 1.0), (0.0, 1.0), log_y)
    frame.axes(canvas)
    for i, (label, pts) in enumerate(cleaned):
        color = PALETTE[i % len(PALETTE)]
        if pts:
            coords = " ".join(f"{frame.px(x):.2f},{frame.py(y):.2f}" for x, y in pts)
            canvas.add(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        ly = MARGIN_T + 14 + 14 * i
        canvas.add(
            f'<line x1="{WIDTH - MARGIN_R - 150}" y1="{ly - 4}" x2="{WIDTH - MARGIN_R - 130}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
            f'<text x="{WIDTH - MARGIN_R - 124}" y="{ly}" font-family="sans-serif" '
            f'font-size="11">{escape(label)}</text>'
        )
    canvas.write(path)


def scatter_plot(
    path,
    layers: list[dict],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
) -> None:
    """Layered 2-d scatter. Layer kinds:

    {"kind": "points",   "xy": (n,2) array-like, "color", "radius", "label"}
    {"kind": "segments", "a": (n,2), "b": (n,2), "color", "width"}
    {"kind": "ellipses", "centers": (n,2), "radii": (n,2), "color", "label"}
    """
    canvas = _Canvas(title, xlabel, ylabel)
    xs: list[float] = []
    ys: list[float] = []
    for layer in layers:
        for key in ("xy", "a", "b", "centers"):
            for pt in layer.get(key, ()):
                xs.append(float(pt[0]))
                ys.append(float(pt[1]))
    if xs:
        pad_x = 0.05 * (max(xs) - min(xs) or 1.0)
        pad_y = 0.05 * (max(ys) - min(ys) or 1.0)
        frame = _Frame(
            (min(xs) - pad_x, max(xs) + pad_x), (min(ys) - pad_y, max(ys) + pad_y)
        )
    else:
        frame = _Frame((0.0, 1.0), (0.0, 1.0))
    frame.axes(canvas)
    legend_row = 0
    for i, layer in enumerate(layers):
        color = layer.get("color", PALETTE[i % len(PALETTE)])
        kind = layer["kind"]
        if kind == "segments":
            width = layer.get("width", 0.5)
            for a, b in zip(layer["a"], layer["b"]):
                canvas.add(
                    f'<line x1="{frame.px(float(a[0])):.2f}" y1="{frame.py(float(a[1])):.2f}" '
                    f'x2="{frame.px(float(b[0])):.2f}" y2="{frame.py(float(b[1])):.2f}" '
                    f'stroke="{color}" stroke-width="{width}" stroke-opacity="0.45"/>'
                )
        elif kind == "points":
            radius = layer.get("radius", 1.6)
            for pt in layer["xy"]:
                canvas.add(
                    f'<circle cx="{frame.px(float(pt[0])):.2f}" cy="{frame.py(float(pt[1])):.2f}" '
                    f'r="{radius}" fill="{color}" fill-opacity="0.75"/>'
                )
        elif kind == "ellipses":
            sx = (WIDTH - MARGIN_L - MARGIN_R) / (frame.x1 - frame.x0)
            sy = (HEIGHT - MARGIN_T - MARGIN_B) / (frame.y1 - frame.y0)
            for c, r in zip(layer["centers"], layer["radii"]):
                canvas.add(
                    f'<ellipse cx="{frame.px(float(c[0])):.2f}" cy="{frame.py(float(c[1])):.2f}" '
                    f'rx="{abs(float(r[0])) * sx:.2f}" ry="{abs(float(r[1])) * sy:.2f}" '
                    f'fill="none" stroke="{color}" stroke-width="1.2"/>'
                )
        else:
            raise ValueError(f"unknown scatter layer kind {kind!r}")
        label = layer.get("label")
        if label:
            ly = MARGIN_T + 14 + 14 * legend_row
            legend_row += 1
            canvas.add(
                f'<circle cx="{WIDTH - MARGIN_R - 144}" cy="{ly - 4}" r="4" fill="{color}"/>'
                f'<text x="{WIDTH - MARGIN_R - 134}" y="{ly}" font-family="sans-serif" '
                f'font-size="11">{escape(label)}</text>'
            )
    canvas.write(path)
