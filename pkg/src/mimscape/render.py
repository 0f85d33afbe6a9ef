"""SVG heatmaps and marching-squares contours of landscape grids."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib import colormaps
from matplotlib.colors import to_hex

from .landscape import LandscapeGrid

Point = tuple[float, float]
Segment = tuple[Point, Point]

INF_COLOR = "#e41a1c"
MODES = ("contour", "heatmap", "both")


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderSpec:
    mode: str = "both"
    levels: int = 10
    log_scale: bool = True
    output: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise RenderError(f"unknown render mode {self.mode!r}")
        if self.levels < 2:
            raise RenderError("need at least 2 contour levels")


# -- marching squares -------------------------------------------------------------

def _edge_point(f, xs, ys, p: tuple[int, int], q: tuple[int, int], level: float) -> Point:
    # p precedes q in index order, so neighbouring cells compute identical points
    vp, vq = f[p], f[q]
    t = (level - vp) / (vq - vp)
    return (xs[p[0]] + t * (xs[q[0]] - xs[p[0]]), ys[p[1]] + t * (ys[q[1]] - ys[p[1]]))


def marching_squares(values: np.ndarray, xs: Sequence[float], ys: Sequence[float], level: float) -> list[Segment]:
    """Iso-line segments of ``values[i, j]`` sampled at ``(xs[i], ys[j])``.

    Cells touching a non-finite value are skipped. Saddle cells are
    resolved with the mean of the four corners.
    """
    f = np.asarray(values, dtype=np.float64)
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    above = f >= level
    segments: list[Segment] = []
    for i in range(f.shape[0] - 1):
        for j in range(f.shape[1] - 1):
            corners = f[i:i + 2, j:j + 2]
            if not np.all(np.isfinite(corners)):
                continue
            a00, a10, a11, a01 = above[i, j], above[i + 1, j], above[i + 1, j + 1], above[i, j + 1]
            if a00 == a10 == a11 == a01:
                continue
            edges = {
                "bottom": ((i, j), (i + 1, j), a00 != a10),
                "right": ((i + 1, j), (i + 1, j + 1), a10 != a11),
                "top": ((i, j + 1), (i + 1, j + 1), a01 != a11),
                "left": ((i, j), (i, j + 1), a00 != a01),
            }
            pts = {k: _edge_point(f, xs, ys, p, q, level) for k, (p, q, hit) in edges.items() if hit}
            if len(pts) == 2:
                a, b = pts.values()
                segments.append((a, b))
                continue
            center_above = float(corners.mean()) >= level
            if center_above == a00:
                pairs = (("bottom", "right"), ("left", "top"))
            else:
                pairs = (("bottom", "left"), ("top", "right"))
            segments.extend((pts[u], pts[v]) for u, v in pairs)
    return segments


def _transform(f: np.ndarray, log_scale: bool) -> tuple[np.ndarray, bool]:
    finite = f[np.isfinite(f)]
    if log_scale and finite.size and finite.min() > 0:
        with np.errstate(divide="ignore"):
            return np.where(np.isfinite(f), np.log10(np.where(np.isfinite(f), f, 1.0)), np.inf), True
    return f, False


def contour_levels(values: np.ndarray, n: int) -> list[float]:
    """``n`` evenly spaced levels strictly between the finite min and max."""
    finite = values[np.isfinite(values)]
    lo, hi = float(finite.min()), float(finite.max())
    if hi <= lo:
        return []
    return [lo + (hi - lo) * k / (n + 1) for k in range(1, n + 1)]


def contour_segments(grid: LandscapeGrid, levels: int = 10, log_scale: bool = False) -> dict[float, list[Segment]]:
    """Segments per level (levels in the possibly log-transformed scale)."""
    f, _ = _transform(np.asarray(grid.losses, dtype=np.float64), log_scale)
    if not np.isfinite(f).any():
        raise RenderError("cannot contour a grid with no finite values")
    return {lv: marching_squares(f, grid.alphas, grid.betas, lv) for lv in contour_levels(f, levels)}


# -- SVG ---------------------------------------------------------------------------

_W, _H = 480, 470
_X0, _Y0, _SIZE = 60.0, 30.0, 380.0


def _n(v: float) -> str:
    return f"{v:.3f}"


def render_svg(grid: LandscapeGrid, spec: RenderSpec | None = None) -> str:
    """SVG 1.1 document for ``grid``; a pure function of its inputs."""
    spec = spec or RenderSpec()
    raw = np.asarray(grid.losses, dtype=np.float64)
    if not np.isfinite(raw).any():
        raise RenderError("cannot render a grid with no finite values")
    f, logged = _transform(raw, spec.log_scale)
    xs, ys = np.asarray(grid.alphas, float), np.asarray(grid.betas, float)
    x_lo, x_hi, y_lo, y_hi = xs[0], xs[-1], ys[0], ys[-1]

    def px(x):
        return _X0 + (x - x_lo) / (x_hi - x_lo) * _SIZE if x_hi > x_lo else _X0 + _SIZE / 2

    def py(y):
        return _Y0 + _SIZE - (y - y_lo) / (y_hi - y_lo) * _SIZE if y_hi > y_lo else _Y0 + _SIZE / 2

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="#ffffff"/>',
        f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">'
        f'{grid.regime} loss{" (log10)" if logged else ""}</text>',
    ]

    if spec.mode in ("heatmap", "both"):
        finite = f[np.isfinite(f)]
        lo, hi = float(finite.min()), float(finite.max())
        cmap = colormaps["viridis"]
        cw = _SIZE / max(len(xs) - 1, 1)
        ch = _SIZE / max(len(ys) - 1, 1)
        out.append('<g id="heatmap" shape-rendering="crispEdges">')
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                v = f[i, j]
                color = INF_COLOR if not np.isfinite(v) else to_hex(cmap((v - lo) / (hi - lo) if hi > lo else 0.5))
                x0 = max(px(x) - cw / 2, _X0)
                y0 = max(py(y) - ch / 2, _Y0)
                w = min(px(x) + cw / 2, _X0 + _SIZE) - x0
                h = min(py(y) + ch / 2, _Y0 + _SIZE) - y0
                out.append(f'<rect x="{_n(x0)}" y="{_n(y0)}" width="{_n(w)}" height="{_n(h)}" fill="{color}"/>')
        out.append("</g>")

    if spec.mode in ("contour", "both"):
        stroke = "#ffffff" if spec.mode == "both" else "#1f1f1f"
        out.append(f'<g id="contours" fill="none" stroke="{stroke}" stroke-width="1">')
        for level in contour_levels(f, spec.levels):
            segs = marching_squares(f, xs, ys, level)
            if not segs:
                continue
            d = " ".join(f"M{_n(px(a[0]))} {_n(py(a[1]))} L{_n(px(b[0]))} {_n(py(b[1]))}" for a, b in segs)
            out.append(f'<path data-level="{level!r}" d="{d}"/>')
        out.append("</g>")

    out.append(f'<rect x="{_X0}" y="{_Y0}" width="{_SIZE}" height="{_SIZE}" fill="none" stroke="#000000"/>')
    for v in (x_lo, 0.5 * (x_lo + x_hi), x_hi):
        out.append(f'<text x="{_n(px(v))}" y="{_n(_Y0 + _SIZE + 16)}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{v:g}</text>')
    for v in (y_lo, 0.5 * (y_lo + y_hi), y_hi):
        out.append(f'<text x="{_n(_X0 - 6)}" y="{_n(py(v) + 4)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{v:g}</text>')
    out.append(f'<text x="{_n(_X0 + _SIZE / 2)}" y="{_n(_Y0 + _SIZE + 34)}" text-anchor="middle" '
               f'font-family="serif" font-size="14">α</text>')
    out.append(f'<text x="18" y="{_n(_Y0 + _SIZE / 2)}" text-anchor="middle" '
               f'font-family="serif" font-size="14">β</text>')
    out.append("</svg>")
    doc = "\n".join(out) + "\n"
    if spec.output:
        Path(spec.output).write_text(doc, encoding="utf-8")
    return doc

