"""Standalone SVG emitters with fixed number formatting, so output is byte-stable."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .core import EmotionLabel, Scanpath, Scene


def _f(x: float) -> str:
    return f"{x:.2f}"


def _doc(w: float, h: float, body: list) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(w)}" height="{_f(h)}" '
            f'viewBox="0 0 {_f(w)} {_f(h)}">')
    return "\n".join([head] + body + ["</svg>"]) + "\n"


def scanpath_svg(scene: Scene, scanpath: Scanpath, scale: float = 0.5) -> str:
    """Scene boxes, numbered fixation markers and arrows between consecutive fixations."""
    if not scanpath.fixations:
        raise ValueError("empty scanpath")
    w, h = scene.W * scale, scene.H * scale
    body = [
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"10\" refY=\"5\" markerWidth=\"6\" "
        "markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\" fill=\"#c22\"/></marker></defs>",
        f'<rect x="0" y="0" width="{_f(w)}" height="{_f(h)}" fill="#222"/>',
    ]
    for o in scene.objects:
        b = o.bbox
        body.append(f'<rect class="box" x="{_f(b.x_min * scale)}" y="{_f(b.y_min * scale)}" '
                    f'width="{_f((b.x_max - b.x_min) * scale)}" height="{_f((b.y_max - b.y_min) * scale)}" '
                    f'fill="none" stroke="#8ab"><title>{escape(o.category)} {o.id}</title></rect>')
    pts = [(f.point.u * scale, f.point.v * scale) for f in scanpath.fixations]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        body.append(f'<line class="sacc" x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" '
                    'stroke="#c22" stroke-width="1.5" marker-end="url(#arrow)"/>')
    for k, ((x, y), f) in enumerate(zip(pts, scanpath.fixations), 1):
        r = 4.0 + 10.0 * min(f.duration, 1.0)
        body.append(f'<circle class="fix" cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="#fc3" fill-opacity="0.8"/>')
        body.append(f'<text x="{_f(x)}" y="{_f(y + 4)}" font-size="11" text-anchor="middle">{k}</text>')
    return _doc(w, h, body)


def confusion_svg(confusion: np.ndarray, cell: float = 48.0) -> str:
    """Row-normalised heat grid, rows = true class."""
    C = np.asarray(confusion, dtype=float)
    if C.size == 0:
        raise ValueError("empty confusion matrix")
    rows = C.sum(1, keepdims=True)
    N = np.divide(C, rows, out=np.zeros_like(C), where=rows > 0)
    n = C.shape[0]
    pad = 80.0
    names = [EmotionLabel(i).name for i in range(n)]
    body = []
    for i in range(n):
        body.append(f'<text x="{_f(pad - 6)}" y="{_f(pad + (i + 0.6) * cell)}" font-size="11" '
                    f'text-anchor="end">{names[i]}</text>')
        body.append(f'<text x="{_f(pad + (i + 0.5) * cell)}" y="{_f(pad - 8)}" font-size="11" '
                    f'text-anchor="middle">{names[i][:3]}</text>')
        for j in range(n):
            g = int(round(255 * (1.0 - N[i, j])))
            body.append(f'<rect class="cell" x="{_f(pad + j * cell)}" y="{_f(pad + i * cell)}" '
                        f'width="{_f(cell)}" height="{_f(cell)}" fill="rgb({g},{g},255)"/>')
            body.append(f'<text x="{_f(pad + (j + 0.5) * cell)}" y="{_f(pad + (i + 0.6) * cell)}" '
                        f'font-size="10" text-anchor="middle">{_f(N[i, j])}</text>')
    return _doc(pad + n * cell + 10, pad + n * cell + 10, body)


def pr_svg(curves: dict, size: float = 320.0) -> str:
    """One polyline per class in the unit (recall, precision) square."""
    if not curves:
        raise ValueError("no curves")
    pad = 30.0
    colors = ["#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628"]
    body = [f'<rect x="{_f(pad)}" y="{_f(pad)}" width="{_f(size)}" height="{_f(size)}" fill="none" stroke="#444"/>']
    for k, (name, pts) in enumerate(curves.items()):
        xy = [(0.0, pts[0].precision)] + [(p.recall, p.precision) for p in pts]
        coords = " ".join(f"{_f(pad + r * size)},{_f(pad + (1 - pr) * size)}" for r, pr in xy)
        body.append(f'<polyline class="pr" points="{coords}" fill="none" stroke="{colors[k % len(colors)]}">'
                    f'<title>{escape(str(name))}</title></polyline>')
    return _doc(size + 2 * pad, size + 2 * pad, body)
