"""SVG reading and writing restricted to filled cubic paths.

Parsing goes through ``svgelements`` (shapes, arcs, nested transforms and
viewBox handling); every segment is then degree-elevated to a cubic.
Serialization writes a minimal SVG 1.1 subset: ``M``/``C``/``Z`` plus fill.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
import svgelements as se

from .errors import StructuralError
from .geometry import BezierPath

log = logging.getLogger(__name__)

_UNSUPPORTED = (se.Text, se.Image)


@dataclass
class SvgPath:
    """One filled subpath in canvas units (any length, no padding)."""

    points: np.ndarray
    closed: bool = True
    fill: tuple = (0.0, 0.0, 0.0, 1.0)
    opacity: float = 1.0

    @property
    def alpha(self) -> float:
        return float(self.fill[3]) * float(self.opacity)

    def normalized(self, width: float, height: float) -> np.ndarray:
        return self.points / np.array([width, height], dtype=np.float64)

    def to_bezier(self, width: float, height: float) -> BezierPath:
        return BezierPath.from_points(self.normalized(width, height), self.closed)


@dataclass
class SvgDocument:
    width: float
    height: float
    paths: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def line_to_cubic(p0, p3):
    p0, p3 = np.asarray(p0, float), np.asarray(p3, float)
    return p0 + (p3 - p0) / 3.0, p0 + 2.0 * (p3 - p0) / 3.0


def quad_to_cubic(p0, q, p3):
    p0, q, p3 = (np.asarray(v, float) for v in (p0, q, p3))
    return p0 + 2.0 / 3.0 * (q - p0), p3 + 2.0 / 3.0 * (q - p3)


def _xy(p) -> np.ndarray:
    return np.array([float(p.x), float(p.y)])


def _finish(cur: list, closed: bool, out: list, style: dict):
    if len(cur) < 4:
        return
    pts = np.array(cur)
    if closed or np.allclose(pts[0], pts[-1], atol=1e-9):
        if np.allclose(pts[0], pts[-1], atol=1e-9):
            pts = pts[:-1]
        else:
            c1, c2 = line_to_cubic(pts[-1], pts[0])
            pts = np.concatenate([pts, [c1, c2]])
        closed = True
    out.append(SvgPath(pts, closed, **style))


def _subpaths(path: se.Path, style: dict) -> list:
    out, cur, closed = [], [], False
    for seg in path.segments():
        if isinstance(seg, se.Move):
            _finish(cur, closed, out, style)
            cur, closed = [_xy(seg.end)], False
            continue
        if not cur:
            cur = [_xy(seg.start)]
        if isinstance(seg, se.Close):
            start, end = _xy(seg.start), _xy(seg.end)
            if not np.allclose(start, end, atol=1e-9):
                c1, c2 = line_to_cubic(start, end)
                cur += [c1, c2, end]
            closed = True
            continue
        if isinstance(seg, se.Line):
            p0, p3 = _xy(seg.start), _xy(seg.end)
            if np.allclose(p0, p3, atol=1e-12):
                continue
            cur += [*line_to_cubic(p0, p3), p3]
        elif isinstance(seg, se.QuadraticBezier):
            p0, q, p3 = _xy(seg.start), _xy(seg.control), _xy(seg.end)
            cur += [*quad_to_cubic(p0, q, p3), p3]
        elif isinstance(seg, se.CubicBezier):
            cur += [_xy(seg.control1), _xy(seg.control2), _xy(seg.end)]
        elif isinstance(seg, se.Arc):
            for cub in seg.as_cubic_curves():
                cur += [_xy(cub.control1), _xy(cub.control2), _xy(cub.end)]
    _finish(cur, closed, out, style)
    return out


def _color(c) -> tuple:
    return (c.red / 255.0, c.green / 255.0, c.blue / 255.0, c.alpha / 255.0)


def parse_svg(text: str) -> SvgDocument:
    """Parse SVG text into filled cubic subpaths with transforms baked in."""
    try:
        svg = se.SVG.parse(io.StringIO(text), reify=True)
    except Exception as exc:  # svgelements raises a variety of XML errors
        raise StructuralError(f"malformed SVG document: {exc}") from exc
    width = float(svg.width) if svg.width else 0.0
    height = float(svg.height) if svg.height else 0.0
    if svg.viewbox is not None and (not width or not height):
        width, height = float(svg.viewbox.width), float(svg.viewbox.height)
    if not width or not height:
        raise StructuralError("SVG has no usable width/height or viewBox")
    doc = SvgDocument(width, height)

    for el in svg.elements():
        if isinstance(el, _UNSUPPORTED):
            doc.warnings.append(f"skipped unsupported element <{type(el).__name__.lower()}>")
            continue
        if not isinstance(el, se.Shape):
            continue
        if el.values.get("filter"):
            doc.warnings.append(f"skipped element with filter (id={el.id})")
            continue
        raw_fill = str(el.values.get("fill", ""))
        if "url(" in raw_fill:
            doc.warnings.append(f"skipped gradient/pattern fill (id={el.id})")
            continue
        if el.fill is None or el.fill.value is None:
            doc.warnings.append(f"skipped stroke-only element (id={el.id})")
            continue
        opacity = float(el.values.get("opacity", 1.0))
        style = {"fill": _color(el.fill), "opacity": opacity}
        p = se.Path(el)
        p.reify()
        doc.paths.extend(_subpaths(p, style))
    for w in doc.warnings:
        log.warning(w)
    return doc


def _fmt(v: float) -> str:
    s = f"{v:.5f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def path_data(points: np.ndarray, closed: bool) -> str:
    pts = np.asarray(points, dtype=np.float64)
    parts = [f"M {_fmt(pts[0, 0])} {_fmt(pts[0, 1])}"]
    seq = np.concatenate([pts, pts[:1]]) if closed else pts
    for i in range(1, len(seq) - 1, 3):
        c = seq[i : i + 3]
        parts.append("C " + " ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in c))
    if closed:
        parts.append("Z")
    return " ".join(parts)


def _hex(rgb) -> str:
    r, g, b = (int(round(float(np.clip(v, 0, 1)) * 255)) for v in rgb[:3])
    return f"#{r:02x}{g:02x}{b:02x}"


def serialize_svg(doc: SvgDocument) -> str:
    w, h = _fmt(doc.width), _fmt(doc.height)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
    ]
    for p in doc.paths:
        attrs = f'd="{path_data(p.points, p.closed)}" fill="{_hex(p.fill)}"'
        if p.fill[3] < 1:
            attrs += f' fill-opacity="{_fmt(p.fill[3])}"'
        if p.opacity < 1:
            attrs += f' opacity="{_fmt(p.opacity)}"'
        lines.append(f"  <path {attrs}/>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def read_svg(path) -> SvgDocument:
    with open(path, encoding="utf-8") as fh:
        return parse_svg(fh.read())


def write_svg(doc: SvgDocument, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_svg(doc))
