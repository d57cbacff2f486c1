"""Synthetic black-and-white icon corpus for desk-scale training.

Generates simple filled shapes (disks, ellipses, rectangles, rounded
rectangles, regular polygons, stars, smooth blobs) as SVG files
so the VAE pipeline can run without an external icon dataset.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geometry import KAPPA
from .svgio import SvgDocument, SvgPath, line_to_cubic, write_svg

SIZE = 100.0


def _polygon(vertices) -> np.ndarray:
    pts = []
    v = np.asarray(vertices, float)
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        pts += [a, *line_to_cubic(a, b)]
    return np.array(pts)


def _ellipse(cx, cy, rx, ry, rot) -> np.ndarray:
    pts = []
    for k in range(4):
        a0 = k * math.pi / 2
        a1 = a0 + math.pi / 2
        p0 = np.array([math.cos(a0), math.sin(a0)])
        p3 = np.array([math.cos(a1), math.sin(a1)])
        t0 = np.array([-math.sin(a0), math.cos(a0)])
        t1 = np.array([-math.sin(a1), math.cos(a1)])
        pts += [p0, p0 + KAPPA * t0, p3 - KAPPA * t1]
    pts = np.array(pts) * [rx, ry]
    c, s = math.cos(rot), math.sin(rot)
    return pts @ np.array([[c, s], [-s, c]]) + [cx, cy]


def _blob(rng, cx, cy, r, n) -> np.ndarray:
    """Smooth closed curve through ``n`` jittered radial anchors (Catmull-Rom)."""
    ang = np.linspace(0, 2 * math.pi, n, endpoint=False) + rng.uniform(-0.25, 0.25, n) * (2 * math.pi / n)
    rad = r * rng.uniform(0.6, 1.0, n)
    anchors = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
    pts = []
    for i in range(n):
        p0, p1 = anchors[i], anchors[(i + 1) % n]
        pm, p2 = anchors[i - 1], anchors[(i + 2) % n]
        pts += [p0, p0 + (p1 - pm) / 6.0, p1 - (p2 - p0) / 6.0]
    return np.array(pts)


def _rounded_rect(x0, y0, w, h, r) -> np.ndarray:
    r = min(r, w / 2 - 1e-3, h / 2 - 1e-3)
    k = KAPPA * r
    x1, y1 = x0 + w, y0 + h
    corners = [
        ((x0 + r, y0), (x1 - r, y0), (x1 - r + k, y0), (x1, y0 + r - k), (x1, y0 + r)),
        ((x1, y0 + r), (x1, y1 - r), (x1, y1 - r + k), (x1 - r + k, y1), (x1 - r, y1)),
        ((x1 - r, y1), (x0 + r, y1), (x0 + r - k, y1), (x0, y1 - r + k), (x0, y1 - r)),
        ((x0, y1 - r), (x0, y0 + r), (x0, y0 + r - k), (x0 + r - k, y0), (x0 + r, y0)),
    ]
    pts = []
    for a, b, c1, c2, _ in corners:
        a, b = np.array(a), np.array(b)
        pts += [a, *line_to_cubic(a, b), b, np.array(c1), np.array(c2)]
    return np.array(pts)


def _star(cx, cy, r_out, r_in, n, rot) -> np.ndarray:
    ang = rot + np.arange(2 * n) * math.pi / n
    rad = np.where(np.arange(2 * n) % 2 == 0, r_out, r_in)
    return _polygon(np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1))


def random_shape(rng: np.random.Generator) -> np.ndarray:
    cx, cy = rng.uniform(30, 70, 2)
    r = rng.uniform(12, 30)
    kind = rng.integers(0, 7)
    if kind == 0:
        return _ellipse(cx, cy, r, r, 0.0)
    if kind == 1:
        return _ellipse(cx, cy, r, r * rng.uniform(0.4, 0.9), rng.uniform(0, math.pi))
    if kind == 2:
        w, h = r * rng.uniform(1, 2, 2)
        return _polygon([(cx - w / 2, cy - h / 2), (cx + w / 2, cy - h / 2), (cx + w / 2, cy + h / 2), (cx - w / 2, cy + h / 2)])
    if kind == 3:
        w, h = r * rng.uniform(1, 2, 2)
        return _rounded_rect(cx - w / 2, cy - h / 2, w, h, r * rng.uniform(0.15, 0.45))
    if kind == 4:
        n = int(rng.integers(3, 9))
        ang = rng.uniform(0, math.pi) + np.arange(n) * 2 * math.pi / n
        return _polygon(np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1))
    if kind == 5:
        n = int(rng.integers(4, 9))
        return _star(cx, cy, r, r * rng.uniform(0.35, 0.7), n, rng.uniform(0, math.pi))
    return _blob(rng, cx, cy, r, int(rng.integers(4, 11)))


def make_corpus(out_dir, n_files: int = 700, shapes_per_file: int = 3, seed: int = 0) -> list:
    """Write ``n_files`` icon SVGs; returns the file list."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    files = []
    for i in range(n_files):
        doc = SvgDocument(SIZE, SIZE)
        for _ in range(shapes_per_file):
            doc.paths.append(SvgPath(random_shape(rng), True, (0.0, 0.0, 0.0, 1.0)))
        f = out / f"icon_{i:05d}.svg"
        write_svg(doc, f)
        files.append(f)
    return files
