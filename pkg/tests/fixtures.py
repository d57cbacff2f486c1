"""Constructed documents and scenes shared across test modules."""

import math

import numpy as np
import torch

from neuralpath.geometry import circle_path, polygon_path
from neuralpath.render import NeuralSvg, PathTheta
from neuralpath.svgio import SvgDocument, SvgPath


def bowed_star(n=12, r_out=40.0, r_in=20.0, bow=0.25, centre=50.0):
    """Closed ``n``-point zigzag star whose edges bulge sideways by ``bow`` of their length."""
    ang = np.arange(2 * n) * math.pi / n
    rad = np.where(np.arange(2 * n) % 2 == 0, r_out, r_in)
    v = np.stack([centre + rad * np.cos(ang), centre + rad * np.sin(ang)], 1)
    pts = []
    for a, b in zip(v, np.roll(v, -1, 0)):
        d = b - a
        nrm = np.array([-d[1], d[0]]) * bow
        pts += [a, a + d / 3 + nrm, a + 2 * d / 3 + nrm]
    return np.array(pts)


def star_doc(scale=1.0):
    return SvgDocument(100 * scale, 100 * scale, [SvgPath(bowed_star() * scale, True)])


def circle_doc(cx=0.5, cy=0.5, r=0.3, color=(0.0, 0.0, 0.0, 1.0)):
    return SvgDocument(100, 100, [SvgPath(circle_path(cx, cy, r).valid * 100, True, color)])


def square_doc():
    return SvgDocument(100, 100, [SvgPath(polygon_path([(10, 10), (90, 10), (90, 90), (10, 90)]).valid, True)])


def two_disk_doc():
    return SvgDocument(100, 100, [SvgPath(circle_path(0.3, 0.3, 0.2).valid * 100, True, (1.0, 0.0, 0.0, 1.0)),
                                  SvgPath(circle_path(0.7, 0.7, 0.2).valid * 100, True, (0.0, 0.0, 1.0, 1.0))])


S = 512


def rect(x0, y0, x1, y1, color):
    """Axis-aligned rectangle in 512-px canvas units as frozen geometry."""
    p = polygon_path([(x0 / S, y0 / S), (x1 / S, y0 / S), (x1 / S, y1 / S), (x0 / S, y1 / S)])
    return PathTheta.create(torch.zeros(24), color, points=p.valid)


def simplify_fixture():
    return NeuralSvg([
        rect(50, 50, 250, 250, (1, 0, 0, 1)),
        rect(50, 50, 250, 250, (1, 0, 0, 1)),
        rect(300, 300, 400, 400, (0, 1, 0, 0.04)),
        rect(400, 50, 403, 53, (0, 0, 1, 1)),
        rect(400, 100, 411, 101, (0, 0, 1, 1)),
        rect(300, 50, 380, 130, (0, 0, 1, 1)),
    ], S)
