"""Cubic Bézier path geometry.

Paths live in normalized canvas units ([0, 1] on both axes, y pointing down
as in SVG).  A path is a chain of cubic segments sharing endpoints:

* open path with ``s`` segments has ``3s + 1`` points,
* closed path with ``s`` segments has ``3s`` points and its last segment
  ends at ``points[0]``.

Points are stored zero-padded to ``K_MAX`` so batches stack cleanly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import StructuralError

K_MAX = 50
AUX_POINTS = 4
SPEED_EPS = 1e-6
DENSIFY_SAMPLES = 64
CANVAS_CENTER = (0.5, 0.5)
# Chamfer uses plain Euclidean distance; flip to use squared distance instead.
CHAMFER_SQUARED = False
KAPPA = 0.5522847498307936


@dataclass
class BezierPath:
    points: np.ndarray
    length: int
    closed: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise StructuralError(f"points must be (N, 2), got {pts.shape}")
        self.length = int(self.length)
        if pts.shape[0] < K_MAX:
            pts = np.concatenate([pts, np.zeros((K_MAX - pts.shape[0], 2))])
        self.points = pts
        self.validate()

    @classmethod
    def from_points(cls, points, closed=True) -> "BezierPath":
        pts = np.asarray(points, dtype=np.float64)
        return cls(pts, len(pts), closed)

    def validate(self, check_range: bool = False) -> None:
        n = self.length
        if not 4 <= n <= K_MAX:
            raise StructuralError(f"path length {n} outside [4, {K_MAX}]")
        if self.points.shape[0] != K_MAX:
            raise StructuralError(f"path capacity {self.points.shape[0]} != {K_MAX}")
        if self.closed and n % 3 != 0:
            raise StructuralError(f"closed path length {n} is not a multiple of 3")
        if not self.closed and (n - 1) % 3 != 0:
            raise StructuralError(f"open path length {n} is not 3s+1")
        if np.any(self.points[n:] != 0):
            raise StructuralError("padding entries must be exactly zero")
        if not np.all(np.isfinite(self.valid)):
            raise StructuralError("non-finite coordinates")
        if check_range and (self.valid.min() < 0 or self.valid.max() > 1):
            raise StructuralError("coordinates outside [0, 1]")

    @property
    def valid(self) -> np.ndarray:
        return self.points[: self.length]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(K_MAX) < self.length

    @property
    def n_segments(self) -> int:
        return self.length // 3 if self.closed else (self.length - 1) // 3

    def segments(self) -> np.ndarray:
        """Control points of every segment, shape ``(s, 4, 2)``."""
        return path_segments(self.valid, self.closed)

    def copy(self) -> "BezierPath":
        return BezierPath(self.points.copy(), self.length, self.closed)


def path_segments(points, closed: bool):
    """Split a valid (unpadded) point sequence into ``(s, 4, 2)`` segments.

    Works for numpy arrays and torch tensors alike.
    """
    n = points.shape[0]
    if closed:
        if n % 3 != 0 or n < 3:
            raise StructuralError(f"closed path length {n} is not a multiple of 3")
        s = n // 3
        idx = np.arange(s)[:, None] * 3 + np.arange(4)[None, :]
        idx = idx % n
    else:
        if (n - 1) % 3 != 0 or n < 4:
            raise StructuralError(f"open path length {n} is not 3s+1")
        s = (n - 1) // 3
        idx = np.arange(s)[:, None] * 3 + np.arange(4)[None, :]
    if isinstance(points, torch.Tensor):
        return points[torch.as_tensor(idx, device=points.device)]
    return points[idx]


def closed_segments(points: torch.Tensor) -> torch.Tensor:
    """Batched segment split for closed layouts: ``(..., 3s, 2) -> (..., s, 4, 2)``."""
    n = points.shape[-2]
    s = n // 3
    idx = (torch.arange(s)[:, None] * 3 + torch.arange(4)[None, :]) % n
    return points[..., idx.to(points.device), :]


def evaluate_segment(p0, p1, p2, p3, t):
    """Point on a cubic segment at parameter ``t`` (scalar or array)."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    p0, p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2, p3))
    u = 1.0 - t
    out = u**3 * p0 + 3 * u**2 * t * p1 + 3 * u * t**2 * p2 + t**3 * p3
    return out


def bernstein(t):
    """Cubic Bernstein basis, shape ``(T, 4)``; accepts numpy or torch."""
    u = 1 - t
    if isinstance(t, torch.Tensor):
        return torch.stack([u**3, 3 * u**2 * t, 3 * u * t**2, t**3], dim=-1)
    return np.stack([u**3, 3 * u**2 * t, 3 * u * t**2, t**3], axis=-1)


def sample_segments(segs, t):
    """Evaluate segments ``(..., s, 4, 2)`` at parameters ``t`` -> ``(..., s, T, 2)``."""
    basis = bernstein(t)
    if isinstance(segs, torch.Tensor):
        return torch.einsum("tk,...skd->...std", basis.to(segs), segs)
    return np.einsum("tk,...skd->...std", basis, segs)


def aux_params(n: int) -> np.ndarray:
    return np.arange(1, n + 1) / (n + 1)


def aux_count(s: int, n: int, closed: bool) -> int:
    return s * n + (s if closed else s + 1)


def sample_auxiliary_points(path: BezierPath, n: int = AUX_POINTS) -> np.ndarray:
    """Interior samples at ``j/(n+1)`` of every segment plus each endpoint once."""
    if n < 1:
        raise ValueError("n must be >= 1")
    path.validate()
    return _aux_from_segments(path.segments(), n, path.closed)


def _aux_from_segments(segs, n: int, closed: bool):
    s = segs.shape[-3]
    is_torch = isinstance(segs, torch.Tensor)
    t = torch.as_tensor(aux_params(n), dtype=segs.dtype) if is_torch else aux_params(n)
    interior = sample_segments(segs, t)  # (..., s, n, 2)
    starts = segs[..., :, 0:1, :]
    per_seg = torch.cat([starts, interior], dim=-2) if is_torch else np.concatenate([starts, interior], axis=-2)
    flat = per_seg.reshape(*per_seg.shape[:-3], s * (n + 1), 2)
    if closed:
        return flat
    end = segs[..., -1, 3:4, :]
    return torch.cat([flat, end], dim=-2) if is_torch else np.concatenate([flat, end], axis=-2)


def aux_points_closed(points: torch.Tensor, n: int = AUX_POINTS) -> torch.Tensor:
    """Differentiable batched aux sampling for fixed closed layouts ``(B, 3s, 2)``."""
    return _aux_from_segments(closed_segments(points), n, True)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _pair_dist(a, b):
    d2 = ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(-1)
    if CHAMFER_SQUARED:
        return d2
    # sqrt with a zero-safe gradient
    safe = torch.where(d2 > 0, d2, torch.ones_like(d2))
    return torch.where(d2 > 0, safe.sqrt(), torch.zeros_like(d2))


def chamfer_distance(a, b):
    """Symmetric Chamfer distance with mean reduction in each direction.

    Returns a python float for array inputs and a tensor when either
    input is a tensor (so it can be back-propagated).
    """
    want_tensor = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.dtype != tb.dtype:
        tb = tb.to(ta.dtype)
    if ta.ndim != 2 or tb.ndim != 2 or ta.shape[0] == 0 or tb.shape[0] == 0:
        raise ValueError("chamfer_distance needs two non-empty (N, 2) point sets")
    d = _pair_dist(ta, tb)
    out = d.min(dim=1).values.mean() + d.min(dim=0).values.mean()
    return out if want_tensor else float(out)


def batched_chamfer(a, a_mask, b, b_mask=None):
    """Chamfer per batch item with validity masks; returns shape ``(B,)``."""
    d = _pair_dist(a, b)
    big = torch.finfo(d.dtype).max
    if b_mask is None:
        b_mask = torch.ones(b.shape[:2], dtype=torch.bool, device=b.device)
    d_ab = d.masked_fill(~b_mask[:, None, :], big).min(dim=2).values
    d_ba = d.masked_fill(~a_mask[:, :, None], big).min(dim=1).values
    a_term = (d_ab * a_mask).sum(1) / a_mask.sum(1).clamp(min=1)
    b_term = (d_ba * b_mask).sum(1) / b_mask.sum(1).clamp(min=1)
    return a_term + b_term


def _derivatives(segs, t):
    """First and second derivatives of segments at ``t``: each ``(s, T, 2)``."""
    d1 = 3 * (segs[:, 1:] - segs[:, :-1])  # (s, 3, 2) quadratic control points
    d2 = 2 * (d1[:, 1:] - d1[:, :-1])  # (s, 2, 2) linear control points
    u = 1 - t
    b1 = np.stack([u**2, 2 * u * t, t**2], axis=-1)
    b2 = np.stack([u, t], axis=-1)
    return np.einsum("tk,skd->std", b1, d1), np.einsum("tk,skd->std", b2, d2)


def curvature_profile(path: BezierPath, samples_per_segment: int = DENSIFY_SAMPLES) -> np.ndarray:
    """Signed curvature at ``samples_per_segment`` uniform ``t`` per segment."""
    if samples_per_segment < 2:
        raise ValueError("samples_per_segment must be >= 2")
    t = np.linspace(0.0, 1.0, samples_per_segment)
    d1, d2 = _derivatives(path.segments(), t)
    cross = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
    speed = np.hypot(d1[..., 0], d1[..., 1])
    kappa = np.where(speed < SPEED_EPS, 0.0, cross / np.maximum(speed, SPEED_EPS) ** 3)
    return kappa.reshape(-1)


def sample_speeds(path: BezierPath, samples_per_segment: int = DENSIFY_SAMPLES) -> np.ndarray:
    t = np.linspace(0.0, 1.0, samples_per_segment)
    d1, _ = _derivatives(path.segments(), t)
    return np.hypot(d1[..., 0], d1[..., 1]).reshape(-1)


def reverse_path(path: BezierPath) -> BezierPath:
    """Same geometry traversed in the opposite direction."""
    v = path.valid
    if path.closed:
        rev = np.concatenate([v[:1], v[1:][::-1]])
    else:
        rev = v[::-1]
    return BezierPath.from_points(rev, path.closed)


def densify(path: BezierPath, samples_per_segment: int = DENSIFY_SAMPLES) -> np.ndarray:
    """Polyline through ``samples_per_segment`` points per segment (no duplicates)."""
    t = np.arange(samples_per_segment) / samples_per_segment
    pts = sample_segments(path.segments(), t).reshape(-1, 2)
    if not path.closed:
        pts = np.concatenate([pts, path.valid[-1:]])
    return pts


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area of a closed polygon."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def path_area(path: BezierPath) -> float:
    if not path.closed:
        raise ValueError("path_area requires a closed path")
    return abs(polygon_area(densify(path)))


class Affine:
    """General 2D affine map stored as a 3x3 homogeneous matrix."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)

    def inverse(self) -> "Affine":
        return Affine(np.linalg.inv(self.matrix))

    def __matmul__(self, other):
        return Affine(self.matrix @ _matrix_of(other))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        m = self.matrix
        return pts @ m[:2, :2].T + m[:2, 2]


@dataclass
class AffineTransform:
    """Scale, then rotate, about the canvas centre, then translate."""

    tx: float = 0.0
    ty: float = 0.0
    rotation: float = 0.0
    sx: float = 1.0
    sy: float = 1.0

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise ValueError(f"scale must be positive, got ({self.sx}, {self.sy})")

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        lin = np.array([[c, -s], [s, c]]) @ np.diag([self.sx, self.sy])
        center = np.array(CANVAS_CENTER)
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = center - lin @ center + np.array([self.tx, self.ty])
        return m

    def inverse(self) -> Affine:
        return Affine(np.linalg.inv(self.matrix()))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return Affine(self.matrix()).apply(pts)


def _matrix_of(tr) -> np.ndarray:
    if isinstance(tr, AffineTransform):
        return tr.matrix()
    if isinstance(tr, Affine):
        return tr.matrix
    return np.asarray(tr, dtype=np.float64)


def apply_transform(path: BezierPath, tr) -> BezierPath:
    pts = Affine(_matrix_of(tr)).apply(path.valid)
    return BezierPath.from_points(pts, path.closed)


def transform_points_torch(pts, translation, rotation, scale):
    """Differentiable transform of ``(..., N, 2)`` points.

    ``translation`` ``(..., 2)``, ``rotation`` ``(...)``, ``scale`` ``(..., 2)``.
    """
    c, s = torch.cos(rotation)[..., None], torch.sin(rotation)[..., None]
    q = (pts - 0.5) * scale[..., None, :]
    x = c * q[..., 0] - s * q[..., 1]
    y = s * q[..., 0] + c * q[..., 1]
    return torch.stack([x, y], dim=-1) + 0.5 + translation[..., None, :]


def winding_grid(polys: Sequence[np.ndarray], size: int) -> np.ndarray:
    """Nonzero winding number at every pixel centre of a ``size`` square grid.

    ``polys`` are closed polygons in pixel units.  Scanline crossings are
    accumulated with a cumulative sum, so cost is O(edges * rows + pixels).
    """
    diff = np.zeros((size, size + 1), dtype=np.int32)
    yc = np.arange(size) + 0.5
    for poly in polys:
        poly = np.asarray(poly, dtype=np.float64)
        if len(poly) < 3:
            continue
        a, b = poly, np.roll(poly, -1, axis=0)
        y0, y1 = a[:, 1:2], b[:, 1:2]
        lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
        hit = (lo <= yc[None, :]) & (yc[None, :] < hi)
        e, r = np.nonzero(hit)
        if e.size == 0:
            continue
        x0, x1 = a[e, 0], b[e, 0]
        ya, yb = a[e, 1], b[e, 1]
        xc = x0 + (yc[r] - ya) * (x1 - x0) / (yb - ya)
        direction = np.where(yb > ya, 1, -1)
        col = np.clip(np.ceil(xc - 0.5), 0, size).astype(np.int64)
        np.add.at(diff, (r, col), direction)
    return -np.cumsum(diff, axis=1)[:, :size]


def rasterize_polygons(polys: Sequence[np.ndarray], size: int, supersample: int = 1) -> np.ndarray:
    """Coverage in [0, 1] of normalized-unit polygons under the nonzero rule."""
    n = size * supersample
    inside = winding_grid([np.asarray(p) * n for p in polys], n) != 0
    cov = inside.astype(np.float64)
    if supersample > 1:
        cov = cov.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return cov


def rasterize_path(path: BezierPath, size: int, supersample: int = 1,
                   samples_per_segment: int = DENSIFY_SAMPLES) -> np.ndarray:
    return rasterize_polygons([densify(path, samples_per_segment)], size, supersample)


def mask_overlap(a_mask, b_mask) -> int:
    a, b = np.asarray(a_mask).astype(bool), np.asarray(b_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a & b))


def circle_path(cx=0.5, cy=0.5, r=0.25, kappa=KAPPA) -> BezierPath:
    """Four-segment closed approximation of a circle (clockwise on screen)."""
    k = kappa * r
    pts = [
        (cx + r, cy), (cx + r, cy + k), (cx + k, cy + r),
        (cx, cy + r), (cx - k, cy + r), (cx - r, cy + k),
        (cx - r, cy), (cx - r, cy - k), (cx - k, cy - r),
        (cx, cy - r), (cx + k, cy - r), (cx + r, cy - k),
    ]
    return BezierPath.from_points(pts, closed=True)


def polygon_path(vertices, closed: bool = True) -> BezierPath:
    """Polyline lifted to degenerate cubics (controls at 1/3 and 2/3)."""
    v = np.asarray(vertices, dtype=np.float64)
    ends = np.concatenate([v, v[:1]]) if closed else v
    out = []
    for a, b in zip(ends[:-1], ends[1:]):
        out += [a, a + (b - a) / 3, a + 2 * (b - a) / 3]
    if not closed:
        out.append(ends[-1])
    return BezierPath.from_points(np.array(out), closed)
