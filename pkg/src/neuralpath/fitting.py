"""Least-squares cubic fitting of closed contours.

Schneider's algorithm ("An algorithm for automatically fitting digitized
curves", Graphics Gems 1990): the contour is split at corners, each run is
fitted with a tangent-constrained cubic, and runs whose residual exceeds
the tolerance are reparametrized by Newton steps or split at the worst
point.
"""

from __future__ import annotations

import numpy as np

from .errors import FitError
from .geometry import K_MAX, BezierPath, bernstein, polygon_area

CORNER_ANGLE = np.deg2rad(55.0)


def _resample(contour: np.ndarray, count: int) -> np.ndarray:
    closed = np.concatenate([contour, contour[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], count, endpoint=False)
    x = np.interp(targets, s, closed[:, 0])
    y = np.interp(targets, s, closed[:, 1])
    return np.stack([x, y], axis=1)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 1e-12, n, 1.0)


def _find_corners(pts: np.ndarray, window: int, limit: int) -> list[int]:
    n = len(pts)
    back = _unit(pts - np.roll(pts, window, axis=0))
    fwd = _unit(np.roll(pts, -window, axis=0) - pts)
    cosang = np.clip((back * fwd).sum(1), -1.0, 1.0)
    angle = np.arccos(cosang)
    corners = []
    for i in np.argsort(-angle):
        if angle[i] < CORNER_ANGLE or len(corners) >= limit:
            break
        if all(min(abs(i - c), n - abs(i - c)) > window for c in corners):
            corners.append(int(i))
    return sorted(corners)


def _chord_params(d: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(d, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(seg)])
    return u / u[-1] if u[-1] > 0 else np.linspace(0, 1, len(d))


def _bezier(ctrl, u):
    return bernstein(u) @ ctrl


def _generate(d, u, t1, t2):
    p0, p3 = d[0], d[-1]
    b = bernstein(u)
    a1 = t1[None, :] * b[:, 1:2]
    a2 = t2[None, :] * b[:, 2:3]
    c = np.array([[np.sum(a1 * a1), np.sum(a1 * a2)], [np.sum(a1 * a2), np.sum(a2 * a2)]])
    tmp = d - (b[:, 0:1] + b[:, 1:2]) * p0 - (b[:, 2:3] + b[:, 3:4]) * p3
    x = np.array([np.sum(a1 * tmp), np.sum(a2 * tmp)])
    det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
    seg_len = np.linalg.norm(p3 - p0)
    eps = 1e-6 * max(seg_len, 1e-9)
    alpha1 = alpha2 = 0.0
    if abs(det) > 1e-15:
        alpha1 = (x[0] * c[1, 1] - x[1] * c[0, 1]) / det
        alpha2 = (c[0, 0] * x[1] - c[1, 0] * x[0]) / det
    if alpha1 < eps or alpha2 < eps or alpha1 > 4 * seg_len or alpha2 > 4 * seg_len:
        alpha1 = alpha2 = seg_len / 3.0
    return np.array([p0, p0 + alpha1 * t1, p3 + alpha2 * t2, p3])


def _newton(ctrl, d, u):
    q1 = 3 * (ctrl[1:] - ctrl[:-1])
    q2 = 2 * (q1[1:] - q1[:-1])
    p = _bezier(ctrl, u)
    uu = 1 - u
    d1 = (uu**2)[:, None] * q1[0] + (2 * uu * u)[:, None] * q1[1] + (u**2)[:, None] * q1[2]
    d2 = uu[:, None] * q2[0] + u[:, None] * q2[1]
    diff = p - d
    num = (diff * d1).sum(1)
    den = (d1 * d1).sum(1) + (diff * d2).sum(1)
    step = np.where(np.abs(den) > 1e-12, num / np.where(den == 0, 1, den), 0.0)
    return np.clip(u - step, 0.0, 1.0)


def _max_error(ctrl, d, u):
    err = np.sum((_bezier(ctrl, u) - d) ** 2, axis=1)
    i = int(np.argmax(err))
    return float(err[i]), i


def _fit_run(d, t1, t2, tol2, depth=0):
    if len(d) <= 2:
        dist = np.linalg.norm(d[-1] - d[0]) / 3.0
        return [np.array([d[0], d[0] + dist * t1, d[-1] + dist * t2, d[-1]])]
    u = _chord_params(d)
    ctrl = _generate(d, u, t1, t2)
    err, split = _max_error(ctrl, d, u)
    if err < tol2:
        return [ctrl]
    if err < 16 * tol2:
        for _ in range(20):
            u = _newton(ctrl, d, u)
            ctrl = _generate(d, u, t1, t2)
            err, split = _max_error(ctrl, d, u)
            if err < tol2:
                return [ctrl]
    if depth > 12:
        return [ctrl]
    split = min(max(split, 1), len(d) - 2)
    tc = _unit(d[split - 1] - d[split + 1])
    if not np.any(tc):
        tc = _unit(d[split - 1] - d[split])
    left = _fit_run(d[: split + 1], t1, tc, tol2, depth + 1)
    right = _fit_run(d[split:], -tc, t2, tol2, depth + 1)
    return left + right


def _fit_closed(pts, breaks, corners, tol):
    n = len(pts)
    segs = []
    for a, b in zip(breaks, breaks[1:] + [breaks[0] + n]):
        idx = np.arange(a, b + 1) % n
        run = pts[idx]
        if a in corners:
            t1 = _unit(run[min(2, len(run) - 1)] - run[0])
        else:
            t1 = _unit(pts[(a + 1) % n] - pts[(a - 1) % n])
        if b % n in corners:
            t2 = _unit(run[max(-3, -len(run))] - run[-1])
        else:
            t2 = _unit(pts[(b - 1) % n] - pts[(b + 1) % n])
        segs += _fit_run(run, t1, t2, tol * tol)
    return segs


def fit_path_to_contour(contour, max_points: int = 48, tolerance: float = 0.002) -> BezierPath:
    """Fit a closed cubic path to a closed polyline given in normalized units.

    The tolerance is relaxed geometrically until the fit needs no more than
    ``max_points`` control points.
    """
    c = np.asarray(contour, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2 or len(c) < 8:
        raise FitError("contour needs at least 8 (x, y) points")
    if np.allclose(c[0], c[-1]):
        c = c[:-1]
    if abs(polygon_area(c)) < 1e-10:
        raise FitError("degenerate (zero-area) contour")
    max_points = min(max_points, K_MAX)
    max_segs = max_points // 3
    if max_segs < 2:
        raise FitError("max_points too small for a closed path")

    pts = _resample(c, int(np.clip(len(c), 64, 400)))
    n = len(pts)
    window = max(2, n // 64)
    # keep the sharpest corners only, so the budget stays reachable by relaxing tol
    corners = _find_corners(pts, window, max_segs // 2)
    breaks = list(corners)
    if len(breaks) < 2:
        # add evenly spaced smooth breakpoints so each run is a proper arc
        start = breaks[0] if breaks else 0
        breaks = sorted({(start + k * n // 4) % n for k in range(4)})
    corner_set = set(corners)

    tol = tolerance
    for _ in range(40):
        segs = _fit_closed(pts, breaks, corner_set, tol)
        if len(segs) <= max_segs:
            break
        tol *= 1.5
    else:
        raise FitError("could not fit contour within the point budget")
    if len(segs) > max_segs:
        raise FitError("could not fit contour within the point budget")

    out = np.concatenate([s[:3] for s in segs])
    out = np.clip(out, 0.0, 1.0)
    return BezierPath.from_points(out, closed=True)
