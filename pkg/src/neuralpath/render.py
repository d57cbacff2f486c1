"""Differentiable rendering of neural-path SVGs.

A ``NeuralSvg`` holds per-path parameters ``(z, color, transform)``.  Paths
are decoded with the VAE sequence decoder, transformed, densified and
rasterized with a soft signed-distance rasterizer, then alpha-composited
back to front over a white background.

The reference rasterizer computes, per pixel centre, the distance to the
nearest polygon edge (nearest edge found without autograd, distance to it
recomputed with autograd) and a nonzero-winding inside/outside sign.
Coverage is ``sigmoid(sharpness * signed_distance_in_pixels)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .errors import BackendError, StructuralError
from .geometry import (BezierPath, closed_segments, sample_segments, transform_points_torch,
                       winding_grid)

SHARPNESS = 2.0  # per pixel
RENDER_SAMPLES = 16  # polyline samples per cubic segment
_BAND_LOGIT = 16.0  # sigmoid(16) = 1 - 1.1e-7
_CHUNK = 1 << 16


@dataclass
class PathTheta:
    """Optimizable parameters of one neural path.

    ``points`` (canonical-frame control points of a closed path) replaces
    the decoded geometry for paths whose latent could not be recovered.
    """

    z: torch.Tensor
    color: torch.Tensor
    translation: torch.Tensor
    rotation: torch.Tensor
    scale: torch.Tensor
    points: torch.Tensor | None = None

    @classmethod
    def create(cls, z, color, translation=(0.0, 0.0), rotation=0.0, scale=(1.0, 1.0), points=None,
               dtype=torch.float32) -> "PathTheta":
        t = lambda v: torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=dtype).clone()  # noqa: E731
        color = t(color)
        if color.shape[-1] == 3:
            color = torch.cat([color, color.new_ones(1)])
        return cls(t(z), color, t(translation), t(rotation), t(scale),
                   None if points is None else t(points))

    @property
    def frozen(self) -> bool:
        return self.points is not None

    def tensors(self) -> dict:
        return {"z": self.z, "color": self.color, "translation": self.translation,
                "rotation": self.rotation, "scale": self.scale}

    def detached(self) -> "PathTheta":
        return PathTheta(*(v.detach().clone() for v in self.tensors().values()),
                         None if self.points is None else self.points.detach().clone())

    def clamp_(self) -> None:
        with torch.no_grad():
            self.color.clamp_(0.0, 1.0)
            self.scale.clamp_(0.01, 2.0)


@dataclass
class NeuralSvg:
    paths: list
    canvas: int = 512

    def __post_init__(self):
        if self.canvas not in (64, 256, 512):
            raise StructuralError(f"unsupported canvas size {self.canvas}")

    def __len__(self) -> int:
        return len(self.paths)

    def detached(self) -> "NeuralSvg":
        return NeuralSvg([p.detached() for p in self.paths], self.canvas)

    def subset(self, indices) -> "NeuralSvg":
        return NeuralSvg([self.paths[i] for i in indices], self.canvas)


def decode_geometry(svg: NeuralSvg, decoder) -> list:
    """Canvas-space control points ``(N_i, 2)`` of every path (closed layouts)."""
    if not svg.paths:
        return []
    latent_idx = [i for i, p in enumerate(svg.paths) if not p.frozen]
    canon = [None] * len(svg.paths)
    if latent_idx:
        if decoder is None:
            raise StructuralError("a decoder is required to render latent paths")
        z = torch.stack([svg.paths[i].z for i in latent_idx])
        if z.shape[-1] != decoder.cfg.d_latent:
            raise StructuralError(f"latent size {z.shape[-1]} does not match decoder ({decoder.cfg.d_latent})")
        pts = decoder.decode_points(z.float())
        for j, i in enumerate(latent_idx):
            canon[i] = pts[j]
    out = []
    for p, c in zip(svg.paths, canon):
        c = p.points if c is None else c
        c = c.to(p.translation.dtype)
        out.append(transform_points_torch(c, p.translation, p.rotation, p.scale))
    return out


def polyline(ctrl: torch.Tensor, samples: int = RENDER_SAMPLES) -> torch.Tensor:
    """Dense closed polygon through a closed cubic control sequence."""
    t = torch.arange(samples, dtype=ctrl.dtype, device=ctrl.device) / samples
    return sample_segments(closed_segments(ctrl), t).reshape(-1, 2)


def _pixel_grid(size, x0, x1, y0, y1, dtype):
    xs = torch.arange(x0, x1, dtype=dtype) + 0.5
    ys = torch.arange(y0, y1, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)


def _nearest_edge_distance(pix, a, b):
    """Differentiable distance from each pixel to its nearest edge ``a->b``."""
    with torch.no_grad():
        ad, bd = a.detach(), b.detach()
        ab = bd - ad
        ab2 = (ab * ab).sum(1).clamp(min=1e-12)
        idx = torch.empty(pix.shape[0], dtype=torch.long)
        step = max(1, _CHUNK // max(1, a.shape[0]))
        for s in range(0, pix.shape[0], step):
            p = pix[s : s + step, None, :]
            t = (((p - ad) * ab).sum(-1) / ab2).clamp(0, 1)
            d2 = ((p - ad - t[..., None] * ab) ** 2).sum(-1)
            idx[s : s + step] = d2.argmin(1)
    ea, eb = a[idx], b[idx]
    ab = eb - ea
    t = (((pix - ea) * ab).sum(-1) / (ab * ab).sum(-1).clamp(min=1e-12)).clamp(0, 1)
    d2 = ((pix - ea - t[:, None] * ab) ** 2).sum(-1)
    return torch.sqrt(d2 + 1e-12)


def soft_coverage(poly: torch.Tensor, size: int, sharpness: float = SHARPNESS) -> torch.Tensor:
    """Soft coverage ``(size, size)`` of one closed polygon in normalized units.

    Only pixels within ``_BAND_LOGIT / sharpness`` pixels of the boundary
    get a soft value; the rest are exactly 0 or 1 (the sigmoid there is
    within 1e-7 of saturation).
    """
    out = poly.new_zeros(size, size)
    px = poly * size
    band = _BAND_LOGIT / sharpness
    with torch.no_grad():
        lo = torch.floor(px.detach().min(0).values - band - 2).clamp(0, size).long()
        hi = torch.ceil(px.detach().max(0).values + band + 2).clamp(0, size).long()
    x0, y0 = int(lo[0]), int(lo[1])
    x1, y1 = int(hi[0]), int(hi[1])
    if x1 <= x0 or y1 <= y0:
        return out
    inside = winding_grid([px.detach().cpu().double().numpy()], size)[y0:y1, x0:x1] != 0
    near = _near_boundary(inside, band + 1.5)
    r = int(math.ceil(band + 1.5))
    # the boundary may lie just beyond a canvas-clipped side of the crop
    if x0 == 0:
        near[:, :r] |= inside[:, :r]
    if y0 == 0:
        near[:r, :] |= inside[:r, :]
    if x1 == size:
        near[:, -r:] |= inside[:, -r:]
    if y1 == size:
        near[-r:, :] |= inside[-r:, :]
    hard = torch.from_numpy(inside & ~near).to(poly.dtype)
    idx = torch.from_numpy(np.flatnonzero(near))
    out = out.clone()
    crop = hard.reshape(-1).clone()
    if idx.numel():
        w = x1 - x0
        pix = torch.stack([(idx % w).to(poly.dtype) + x0 + 0.5, (idx // w).to(poly.dtype) + y0 + 0.5], dim=1)
        sign = torch.where(torch.from_numpy(inside.reshape(-1)[idx.numpy()]), 1.0, -1.0).to(poly.dtype)
        dist = _nearest_edge_distance(pix, px, torch.roll(px, -1, 0))
        crop = crop.index_put((idx,), torch.sigmoid(sharpness * sign * dist))
    out[y0:y1, x0:x1] = crop.reshape(y1 - y0, x1 - x0)
    return out


def _near_boundary(inside: np.ndarray, radius: float) -> np.ndarray:
    """Pixels whose centre lies within ``radius`` px of an inside/outside transition."""
    if inside.all() or not inside.any():
        return np.zeros_like(inside)
    d_in = ndimage.distance_transform_edt(inside)
    d_out = ndimage.distance_transform_edt(~inside)
    return np.where(inside, d_in, d_out) <= radius


def composite(coverages, colors, background=1.0) -> torch.Tensor:
    """Back-to-front "over" compositing onto an opaque background ``(H, W, 3)``."""
    if not coverages:
        raise StructuralError("composite needs at least one layer")
    h, w = coverages[0].shape
    img = coverages[0].new_full((h, w, 3), background)
    for cov, col in zip(coverages, colors):
        a = (cov * col[3])[..., None]
        img = img * (1 - a) + col[:3] * a
    return img


class ReferenceRasterizer:
    name = "reference"

    def __init__(self, sharpness: float = SHARPNESS, samples: int = RENDER_SAMPLES):
        self.sharpness = sharpness
        self.samples = samples

    def coverages(self, geometry, size):
        return [soft_coverage(polyline(g, self.samples), size, self.sharpness) for g in geometry]

    def render(self, geometry, colors, size):
        if not geometry:
            return torch.ones(size, size, 3)
        return composite(self.coverages(geometry, size), colors)


class DiffvgRasterizer:
    """Wrapper around the ``pydiffvg`` rasterizer (optional dependency)."""

    name = "diffvg"

    def __init__(self, samples: int = 2):
        try:
            import pydiffvg
        except ImportError as exc:
            raise BackendError("pydiffvg is not installed") from exc
        self.pydiffvg = pydiffvg
        self.samples = samples

    def _scene(self, geometry, colors, size):
        dv = self.pydiffvg
        shapes, groups = [], []
        for i, (g, c) in enumerate(zip(geometry, colors)):
            n_seg = g.shape[0] // 3
            shapes.append(dv.Path(num_control_points=torch.full((n_seg,), 2, dtype=torch.int32),
                                  points=(g * size).float(), is_closed=True, stroke_width=torch.tensor(0.0)))
            groups.append(dv.ShapeGroup(shape_ids=torch.tensor([i]), fill_color=c.float()))
        return dv.RenderFunction.serialize_scene(size, size, shapes, groups)

    def render(self, geometry, colors, size):
        if not geometry:
            return torch.ones(size, size, 3)
        args = self._scene(geometry, colors, size)
        rgba = self.pydiffvg.RenderFunction.apply(size, size, self.samples, self.samples, 0, None, *args)
        a = rgba[..., 3:4]
        return rgba[..., :3] * a + (1 - a)

    def coverages(self, geometry, size):
        white = torch.tensor([0.0, 0.0, 0.0, 1.0])
        return [1 - self.render([g], [white], size)[..., 0] for g in geometry]


def get_rasterizer(name: str = "reference", **kw):
    if name == "reference":
        return ReferenceRasterizer(**kw)
    if name == "diffvg":
        return DiffvgRasterizer(**kw)
    raise BackendError(f"unknown rasterizer backend {name!r}")


_DEFAULT = ReferenceRasterizer()


def render(svg: NeuralSvg, decoder, rasterizer=None) -> torch.Tensor:
    """RGB image ``(canvas, canvas, 3)`` in [0, 1], differentiable in every theta."""
    r = rasterizer or _DEFAULT
    geometry = decode_geometry(svg, decoder)
    return r.render(geometry, [p.color for p in svg.paths], svg.canvas)


def render_silhouette(svg: NeuralSvg, decoder, rasterizer=None) -> torch.Tensor:
    """Union coverage of all paths ignoring color, ``(canvas, canvas)``."""
    r = rasterizer or _DEFAULT
    geometry = decode_geometry(svg, decoder)
    if not geometry:
        return torch.zeros(svg.canvas, svg.canvas)
    covs = r.coverages(geometry, svg.canvas)
    keep = torch.ones_like(covs[0])
    for c in covs:
        keep = keep * (1 - c)
    return 1 - keep


def render_paths(paths, colors, size: int, rasterizer=None) -> torch.Tensor:
    """Render explicit ``BezierPath`` geometry (normalized units) with RGBA colors."""
    r = rasterizer or _DEFAULT
    geometry = []
    for p in paths:
        pts = torch.as_tensor(p.valid, dtype=torch.float64)
        if not p.closed:
            pts = torch.as_tensor(_close_open(p), dtype=torch.float64)
        geometry.append(pts)
    cols = [torch.as_tensor(np.asarray(c, dtype=np.float64)) for c in colors]
    return r.render(geometry, cols, size)


def _close_open(p: BezierPath) -> np.ndarray:
    """Closed control layout for an open path (implicit straight closing segment)."""
    v = p.valid
    a, b = v[-1], v[0]
    return np.concatenate([v, [a + (b - a) / 3, a + 2 * (b - a) / 3]])


def gradient_check(scene: dict, h: float = 1e-4, seed: int = 0) -> dict:
    """Autograd vs central finite differences for a tiny explicit-geometry scene.

    ``scene``: ``{"points": [(3s, 2) arrays], "colors": [(4,)], "translations": [(2,)],
    "size": int}``.  The loss is a fixed random weighting of the rendered
    pixels.  Returns, per parameter group, ``max|g_auto - g_fd| / max|g_fd|``.
    """
    size = scene.get("size", 64)
    gen = torch.Generator().manual_seed(seed)
    weights = torch.rand(size, size, 3, generator=gen, dtype=torch.float64)
    params = {
        "points": [torch.tensor(np.asarray(p), dtype=torch.float64, requires_grad=True) for p in scene["points"]],
        "color": [torch.tensor(np.asarray(c), dtype=torch.float64, requires_grad=True) for c in scene["colors"]],
        "translation": [torch.tensor(np.asarray(t), dtype=torch.float64, requires_grad=True)
                        for t in scene.get("translations", [(0.0, 0.0)] * len(scene["points"]))],
    }
    zero_rot = torch.zeros((), dtype=torch.float64)
    ones = torch.ones(2, dtype=torch.float64)

    def loss_fn():
        geom = [transform_points_torch(p, t, zero_rot, ones) for p, t in zip(params["points"], params["translation"])]
        img = _DEFAULT.render(geom, params["color"], size)
        return (img * weights).sum()

    loss = loss_fn()
    flat = [t for group in params.values() for t in group]
    grads = torch.autograd.grad(loss, flat)
    auto = dict(zip(map(id, flat), grads))
    report = {}
    with torch.no_grad():
        for name, group in params.items():
            a_all, n_all = [], []
            for t in group:
                g = auto[id(t)].reshape(-1)
                fd = torch.zeros_like(g)
                view = t.view(-1)
                for k in range(view.numel()):
                    old = float(view[k])
                    view[k] = old + h
                    lp = float(loss_fn())
                    view[k] = old - h
                    lm = float(loss_fn())
                    view[k] = old
                    fd[k] = (lp - lm) / (2 * h)
                a_all.append(g)
                n_all.append(fd)
            a, n = torch.cat(a_all), torch.cat(n_all)
            scale = float(n.abs().max())
            err = float((a - n).abs().max())
            report[name] = {"max_rel_error": err / scale if scale > 0 else err, "max_abs_grad": scale}
    return report


@torch.no_grad()
def to_document(svg: NeuralSvg, decoder, width: float | None = None):
    """Explicit ``SvgDocument`` (canvas units, bottom layer first) for serialization."""
    from .svgio import SvgDocument, SvgPath

    size = float(width or svg.canvas)
    doc = SvgDocument(size, size)
    for p, g in zip(svg.paths, decode_geometry(svg, decoder)):
        c = p.color.detach().double().clamp(0, 1).tolist()
        doc.paths.append(SvgPath(g.detach().double().numpy() * size, True, tuple(c)))
    return doc


def svg_to_dict(svg: NeuralSvg) -> dict:
    """Lossless JSON-ready state (float32 values are exact as Python floats)."""
    rows = []
    for p in svg.paths:
        row = {k: v.detach().tolist() for k, v in p.tensors().items()}
        if p.points is not None:
            row["points"] = p.points.detach().tolist()
        rows.append(row)
    return {"canvas": svg.canvas, "paths": rows}


def svg_from_dict(d: dict, dtype=torch.float32) -> NeuralSvg:
    paths = [PathTheta.create(r["z"], r["color"], r["translation"], r["rotation"], r["scale"], r.get("points"),
                              dtype=dtype) for r in d["paths"]]
    return NeuralSvg(paths, int(d["canvas"]))


def render_with_silhouette(svg: NeuralSvg, decoder, rasterizer=None) -> tuple[torch.Tensor, torch.Tensor]:
    """``(image, silhouette)`` from a single rasterization pass."""
    r = rasterizer or _DEFAULT
    geometry = decode_geometry(svg, decoder)
    if not geometry:
        return torch.ones(svg.canvas, svg.canvas, 3), torch.zeros(svg.canvas, svg.canvas)
    covs = r.coverages(geometry, svg.canvas)
    img = composite(covs, [p.color for p in svg.paths])
    keep = torch.ones_like(covs[0])
    for c in covs:
        keep = keep * (1 - c)
    return img, 1 - keep


def disk_scene(disks, size: int = 64) -> torch.Tensor:
    """Image of opaque disks ``[(cx, cy, r, (r, g, b)), ...]`` over white, float64."""
    from .geometry import circle_path

    paths = [circle_path(cx, cy, rad) for cx, cy, rad, _ in disks]
    cols = [(*col, 1.0) for *_, col in disks]
    return render_paths(paths, cols, size)


def render_document(doc, size: int = 256, rasterizer=None) -> torch.Tensor:
    """Rasterize an explicit ``SvgDocument`` (any path length) to ``(size, size, 3)``."""
    r = rasterizer or _DEFAULT
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    geometry, colors = [], []
    for p in doc.paths:
        pts = np.asarray(p.points, dtype=np.float64) / scale
        if not p.closed:
            a, b = pts[-1], pts[0]
            pts = np.concatenate([pts, [a + (b - a) / 3, a + 2 * (b - a) / 3]])
        geometry.append(torch.from_numpy(pts))
        colors.append(torch.tensor([*p.fill[:3], p.alpha], dtype=torch.float64))
    with torch.no_grad():
        return r.render(geometry, colors, size)
