"""Simplification, guidance image and layer-wise refinement of a neural-path SVG."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from skimage import measure

from .dataset import MARGIN, rasterize_record
from .errors import ConfigError, FitError, NumericError
from .features import feature_loss, get_feature_backend
from .fitting import fit_path_to_contour
from .geometry import (DENSIFY_SAMPLES, BezierPath, aux_points_closed, batched_chamfer, polygon_area,
                       sample_auxiliary_points, winding_grid)
from .guidance import GuidanceContext, step_generator
from .render import NeuralSvg, PathTheta, decode_geometry, polyline, render, render_with_silhouette, to_document
from .stage1 import freeze, param_groups
from .svgio import write_svg

log = logging.getLogger(__name__)


@dataclass
class Stage2Config:
    iters: int = 800
    seed: int = 0
    strength: float = 0.4
    denoise_steps: int = 25
    guidance_scale: float = 10.0
    lambda_iou: float = 0.01
    feature_backend: str = "pyramid"
    render_size: int = 512
    reenc_eps: float = 0.05
    alpha_min: float = 0.05
    min_area_px: int = 10
    overlap_px: int = 5
    color_tol: float = 2 / 255
    lr_z: float = 0.05
    lr_color: float = 0.02
    lr_transform: float = 0.01

    def __post_init__(self):
        if not 0 <= self.strength <= 1:
            raise ConfigError("guidance strength must lie in [0, 1]")
        if self.lambda_iou < 0:
            raise ConfigError("lambda_iou must be non-negative")


# ---------------------------------------------------------------- simplify


def hard_masks(svg: NeuralSvg, decoder, size: int) -> list[np.ndarray]:
    with torch.no_grad():
        geometry = decode_geometry(svg, decoder)
    return [winding_grid([polyline(g, DENSIFY_SAMPLES).double().numpy() * size], size) != 0 for g in geometry]


def visible_areas(masks: list[np.ndarray]) -> np.ndarray:
    """Unoccluded pixel count per path, painting back to front as if opaque."""
    if not masks:
        return np.zeros(0, dtype=int)
    ids = np.full(masks[0].shape, -1, dtype=int)
    for i, m in enumerate(masks):
        ids[m] = i
    return np.bincount(ids[ids >= 0], minlength=len(masks))


def _groups(masks, colors, overlap_px, tol) -> list[list[int]]:
    parent = list(range(len(masks)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if np.all(np.abs(colors[i] - colors[j]) <= tol + 1e-9) and int((masks[i] & masks[j]).sum()) >= overlap_px:
                parent[find(i)] = find(j)
    out: dict = {}
    for i in range(len(masks)):
        out.setdefault(find(i), []).append(i)
    return sorted(out.values())


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """Longest boundary polyline of a binary mask, in normalized units."""
    size = mask.shape[0]
    contours = measure.find_contours(np.pad(mask.astype(float), 1), 0.5)
    if not contours:
        raise FitError("mask has no contour")
    c = max(contours, key=len)
    return (c[:, ::-1] - 1 + 0.5) / size


def canonicalize(path: BezierPath) -> tuple[BezierPath, dict]:
    """Map into the decoder frame (bbox fit to [0.05, 0.95]); returns the path and its transform."""
    pts = path.valid
    lo, hi = pts.min(0), pts.max(0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise FitError("degenerate path")
    k = (1 - 2 * MARGIN) / extent
    centre = (lo + hi) / 2
    canon = BezierPath.from_points((pts - centre) * k + 0.5, closed=path.closed)
    return canon, {"translation": centre - 0.5, "rotation": 0.0, "scale": (1 / k, 1 / k)}


@dataclass
class Reencoded:
    z: torch.Tensor
    chamfer: float
    frozen: bool


REFINE_STEPS = 100
REFINE_LR = 0.05


def _aux_batch(paths: list[BezierPath], n: int) -> tuple[torch.Tensor, torch.Tensor]:
    aux = [torch.tensor(sample_auxiliary_points(p, n), dtype=torch.float32) for p in paths]
    width = max(a.shape[0] for a in aux)
    pad = torch.zeros(len(paths), width, 2)
    mask = torch.zeros(len(paths), width, dtype=torch.bool)
    for i, a in enumerate(aux):
        pad[i, : len(a)] = a
        mask[i, : len(a)] = True
    return pad, mask


def reencode(paths: list[BezierPath], vae, eps: float = 0.05, refine_steps: int = REFINE_STEPS) -> list[Reencoded]:
    """Canonical-frame paths -> latents, with the decode residual of each.

    ``z`` starts at the encoder mean and is then refined by Adam on the
    Chamfer residual through the frozen decoder.  A residual above
    ``3 * eps`` marks the path as frozen geometry.
    """
    if not paths:
        return []
    freeze(vae)
    pts = torch.tensor(np.stack([p.points for p in paths]), dtype=torch.float32)
    mask = torch.tensor(np.stack([p.mask for p in paths]))
    imgs = torch.tensor(np.stack([rasterize_record(p) for p in paths]))[:, None]
    target, t_mask = _aux_batch(paths, vae.cfg.aux_n)

    def residual(z):
        return batched_chamfer(target, t_mask, aux_points_closed(vae.decode_points(z), vae.cfg.aux_n))

    with torch.no_grad():
        mu, _ = vae.encode(pts, mask, imgs)
        best_z, best = mu.clone(), residual(mu)
    z = mu.clone().requires_grad_(True)
    opt = torch.optim.Adam([z], lr=REFINE_LR)
    # callers may hold a no_grad context; the refinement needs autograd regardless
    with torch.enable_grad():
        for _ in range(refine_steps):
            r = residual(z)
            with torch.no_grad():
                better = r < best
                best = torch.where(better, r, best)
                best_z[better] = z[better]
            opt.zero_grad()
            r.sum().backward()
            opt.step()
    with torch.no_grad():
        r = residual(z)
        better = r < best
        best = torch.where(better, r, best)
        best_z[better] = z[better]
    out = []
    for zi, c in zip(best_z, best.tolist()):
        if c > eps:
            log.warning("re-encoding residual %.4f exceeds %.4f", c, eps)
        out.append(Reencoded(zi.detach().clone(), c, c > 3 * eps))
    return out


def merged_theta(mask: np.ndarray, color: torch.Tensor, vae, eps: float, d_latent: int) -> PathTheta:
    fitted = fit_path_to_contour(mask_contour(mask))
    canon, tr = canonicalize(fitted)
    enc = reencode([canon], vae, eps)[0]
    points = canon.valid if enc.frozen else None
    z = torch.zeros(d_latent) if enc.frozen else enc.z
    return PathTheta.create(z, color.detach(), tr["translation"], tr["rotation"], tr["scale"], points)


def simplify(svg: NeuralSvg, vae, cfg: Stage2Config | None = None) -> tuple[NeuralSvg, dict]:
    """Drop faint paths, merge overlapping same-colour paths, then drop tiny ones.

    Merging runs before the visible-area filter so that a same-colour copy
    hidden under its twin is merged rather than discarded as occluded.
    """
    cfg = cfg or Stage2Config()
    svg = svg.detached()
    m = len(svg)
    paths = [p for p in svg.paths if float(p.color[3]) >= cfg.alpha_min]
    removed_alpha = m - len(paths)
    masks = hard_masks(NeuralSvg(paths, svg.canvas), vae, cfg.render_size)
    colors = [p.color.double().numpy() for p in paths]

    merged, failures = 0, 0
    out: list[tuple[int, PathTheta, np.ndarray]] = []
    for group in _groups(masks, colors, cfg.overlap_px, cfg.color_tol):
        if len(group) == 1:
            out.append((group[0], paths[group[0]], masks[group[0]]))
            continue
        top = max(group)
        union = np.logical_or.reduce([masks[g] for g in group])
        try:
            theta = merged_theta(union, paths[top].color, vae, cfg.reenc_eps, paths[top].z.shape[-1])
        except FitError as exc:
            log.warning("merge of paths %s failed (%s); keeping originals", group, exc)
            failures += 1
            out.extend((g, paths[g], masks[g]) for g in group)
            continue
        merged += len(group) - 1
        out.append((top, theta, hard_masks(NeuralSvg([theta], svg.canvas), vae, cfg.render_size)[0]))
    out.sort(key=lambda t: t[0])
    areas = visible_areas([mk for *_, mk in out])
    kept = [p for (_, p, _), a in zip(out, areas) if a >= cfg.min_area_px]
    fallback = False
    if not kept and m:
        # never return an empty drawing: keep the most visible original path
        all_areas = visible_areas(hard_masks(svg, vae, cfg.render_size))
        kept = [svg.paths[int(np.argmax(all_areas))]]
        fallback = True
        log.warning("simplify removed every path; keeping the most visible one")
    result = NeuralSvg(kept, svg.canvas)
    report = {"m": m, "n": len(result), "removed_alpha": removed_alpha, "merged": merged,
              "removed_area": len(out) - len([a for a in areas if a >= cfg.min_area_px]),
              "merge_failures": failures, "frozen": sum(p.frozen for p in result.paths), "fallback": fallback}
    log.info("simplify: %d -> %d paths %s", m, len(result), report)
    return result, report


# ---------------------------------------------------------------- guidance image


@dataclass
class GuidanceBundle:
    image: torch.Tensor
    mask: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask.shape != tuple(self.image.shape[:2]):
            raise ValueError("guidance mask and image resolutions differ")


def foreground_mask(img: torch.Tensor, threshold: float = 16 / 255) -> np.ndarray:
    """Pixels whose (3x3 median-filtered) max-channel distance from white exceeds ``threshold``."""
    d = (1 - img.detach().double().cpu().numpy()).max(-1)
    return ndimage.median_filter(d, size=3, mode="nearest") > threshold


def make_guidance(svg: NeuralSvg, decoder, prompt: str, backend, cfg: Stage2Config | None = None,
                  rasterizer=None) -> GuidanceBundle:
    cfg = cfg or Stage2Config()
    with torch.no_grad():
        img = render(NeuralSvg(svg.detached().paths, cfg.render_size), decoder, rasterizer)
        if cfg.strength == 0:
            guide = img
        else:
            ctx = GuidanceContext(prompt, cfg.guidance_scale, cfg.seed, getattr(backend, "name", "custom"))
            guide = backend.refine_image(img, ctx, cfg.strength, cfg.denoise_steps,
                                         step_generator(cfg.seed, 0, 2)).to(img.dtype)
    prov = {"strength": cfg.strength, "steps": cfg.denoise_steps, "seed": cfg.seed,
            "backend": getattr(backend, "name", "custom"), "prompt": prompt}
    return GuidanceBundle(guide, foreground_mask(guide), prov)


# ---------------------------------------------------------------- layer-wise optimization


def layer_schedule(n: int) -> list[int]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return sorted({math.ceil(n / 8), math.ceil(n / 4), math.ceil(n / 2), n})


def stage_iterations(total: int, stages: int) -> list[int]:
    base, extra = divmod(total, stages)
    return [base] * (stages - 1) + [base + extra]


def soft_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``sum(min) / sum(max)`` over soft masks; 1 when both are empty."""
    b = b.to(a.dtype)
    den = torch.maximum(a, b).sum()
    if float(den.detach()) == 0:
        return den.new_ones(())
    return torch.minimum(a, b).sum() / den


def area_order(svg: NeuralSvg, decoder) -> list[int]:
    """Path indices by decreasing area of the decoded, transformed geometry."""
    with torch.no_grad():
        geometry = decode_geometry(svg, decoder)
    areas = [abs(polygon_area(polyline(g, DENSIFY_SAMPLES).double().numpy())) for g in geometry]
    return sorted(range(len(areas)), key=lambda i: (-areas[i], i))


def layer_loss(svg: NeuralSvg, bundle: GuidanceBundle, decoder, features, lambda_iou: float = 0.01,
               rasterizer=None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(total, feature term, soft IoU)`` for the current partial SVG."""
    img, sil = render_with_silhouette(svg, decoder, rasterizer)
    target = bundle.image.to(img.dtype)
    feat = feature_loss(features, target, img)
    iou = soft_iou(sil, torch.from_numpy(bundle.mask))
    return feat + lambda_iou * (1 - iou), feat, iou


@dataclass
class Stage2Result:
    svg: NeuralSvg
    log: list = field(default_factory=list)
    schedule: list = field(default_factory=list)
    order: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def optimize_stage2(svg: NeuralSvg, bundle: GuidanceBundle, decoder, cfg: Stage2Config | None = None,
                    features=None, rasterizer=None, schedule=None, out_dir=None) -> Stage2Result:
    """Optimize the top-k largest paths per schedule stage against the guidance image.

    Rendering keeps the original z-order among the active paths.  A
    non-finite loss or parameter raises :class:`NumericError` carrying the
    snapshot taken at the start of the failing stage.
    """
    cfg = cfg or Stage2Config()
    if bundle.image.shape[0] != cfg.render_size:
        raise ConfigError(f"guidance image is {bundle.image.shape[0]} px but render_size is {cfg.render_size}")
    features = features or get_feature_backend(cfg.feature_backend)
    if decoder is not None:
        freeze(decoder)
    svg = NeuralSvg(svg.detached().paths, cfg.render_size)
    n = len(svg)
    order = area_order(svg, decoder)
    schedule = schedule or layer_schedule(n)
    if list(schedule) != sorted(set(schedule)) or schedule[-1] != n:
        raise ConfigError(f"layer schedule {schedule} must increase strictly and end at {n}")
    snap_dir = Path(out_dir) / "snapshots" if out_dir else None
    if snap_dir:
        snap_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for stage, (k, iters) in enumerate(zip(schedule, stage_iterations(cfg.iters, len(schedule)))):
        active = sorted(order[:k])
        sub = svg.subset(active)
        last_good = svg.detached()
        opt = torch.optim.Adam(param_groups(sub, cfg))
        for it in range(iters):
            total, feat, iou = layer_loss(sub, bundle, decoder, features, cfg.lambda_iou, rasterizer)
            if not torch.isfinite(total):
                raise NumericError(f"non-finite stage-2 loss (stage {stage}, iter {it})", last_good=last_good)
            opt.zero_grad()
            total.backward()
            opt.step()
            for p in sub.paths:
                p.clamp_()
            rows.append({"stage": stage, "k": k, "iter": it, "loss": float(total.detach()),
                         "feature": float(feat.detach()), "iou": float(iou.detach())})
        if any(not bool(torch.isfinite(t).all()) for p in sub.paths for t in p.tensors().values()):
            raise NumericError(f"non-finite theta after stage {stage}", last_good=last_good)
        if snap_dir:
            write_svg(to_document(svg.subset(active), decoder), snap_dir / f"stage2_k{k:03d}.svg")
    out = svg.detached()
    manifest = {"n": n, "schedule": list(schedule), "iters": cfg.iters, "config": asdict(cfg),
                "guidance": bundle.provenance, "feature_backend": getattr(features, "name", "custom")}
    return Stage2Result(out, rows, list(schedule), order, manifest)
