"""Vector-level quality metrics and corpus reports."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch
from scipy import linalg

from .errors import BackendError, MetricError
from .features import PixelSimilarity, pixel_embed
from .geometry import DENSIFY_SAMPLES, SPEED_EPS, _derivatives, path_segments, sample_segments
from .render import render_document
from .svgio import SvgDocument, read_svg

log = logging.getLogger(__name__)

SEMANTICS_SIZE = 224


def curvature_variation(points: np.ndarray, closed: bool, samples: int = DENSIFY_SAMPLES) -> float:
    """``mean|dk| / mean ds``, made scale-free by the factor ``(L / 2pi)^2``."""
    segs = path_segments(np.asarray(points, dtype=np.float64), closed)
    if len(segs) == 0:
        return 0.0
    t = np.linspace(0.0, 1.0, samples)
    d1, d2 = _derivatives(segs, t)
    cross = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
    speed = np.hypot(d1[..., 0], d1[..., 1])
    kappa = np.where(speed < SPEED_EPS, 0.0, cross / np.maximum(speed, SPEED_EPS) ** 3).reshape(-1)
    pos = sample_segments(segs, t).reshape(-1, 2)
    ds = np.hypot(*np.diff(pos, axis=0).T)
    length = float(ds.sum())
    if length <= 0:
        return 0.0
    return float(np.abs(np.diff(kappa)).mean() / ds.mean() * (length / (2 * math.pi)) ** 2)


def smoothness(doc: SvgDocument) -> float:
    """``1 / (1 + mean_i V_i)`` in (0, 1]; 1 for documents made of straight segments."""
    if not doc.paths:
        raise MetricError("smoothness needs at least one path")
    v = [curvature_variation(p.points, p.closed) for p in doc.paths]
    return 1.0 / (1.0 + float(np.mean(v)))


def simplicity(doc: SvgDocument) -> int:
    return len(doc.paths)


def corpus_simplicity(docs) -> float:
    return float(np.mean([simplicity(d) for d in docs])) if docs else 0.0


def layer_semantics(doc: SvgDocument, prompt: str, backend=None, trials: int = 10, drop: float = 0.3,
                    seed: int = 0, size: int = SEMANTICS_SIZE) -> float:
    """Mean similarity drop when ``ceil(drop * n)`` random paths are removed.

    ``backend`` needs ``similarity(prompt, img)``; ``None`` selects the
    prompt-agnostic pixel fallback referenced to the full render.
    """
    n = len(doc.paths)
    n_drop = math.ceil(drop * n - 1e-12)
    if n == 0 or n_drop == 0 or trials == 0:
        return 0.0
    full = render_document(doc, size)
    backend = backend or PixelSimilarity(full)
    base = backend.similarity(prompt, full)
    rng = np.random.default_rng(seed)
    drops = []
    for _ in range(trials):
        gone = set(rng.choice(n, size=min(n_drop, n), replace=False).tolist())
        reduced = SvgDocument(doc.width, doc.height, [p for i, p in enumerate(doc.paths) if i not in gone])
        drops.append(base - backend.similarity(prompt, render_document(reduced, size)))
    return float(np.mean(drops))


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets ``(N, D)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("FID needs at least 2 samples per set")
    mu1, mu2 = a.mean(0), b.mean(0)
    s1, s2 = np.atleast_2d(np.cov(a, rowvar=False)), np.atleast_2d(np.cov(b, rowvar=False))
    covmean, _ = linalg.sqrtm(s1 @ s2, disp=False)
    if not np.isfinite(covmean).all():
        off = np.eye(s1.shape[0]) * 1e-6
        covmean = linalg.sqrtm((s1 + off) @ (s2 + off))
    covmean = np.real(covmean)
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean), 0.0))


def embed_images(images, backend=None) -> np.ndarray:
    x = torch.stack(list(images)) if not torch.is_tensor(images) else images
    with torch.no_grad():
        f = backend.embed(x) if backend is not None else pixel_embed(x)
    return f.double().cpu().numpy()


def fid(images_a, images_b, backend=None) -> float:
    """FID between two image sets ``(N, H, W, 3)``; pixel features when ``backend`` is None."""
    return frechet_distance(embed_images(images_a, backend), embed_images(images_b, backend))


def clip_similarity(prompt: str, image: torch.Tensor, backend) -> float:
    if backend is None:
        raise BackendError("clip_similarity needs an image-text backend")
    return backend.similarity(prompt, image)


def evaluate(svg_dir, prompts: dict, backend=None, reference_dir=None, trials: int = 10, drop: float = 0.3,
             seed: int = 0) -> dict:
    """Per-file and aggregate metrics for every ``*.svg`` in ``svg_dir``."""
    files = sorted(Path(svg_dir).glob("*.svg"))
    backend_id = getattr(backend, "name", "pixel") if backend is not None else "pixel"
    items, renders = [], []
    for f in files:
        doc = read_svg(f)
        prompt = prompts.get(f.stem, prompts.get("*", ""))
        item = {"file": f.name, "prompt": prompt, "simplicity": simplicity(doc)}
        item["smoothness"] = smoothness(doc) if doc.paths else None
        item["layer_semantics"] = layer_semantics(doc, prompt, backend, trials, drop, seed)
        img = render_document(doc, SEMANTICS_SIZE)
        renders.append(img)
        item["clip_similarity"] = clip_similarity(prompt, img, backend) if backend is not None else "skipped"
        items.append(item)

    def mean(key):
        vals = [it[key] for it in items if isinstance(it[key], (int, float))]
        return float(np.mean(vals)) if vals else None

    aggregate = {k: mean(k) for k in ("smoothness", "simplicity", "layer_semantics")}
    aggregate["clip_similarity"] = mean("clip_similarity") if backend is not None else "skipped"
    if reference_dir is not None:
        refs = [render_document(read_svg(f), SEMANTICS_SIZE) for f in sorted(Path(reference_dir).glob("*.svg"))]
        aggregate["fid"] = fid(torch.stack(renders), torch.stack(refs), backend if hasattr(backend, "embed") else None)
    else:
        aggregate["fid"] = "skipped"
    return {"count": len(items), "items": items, "aggregate": aggregate,
            "backends": {"similarity": backend_id, "fid": backend_id if reference_dir else None},
            "seed": seed, "trials": trials, "drop": drop}
