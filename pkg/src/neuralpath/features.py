"""Image feature extractors for the layer-wise loss and for evaluation.

Feature backends expose ``levels(img) -> list[Tensor]`` (images are
``(H, W, 3)`` in [0, 1]).  Hermetic choices:

* ``identity`` - the image itself (feature loss reduces to pixel MSE)
* ``pyramid`` - full, 1/2 and 1/4 resolution box-blurred copies

``clip`` wraps a ``transformers`` CLIP model: intermediate visual
activations for the loss, projected embeddings for similarity and FID.
"""

from __future__ import annotations

import os

import torch
import torch.nn.functional as F

from .errors import BackendError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
DEFAULT_CLIP = "openai/clip-vit-base-patch32"


def _nchw(img: torch.Tensor) -> torch.Tensor:
    return img.permute(2, 0, 1)[None] if img.ndim == 3 else img.permute(0, 3, 1, 2)


class IdentityFeatures:
    name = "identity"

    def levels(self, img):
        return [_nchw(img)]


class PyramidFeatures:
    name = "pyramid"

    def __init__(self, octaves: int = 3):
        self.octaves = octaves

    def levels(self, img):
        x = _nchw(img)
        out = [x]
        for _ in range(self.octaves - 1):
            x = F.avg_pool2d(x, 2)
            out.append(x)
        return out


class ClipFeatures:
    """CLIP image-text backend; ``tokenize(list[str]) -> input_ids`` is injectable."""

    name = "clip"

    def __init__(self, model, tokenize, n_levels: int = 4, image_size: int | None = None):
        self.model = model.eval().requires_grad_(False)
        self.tokenize = tokenize
        self.n_levels = n_levels
        self.image_size = image_size or model.config.vision_config.image_size
        p = next(model.parameters())
        self.device, self.dtype = p.device, p.dtype

    @classmethod
    def from_pretrained(cls, model_id: str | None = None, cache_dir=None):
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendError("the clip backend needs 'transformers'") from exc
        model_id = model_id or DEFAULT_CLIP
        cache_dir = cache_dir or os.environ.get("NEURALPATH_MODEL_CACHE")
        try:
            model = CLIPModel.from_pretrained(model_id, cache_dir=cache_dir)
            tok = CLIPTokenizer.from_pretrained(model_id, cache_dir=cache_dir)
        except Exception as exc:
            raise BackendError(f"could not load CLIP weights {model_id!r}: {exc}") from exc
        return cls(model, lambda texts: tok(texts, padding=True, return_tensors="pt").input_ids)

    def _prep(self, img):
        x = _nchw(img).to(self.device, self.dtype)
        x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)
        mean = torch.tensor(CLIP_MEAN, device=x.device, dtype=x.dtype)[:, None, None]
        std = torch.tensor(CLIP_STD, device=x.device, dtype=x.dtype)[:, None, None]
        return (x - mean) / std

    def levels(self, img):
        hidden = self.model.vision_model(pixel_values=self._prep(img), output_hidden_states=True).hidden_states
        n = len(hidden) - 1
        picks = sorted({max(1, round(n * (i + 1) / self.n_levels)) for i in range(self.n_levels)})
        return [hidden[i] for i in picks]

    def embed(self, images) -> torch.Tensor:
        f = self.model.get_image_features(pixel_values=self._prep(images))
        f = getattr(f, "pooler_output", f)
        return F.normalize(f, dim=-1)

    def embed_text(self, prompts) -> torch.Tensor:
        f = self.model.get_text_features(input_ids=self.tokenize(list(prompts)).to(self.device))
        f = getattr(f, "pooler_output", f)
        return F.normalize(f, dim=-1)

    def similarity(self, prompt: str, img) -> float:
        with torch.no_grad():
            return float((self.embed(img) * self.embed_text([prompt])).sum(-1).mean())


class PixelSimilarity:
    """Prompt-agnostic stand-in for text-image similarity.

    Scores an image by the cosine between its ink (``1 - img``) and the
    ink of a fixed reference render; an empty image scores 0.
    """

    name = "pixel"

    def __init__(self, reference: torch.Tensor):
        self.ref = (1 - reference.detach().double()).reshape(-1)

    def similarity(self, prompt: str, img) -> float:
        v = (1 - img.detach().double()).reshape(-1)
        denom = float(v.norm() * self.ref.norm())
        return float(v @ self.ref) / denom if denom > 0 else 0.0


def pixel_embed(images: torch.Tensor, grid: int = 8) -> torch.Tensor:
    """Fallback FID features: ``grid x grid`` average-pooled RGB, flattened."""
    x = _nchw(images if images.ndim == 4 else images[None]).double()
    return F.adaptive_avg_pool2d(x, grid).reshape(x.shape[0], -1)


def feature_loss(backend, target: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    """Sum over feature levels of the mean squared activation difference."""
    with torch.no_grad():
        ft = [f.detach() for f in backend.levels(target)]
    return sum(F.mse_loss(a, b.to(a.dtype)) for a, b in zip(backend.levels(img), ft))


def get_feature_backend(name: str, **kw):
    if name == "identity":
        return IdentityFeatures()
    if name == "pyramid":
        return PyramidFeatures(kw.get("octaves", 3))
    if name == "clip":
        return ClipFeatures.from_pretrained(kw.get("model_id"), kw.get("cache_dir"))
    raise BackendError(f"unknown feature backend {name!r}")
