"""Latent-diffusion guidance backend built on ``diffusers`` (optional).

Works with any SD-v1.5-format weight set: an ``AutoencoderKL``, a
``UNet2DConditionModel`` and a text encoder.  LoRA adapters are injected
into the UNet attention projections (``to_q``, ``to_k``, ``to_v``,
``to_out.0``) and are inactive unless a LoRA handle is passed to
:meth:`LatentDiffusionBackend.predict`.
"""

from __future__ import annotations

import contextlib
import math
import os

import torch
import torch.nn.functional as F
from torch import nn

from .errors import BackendError
from .guidance import NoiseSchedule, ddim_refine

DEFAULT_MODEL = "runwayml/stable-diffusion-v1-5"
CACHE_ENV = "NEURALPATH_MODEL_CACHE"
LORA_TARGETS = ("to_q", "to_k", "to_v", "to_out.0")


class LoRALinear(nn.Module):
    """``base(x) + scale * up(down(x))``; only ``down``/``up`` train."""

    def __init__(self, base: nn.Linear, rank: int = 4, alpha: float | None = None):
        super().__init__()
        self.base = base
        self.down = nn.Linear(base.in_features, rank, bias=False)
        self.up = nn.Linear(rank, base.out_features, bias=False)
        self.scaling = (alpha or rank) / rank
        self.enabled = False
        self.reset()

    def reset(self) -> None:
        nn.init.kaiming_uniform_(self.down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.up.weight)

    def forward(self, x):
        out = self.base(x)
        if self.enabled:
            out = out + self.scaling * self.up(self.down(x))
        return out


class LoRAHandle(nn.Module):
    """Collection of injected adapters; toggled on for LoRA predictions."""

    def __init__(self, layers: list):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def parameters(self, recurse: bool = True):
        for layer in self.layers:
            yield from layer.down.parameters()
            yield from layer.up.parameters()

    @contextlib.contextmanager
    def active(self):
        for layer in self.layers:
            layer.enabled = True
        try:
            yield
        finally:
            for layer in self.layers:
                layer.enabled = False


def inject_lora(unet: nn.Module, rank: int = 4) -> list:
    """Wrap attention projections in ``LoRALinear`` (idempotent); returns the wrappers."""
    wrappers = []
    for name, module in list(unet.named_modules()):
        if not (name.endswith("attn1") or name.endswith("attn2")):
            continue
        for target in LORA_TARGETS:
            parent, attr = module, target
            if "." in target:
                head, attr = target.split(".")
                parent = getattr(module, head)
                child = parent[int(attr)]
            else:
                child = getattr(parent, attr)
            if isinstance(child, LoRALinear):
                wrappers.append(child)
                continue
            wrapped = LoRALinear(child, rank).to(child.weight.device, child.weight.dtype)
            if isinstance(parent, nn.ModuleList):
                parent[int(attr)] = wrapped
            else:
                setattr(parent, attr, wrapped)
            wrappers.append(wrapped)
    return wrappers


class LatentDiffusionBackend:
    name = "latent-diffusion"
    lora_placement = "unet attention to_q/to_k/to_v/to_out.0"

    def __init__(self, vae, unet, text_encode_fn, alphas_cumprod, t_range=(50, 950), scaling_factor=None):
        self.vae = vae.eval().requires_grad_(False)
        self.unet = unet.eval().requires_grad_(False)
        self.text_encode_fn = text_encode_fn
        self.schedule = NoiseSchedule(alphas_cumprod, t_range)
        self.scaling_factor = scaling_factor if scaling_factor is not None else getattr(
            vae.config, "scaling_factor", 0.18215)
        self._embeds: dict = {}
        self._wrappers: list | None = None
        p = next(unet.parameters())
        self.device, self.dtype = p.device, p.dtype

    @classmethod
    def from_pretrained(cls, model_id: str | None = None, cache_dir=None, device=None):
        try:
            from diffusers import AutoencoderKL, DDPMScheduler, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendError("latent-diffusion backend needs 'diffusers' and 'transformers'") from exc
        model_id = model_id or DEFAULT_MODEL
        cache_dir = cache_dir or os.environ.get(CACHE_ENV)
        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        dtype = torch.float16 if device == "cuda" else torch.float32
        kw = {"cache_dir": cache_dir}
        try:
            vae = AutoencoderKL.from_pretrained(model_id, subfolder="vae", torch_dtype=dtype, **kw)
            unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet", torch_dtype=dtype, **kw)
            tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer", **kw)
            text_encoder = CLIPTextModel.from_pretrained(model_id, subfolder="text_encoder", torch_dtype=dtype, **kw)
            scheduler = DDPMScheduler.from_pretrained(model_id, subfolder="scheduler", **kw)
        except Exception as exc:  # network, missing files, bad format
            raise BackendError(f"could not load diffusion weights {model_id!r}: {exc}") from exc
        vae, unet, text_encoder = vae.to(device), unet.to(device), text_encoder.to(device).eval()

        @torch.no_grad()
        def encode(prompts):
            tok = tokenizer(prompts, padding="max_length", max_length=tokenizer.model_max_length,
                            truncation=True, return_tensors="pt")
            return text_encoder(tok.input_ids.to(device))[0]

        return cls(vae, unet, encode, scheduler.alphas_cumprod)

    def _embedding(self, prompt: str, cond: bool):
        key = prompt if cond else ""
        if key not in self._embeds:
            self._embeds[key] = self.text_encode_fn([key]).to(self.device, self.dtype)
        return self._embeds[key]

    def encode_latent(self, img: torch.Tensor) -> torch.Tensor:
        """``(H, W, 3)`` in [0, 1] -> ``(1, C, H/8, W/8)`` scaled latent (differentiable)."""
        x = img.permute(2, 0, 1)[None].to(self.device, self.dtype) * 2 - 1
        return self.vae.encode(x).latent_dist.mean * self.scaling_factor

    def decode_latent(self, x: torch.Tensor) -> torch.Tensor:
        img = self.vae.decode(x / self.scaling_factor).sample
        return ((img[0] + 1) / 2).clamp(0, 1).permute(1, 2, 0)

    def predict(self, x_t, t, ctx, cond=True, lora=None):
        emb = self._embedding(ctx.prompt, cond)
        # schedule index t corresponds to the model's timestep t - 1
        ts = torch.tensor([int(t) - 1], device=self.device)
        cm = lora.active() if lora is not None else contextlib.nullcontext()
        with cm:
            out = self.unet(x_t.to(self.dtype), ts, encoder_hidden_states=emb).sample
        return out.to(x_t.dtype)

    def make_lora(self, rank: int = 4, seed: int = 0) -> LoRAHandle:
        if self._wrappers is None:
            self._wrappers = inject_lora(self.unet, rank)
        torch.manual_seed(seed)
        for w in self._wrappers:
            w.reset()
            w.down.weight.requires_grad_(True)
            w.up.weight.requires_grad_(True)
        return LoRAHandle(self._wrappers)

    def base_parameters(self):
        return [p for n, p in self.unet.named_parameters() if ".down." not in n and ".up." not in n]

    @torch.no_grad()
    def refine_image(self, img, ctx, strength=0.4, steps=25, gen=None):
        x0 = self.encode_latent(img)
        gen = gen or torch.Generator().manual_seed(ctx.seed)
        x = ddim_refine(self, x0, ctx, strength, steps, gen)
        out = self.decode_latent(x).float().cpu()
        if out.shape[:2] != img.shape[:2]:
            out = F.interpolate(out.permute(2, 0, 1)[None], size=img.shape[:2], mode="bilinear")[0].permute(1, 2, 0)
        return out
