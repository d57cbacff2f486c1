"""Score distillation: noise schedule, backends, SDS/VSD gradients, LoRA.

Backends share a small duck-typed surface:

* ``schedule`` - a :class:`NoiseSchedule`
* ``encode_latent(img)`` - differentiable image ``(H, W, 3)`` -> latent
* ``predict(x_t, t, ctx, cond=True, lora=None)`` - noise prediction
* ``make_lora(rank)`` - fresh low-rank branch (zero delta at init)
* ``refine_image(img, ctx, strength, steps, gen)`` - noise-then-denoise

The hermetic :class:`ToyBackend` predicts the exact noise under the
hypothesis that the clean latent is a fixed target, so distillation drives
renders toward that target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import BackendError

T_MAX = 1000
T_RANGE = (50, 950)


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    """Independent RNG for ``(seed, step, stream)``; makes every draw replayable."""
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + int(step)) * 7 + int(stream))


class NoiseSchedule:
    """Discrete DDPM schedule, ``alpha_bar[0] = 1`` and ``alpha_bar[t] = prod_{s<=t}(1 - beta_s)``."""

    def __init__(self, alphas_cumprod: torch.Tensor, t_range=T_RANGE):
        ab = torch.as_tensor(alphas_cumprod, dtype=torch.float64)
        self.alpha_bar = torch.cat([ab.new_ones(1), ab])
        self.t_max = len(ab)
        self.t_range = tuple(int(v) for v in t_range)
        if not torch.all(self.alpha_bar[1:] < self.alpha_bar[:-1]) or self.alpha_bar[-1] <= 0:
            raise ValueError("alpha_bar must decrease strictly within (0, 1]")

    @classmethod
    def scaled_linear(cls, t_max=T_MAX, beta_start=0.00085, beta_end=0.012, t_range=T_RANGE):
        """Stable Diffusion v1 betas."""
        betas = torch.linspace(beta_start**0.5, beta_end**0.5, t_max, dtype=torch.float64) ** 2
        return cls(torch.cumprod(1 - betas, 0), t_range)

    def ab(self, t, like: torch.Tensor | None = None):
        t = int(t)
        if not 0 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max}]")
        v = self.alpha_bar[t]
        return v.to(like.dtype) if like is not None else v

    def sample_t(self, gen: torch.Generator) -> int:
        lo, hi = self.t_range
        return int(torch.randint(lo, hi + 1, (1,), generator=gen))


def add_noise(x, t: int, eps, schedule: NoiseSchedule):
    ab = schedule.ab(t, x)
    return ab.sqrt() * x + (1 - ab).sqrt() * eps


@dataclass
class GuidanceContext:
    prompt: str
    scale: float = 10.0
    seed: int = 0
    backend: str = "toy"
    weighting: str = "constant"
    cfg_on_lora: bool = False

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("guidance scale must be >= 1")


def weight(t: int, ctx: GuidanceContext, schedule: NoiseSchedule) -> float:
    if ctx.weighting == "constant":
        return 1.0
    if ctx.weighting == "sds":  # DreamFusion's w(t) = 1 - alpha_bar
        return float(1 - schedule.ab(t))
    raise ValueError(f"unknown weighting {ctx.weighting!r}")


def guided_noise(backend, x_t, t, ctx: GuidanceContext, lora=None, scale=None):
    """Classifier-free guidance; ``scale == 1`` returns the conditional branch untouched."""
    s = ctx.scale if scale is None else scale
    eps_c = backend.predict(x_t, t, ctx, cond=True, lora=lora)
    if s == 1:
        return eps_c
    eps_u = backend.predict(x_t, t, ctx, cond=False, lora=lora)
    return eps_u + s * (eps_c - eps_u)


@dataclass
class Draw:
    t: int
    eps: torch.Tensor
    x_t: torch.Tensor


def draw_noise(x, schedule: NoiseSchedule, gen: torch.Generator) -> Draw:
    t = schedule.sample_t(gen)
    eps = torch.randn(x.shape, generator=gen, dtype=x.dtype).to(x.device)
    return Draw(t, eps, add_noise(x.detach(), t, eps, schedule))


@torch.no_grad()
def sds_gradient(backend, x, ctx: GuidanceContext, gen: torch.Generator):
    """``w(t) (eps_phi(x_t; T, t) - eps)`` w.r.t. the latent; returns ``(grad, draw)``."""
    d = draw_noise(x, backend.schedule, gen)
    eps_phi = guided_noise(backend, d.x_t, d.t, ctx)
    return weight(d.t, ctx, backend.schedule) * (eps_phi - d.eps), d


@torch.no_grad()
def vsd_gradient(backend, x, ctx: GuidanceContext, lora, gen: torch.Generator):
    """``w(t) (eps_phi - eps_lora)``; ``eps_lora`` uses CFG only if ``ctx.cfg_on_lora``."""
    d = draw_noise(x, backend.schedule, gen)
    eps_phi = guided_noise(backend, d.x_t, d.t, ctx)
    if hasattr(lora, "noise_for"):
        eps_lora = lora.noise_for(d, ctx)
    elif ctx.cfg_on_lora:
        eps_lora = guided_noise(backend, d.x_t, d.t, ctx, lora=lora)
    else:
        eps_lora = backend.predict(d.x_t, d.t, ctx, cond=True, lora=lora)
    return weight(d.t, ctx, backend.schedule) * (eps_phi - eps_lora), d


def backprop_score(x: torch.Tensor, grad: torch.Tensor) -> None:
    """Push a latent-space gradient through ``dx/dtheta`` into theta's ``.grad``."""
    x.backward(gradient=grad.to(x.dtype))


class ForcedNoiseLoRA(nn.Module):
    """Test double whose prediction is the draw's true noise, so VSD collapses to SDS."""

    def noise_for(self, draw: Draw, ctx) -> torch.Tensor:
        return draw.eps


def lora_step(backend, lora, optimizer, x, ctx: GuidanceContext, gen: torch.Generator) -> float:
    """One denoising step on the LoRA branch only; returns the loss."""
    if optimizer is None:
        return float("nan")
    d = draw_noise(x.detach(), backend.schedule, gen)
    pred = backend.predict(d.x_t, d.t, ctx, cond=True, lora=lora)
    loss = F.mse_loss(pred, d.eps)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def ddim_refine(backend, x0, ctx: GuidanceContext, strength: float, steps: int, gen: torch.Generator):
    """Noise ``x0`` to ``strength * T`` then denoise with deterministic DDIM steps."""
    sched = backend.schedule
    t_start = int(round(strength * sched.t_max))
    if t_start <= 0:
        return x0.clone()
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype).to(x0.device)
    x = add_noise(x0, t_start, eps, sched)
    ts = sorted({int(round(v)) for v in torch.linspace(t_start, 0, steps + 1).tolist()}, reverse=True)
    for t, t_prev in zip(ts, ts[1:]):
        e = guided_noise(backend, x, t, ctx)
        ab, ab_prev = sched.ab(t, x), sched.ab(t_prev, x)
        x0_pred = (x - (1 - ab).sqrt() * e) / ab.sqrt()
        x = ab_prev.sqrt() * x0_pred + (1 - ab_prev).sqrt() * e
    return x


class ToyLoRA(nn.Module):
    """Low-rank update ``B @ A`` of the toy predictor's ``(D, 1)`` target weight."""

    def __init__(self, dim: int, rank: int = 4, alpha: float = 4.0, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.A = nn.Parameter(torch.randn(rank, 1, generator=g, dtype=torch.float64) / math.sqrt(rank))
        self.B = nn.Parameter(torch.zeros(dim, rank, dtype=torch.float64))
        self.scaling = alpha / rank

    def delta(self) -> torch.Tensor:
        return (self.B @ self.A)[:, 0] * self.scaling


class ToyBackend:
    """Exact-noise oracle for a fixed clean latent (hermetic test double).

    Latents are images ``(3, size, size)``.  The prediction is
    ``(x_t - sqrt(ab_t) * x_target) / sqrt(1 - ab_t)`` and ignores the prompt,
    so the unconditional branch equals the conditional one.
    """

    name = "toy"
    lora_placement = "low-rank update of the (D, 1) target weight"

    def __init__(self, x_target: torch.Tensor, schedule: NoiseSchedule | None = None, size: int = 64):
        self.schedule = schedule or NoiseSchedule.scaled_linear()
        self.size = size
        x_target = torch.as_tensor(x_target, dtype=torch.float64)
        if x_target.ndim == 3 and x_target.shape[-1] == 3 and x_target.shape[0] != 3:
            x_target = self.encode_latent(x_target)
        self.shape = tuple(x_target.shape)
        self.target = nn.Linear(1, x_target.numel(), bias=False).double()
        with torch.no_grad():
            self.target.weight.copy_(x_target.reshape(-1, 1))
        self.target.weight.requires_grad_(False)

    @property
    def x_target(self) -> torch.Tensor:
        return self.target.weight[:, 0].reshape(self.shape)

    def encode_latent(self, img: torch.Tensor) -> torch.Tensor:
        x = img.permute(2, 0, 1)
        if x.shape[-1] != self.size:
            x = F.interpolate(x[None], size=(self.size, self.size), mode="area")[0]
        return x

    def decode_latent(self, x: torch.Tensor) -> torch.Tensor:
        return x.permute(1, 2, 0)

    def predict(self, x_t, t, ctx=None, cond=True, lora=None):
        w = self.target.weight[:, 0]
        if lora is not None:
            w = w + lora.delta()
        ab = self.schedule.ab(t, x_t)
        clean = w.reshape(x_t.shape).to(x_t.dtype)
        return (x_t - ab.sqrt() * clean) / (1 - ab).sqrt()

    def make_lora(self, rank: int = 4, seed: int = 0) -> ToyLoRA:
        return ToyLoRA(self.target.weight.shape[0], rank, seed=seed)

    def refine_image(self, img, ctx=None, strength=0.4, steps=25, gen=None):
        return img.clone()

    def base_parameters(self):
        return [self.target.weight]


def get_backend(name: str, **kw):
    if name == "toy":
        if "x_target" not in kw:
            raise BackendError("toy backend needs an x_target latent")
        return ToyBackend(kw["x_target"], size=kw.get("size", 64))
    if name == "latent-diffusion":
        from .diffusion import LatentDiffusionBackend

        return LatentDiffusionBackend.from_pretrained(kw.get("model_id"), cache_dir=kw.get("cache_dir"))
    raise BackendError(f"unknown guidance backend {name!r}")
