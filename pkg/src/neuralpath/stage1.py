"""Text-guided optimization of a neural-path SVG by score distillation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .guidance import (ForcedNoiseLoRA, GuidanceContext, backprop_score, lora_step, sds_gradient, step_generator,
                       vsd_gradient)
from .render import NeuralSvg, PathTheta, render, to_document
from .svgio import write_svg

log = logging.getLogger(__name__)

PROMPT_SUFFIX = "minimal flat 2d vector"


@dataclass
class Stage1Config:
    iters: int = 1000
    mode: str = "vsd"
    seed: int = 0
    guidance_scale: float = 10.0
    lr_z: float = 0.05
    lr_color: float = 0.02
    lr_transform: float = 0.01
    lora_rank: int = 4
    lora_lr: float = 1e-4
    render_size: int = 512
    snapshot_every: int = 100
    suffix: str = PROMPT_SUFFIX
    use_suffix: bool = True
    weighting: str = "constant"
    cfg_on_lora: bool = False

    def __post_init__(self):
        if self.mode not in ("vsd", "sds"):
            raise ConfigError(f"stage-1 mode must be 'vsd' or 'sds', got {self.mode!r}")
        if self.iters < 0:
            raise ConfigError("stage-1 iters must be >= 0")


def full_prompt(prompt: str, cfg: Stage1Config) -> str:
    if not prompt or not prompt.strip():
        raise ConfigError("prompt must be non-empty")
    return f"{prompt.strip()}, {cfg.suffix}" if cfg.use_suffix and cfg.suffix else prompt.strip()


def _extent(points: np.ndarray, rotation: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(rotation), math.sin(rotation)
    q = (points - 0.5) * scale @ np.array([[c, s], [-s, c]]) + 0.5
    return q.min(0), q.max(0)


def init_svg(m: int = 64, seed: int = 0, canvas: int = 512, decoder=None, d_latent: int = 24) -> NeuralSvg:
    """Random initial SVG: ``z ~ N(0, I)``, opaque random RGB, log-uniform scale in [0.1, 0.4].

    Translations keep each path's bounding box on canvas; without a
    decoder the canonical frame's unit square stands in for the geometry.
    """
    if m < 1:
        raise ConfigError("m must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((m, d_latent))
    rgb = rng.uniform(0, 1, (m, 3))
    scale = np.exp(rng.uniform(math.log(0.1), math.log(0.4), m))
    rot = rng.uniform(0, 2 * math.pi, m)
    u = rng.uniform(0, 1, (m, 2))
    if decoder is not None:
        with torch.no_grad():
            canon = decoder.decode_points(torch.as_tensor(z, dtype=torch.float32)).double().numpy()
    else:
        canon = np.broadcast_to(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), (m, 4, 2))
    paths = []
    for i in range(m):
        lo, hi = _extent(canon[i], rot[i], scale[i])
        t_lo, t_hi = -lo, 1 - hi
        t = t_lo + u[i] * np.maximum(t_hi - t_lo, 0.0)
        paths.append(PathTheta.create(z[i], [*rgb[i], 1.0], t, rot[i], (scale[i], scale[i])))
    return NeuralSvg(paths, canvas)


@dataclass
class Stage1Result:
    svg: NeuralSvg
    trace: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def param_groups(svg: NeuralSvg, cfg) -> list:
    zs = [p.z for p in svg.paths if not p.frozen]
    groups = [
        {"params": zs, "lr": cfg.lr_z, "name": "z"},
        {"params": [p.color for p in svg.paths], "lr": cfg.lr_color, "name": "color"},
        {"params": [t for p in svg.paths for t in (p.translation, p.rotation, p.scale)], "lr": cfg.lr_transform,
         "name": "transform"},
    ]
    for g in groups:
        for t in g["params"]:
            t.requires_grad_(True)
    return [g for g in groups if g["params"]]


def _all_finite(svg: NeuralSvg) -> bool:
    return all(bool(torch.isfinite(t).all()) for p in svg.paths for t in p.tensors().values())


def freeze(model) -> None:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)


def optimize_stage1(svg: NeuralSvg, prompt: str, decoder, backend, cfg: Stage1Config | None = None, lora=None,
                    rasterizer=None, out_dir=None) -> Stage1Result:
    """Render -> encode -> SDS/VSD gradient -> per-group Adam, for ``cfg.iters`` steps.

    ``lora`` overrides the fresh LoRA branch (e.g. a forced-noise double).
    Raises :class:`NumericError` carrying the last finite SVG if theta
    becomes non-finite.
    """
    cfg = cfg or Stage1Config()
    text = full_prompt(prompt, cfg)
    ctx = GuidanceContext(text, cfg.guidance_scale, cfg.seed, getattr(backend, "name", "custom"), cfg.weighting,
                          cfg.cfg_on_lora)
    if decoder is not None:
        freeze(decoder)
    svg = NeuralSvg(svg.detached().paths, cfg.render_size)
    opt = torch.optim.Adam(param_groups(svg, cfg))
    lopt = None
    if cfg.mode == "vsd":
        if lora is None:
            lora = backend.make_lora(cfg.lora_rank, seed=cfg.seed)
        params = [p for p in lora.parameters() if p.requires_grad]
        lopt = torch.optim.Adam(params, lr=cfg.lora_lr) if params else None
    snap_dir = Path(out_dir) / "snapshots" if out_dir else None
    if snap_dir:
        snap_dir.mkdir(parents=True, exist_ok=True)

    trace = []
    for step in range(cfg.iters):
        last_good = svg.detached()
        img = render(svg, decoder, rasterizer)
        x = backend.encode_latent(img)
        gen = step_generator(cfg.seed, step, 0)
        if cfg.mode == "sds":
            grad, draw = sds_gradient(backend, x, ctx, gen)
        else:
            grad, draw = vsd_gradient(backend, x, ctx, lora, gen)
        opt.zero_grad()
        backprop_score(x, grad)
        opt.step()
        for p in svg.paths:
            p.clamp_()
        if not _all_finite(svg):
            raise NumericError(f"non-finite theta at stage-1 step {step}", last_good=last_good)
        row = {"step": step, "t": draw.t, "loss": float((grad.double() ** 2).mean())}
        if lopt is not None:
            row["lora_loss"] = lora_step(backend, lora, lopt, x.detach(), ctx, step_generator(cfg.seed, step, 1))
        trace.append(row)
        if snap_dir and cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            write_svg(to_document(svg, decoder), snap_dir / f"stage1_{step + 1:05d}.svg")
    svg = svg.detached()
    manifest = {"prompt": prompt, "full_prompt": text, "suffix": cfg.suffix if cfg.use_suffix else "",
                "seed": cfg.seed, "mode": cfg.mode, "iters": cfg.iters, "backend": ctx.backend,
                "config": asdict(cfg), "lora_forced": isinstance(lora, ForcedNoiseLoRA),
                "lora": {"placement": getattr(backend, "lora_placement", "unknown"), "rank": cfg.lora_rank,
                         "optimizer": "adam", "lr": cfg.lora_lr} if cfg.mode == "vsd" else None}
    return Stage1Result(svg, trace, manifest)
