"""Dual-branch (sequence + image) path VAE.

Sequence branch: point embedding + sinusoidal index encoding, a masked
transformer encoder, masked mean-pool, linear to ``d_seq``.  Image branch:
six stride-2 convolutions down to 1x1, linear to ``d_img``.  The two codes
are concatenated and projected to ``mu``/``logvar`` of a ``d_latent``
Gaussian.  Decoders mirror the encoders: learned positional queries plus a
projection of ``z`` through a transformer for points, transposed
convolutions for the raster.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, StructuralError
from .geometry import K_MAX, BezierPath, aux_points_closed, batched_chamfer

CHECKPOINT_FORMAT = "neuralpath-vae"
CHECKPOINT_VERSION = 1


@dataclass
class VaeConfig:
    d_hidden: int = 64
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 128
    d_seq: int = 32
    d_img: int = 64
    d_latent: int = 24
    k_max: int = K_MAX
    decoded_points: int = 48
    image_size: int = 64
    dropout: float = 0.1
    w_chamfer: float = 1.0
    w_image: float = 0.1
    w_kl: float = 0.01
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    warmup_frac: float = 0.05
    aux_n: int = 4
    perceptual: str = "pyramid"
    seed: int = 0

    def __post_init__(self):
        dims = (self.d_hidden, self.n_layers, self.n_heads, self.d_seq, self.d_img,
                self.d_latent, self.k_max, self.decoded_points, self.image_size)
        if any(d <= 0 for d in dims):
            raise ConfigError("all VAE dimensions must be positive")
        if min(self.w_chamfer, self.w_image, self.w_kl) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.decoded_points % 3 or self.decoded_points > self.k_max:
            raise ConfigError("decoded_points must be a multiple of 3 and <= k_max")
        if self.image_size != 64:
            raise ConfigError("the image branch is built for 64x64 rasters")

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown VAE config keys: {sorted(unknown)}")
        return cls(**d)


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


def _transformer(cfg: VaeConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        cfg.d_hidden, cfg.n_heads, cfg.d_ff, cfg.dropout, batch_first=True, norm_first=True
    )
    return nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)


class SequenceEncoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.embed = nn.Linear(2, cfg.d_hidden)
        self.register_buffer("pe", sinusoidal_encoding(cfg.k_max, cfg.d_hidden), persistent=False)
        self.body = _transformer(cfg)
        self.norm = nn.LayerNorm(cfg.d_hidden)
        self.out = nn.Linear(cfg.d_hidden, cfg.d_seq)

    def forward(self, points, mask):
        points = points * mask[..., None]
        h = self.embed(points) + self.pe[: points.shape[1]]
        h = self.body(h, src_key_padding_mask=~mask)
        h = self.norm(h) * mask[..., None]
        pooled = h.sum(1) / mask.sum(1, keepdim=True).clamp(min=1)
        return self.out(pooled)


_ENC_CHANNELS = (16, 32, 64, 128, 128, 128)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        layers, c_in = [], 1
        for c in _ENC_CHANNELS:
            layers += [nn.Conv2d(c_in, c, 4, 2, 1), nn.GroupNorm(min(8, c // 4), c), nn.SiLU()]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(c_in, cfg.d_img)

    def forward(self, img):
        return self.out(self.body(img).flatten(1))


class SequenceDecoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.n_out = cfg.decoded_points
        self.queries = nn.Parameter(torch.randn(cfg.k_max, cfg.d_hidden) * 0.02)
        self.register_buffer("pe", sinusoidal_encoding(cfg.k_max, cfg.d_hidden), persistent=False)
        self.cond = nn.Linear(cfg.d_latent, cfg.d_hidden)
        self.body = _transformer(cfg)
        self.norm = nn.LayerNorm(cfg.d_hidden)
        self.head = nn.Linear(cfg.d_hidden, 2)

    def forward(self, z):
        h = self.queries + self.pe + self.cond(z)[:, None, :]
        h = self.norm(self.body(h))
        return torch.sigmoid(self.head(h[:, : self.n_out]))


class ImageDecoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        chans = _ENC_CHANNELS[::-1]
        self.inp = nn.Linear(cfg.d_latent, chans[0])
        layers = []
        for c_in, c_out in zip(chans, chans[1:]):
            layers += [nn.ConvTranspose2d(c_in, c_out, 4, 2, 1), nn.GroupNorm(min(8, c_out // 4), c_out), nn.SiLU()]
        layers += [nn.ConvTranspose2d(chans[-1], 1, 4, 2, 1)]
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.body(self.inp(z)[:, :, None, None]))


class NeuralPathVAE(nn.Module):
    def __init__(self, cfg: VaeConfig | None = None):
        super().__init__()
        self.cfg = cfg or VaeConfig()
        c = self.cfg
        self.seq_encoder = SequenceEncoder(c)
        self.img_encoder = ImageEncoder(c)
        self.fuse_mu = nn.Linear(c.d_seq + c.d_img, c.d_latent)
        self.fuse_logvar = nn.Linear(c.d_seq + c.d_img, c.d_latent)
        self.seq_decoder = SequenceDecoder(c)
        self.img_decoder = ImageDecoder(c)

    def encode_sequence(self, points, mask):
        valid = points[mask]
        if valid.numel() and (valid.min() < 0 or valid.max() > 1):
            raise StructuralError("sequence encoder expects coordinates normalized to [0, 1]")
        return self.seq_encoder(points, mask)

    def encode_image(self, img):
        s = self.cfg.image_size
        if img.shape[-2:] != (s, s):
            raise StructuralError(f"image encoder expects {s}x{s} rasters, got {tuple(img.shape[-2:])}")
        if img.ndim == 3:
            img = img[:, None]
        return self.img_encoder(img)

    def fuse(self, z_seq, z_img):
        h = torch.cat([z_seq, z_img], dim=-1)
        return self.fuse_mu(h), self.fuse_logvar(h).clamp(-10.0, 10.0)

    def encode(self, points, mask, img):
        return self.fuse(self.encode_sequence(points, mask), self.encode_image(img))

    def reparameterize(self, mu, logvar):
        if not self.training:
            return mu
        return mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)

    def decode_points(self, z):
        return self.seq_decoder(z)

    def decode_image(self, z):
        return self.img_decoder(z)

    def forward(self, points, mask, img):
        mu, logvar = self.encode(points, mask, img)
        z = self.reparameterize(mu, logvar)
        return self.decode_points(z), self.decode_image(z), mu, logvar


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, per item."""
    return -0.5 * torch.sum(1 + logvar - mu.pow(2) - logvar.exp(), dim=-1)


def pyramid_l1(a, b, octaves: int = 3):
    """Multi-scale L1 on 2x average-pooled copies; deterministic perceptual stand-in."""
    total = a.new_zeros(())
    for _ in range(octaves):
        a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
        total = total + (a - b).abs().mean()
    return total / octaves


class VggPerceptual(nn.Module):
    """Perceptual distance on frozen ImageNet VGG16 features (needs downloadable weights)."""

    def __init__(self):
        super().__init__()
        from .errors import BackendError

        try:
            from torchvision.models import VGG16_Weights, vgg16

            feats = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features[:16].eval()
        except Exception as exc:
            raise BackendError(f"VGG16 weights unavailable: {exc}") from exc
        for p in feats.parameters():
            p.requires_grad_(False)
        self.features = feats

    def forward(self, a, b):
        rgb_a, rgb_b = a.expand(-1, 3, -1, -1), b.expand(-1, 3, -1, -1)
        return F.mse_loss(self.features(rgb_a), self.features(rgb_b))


def perceptual_backend(name: str):
    if name == "pyramid":
        return pyramid_l1
    if name == "vgg16":
        return VggPerceptual()
    raise ConfigError(f"unknown perceptual backend {name!r}")


def vae_loss(cfg: VaeConfig, pred_points, pred_img, mu, logvar, batch, perceptual=pyramid_l1):
    """Weighted Chamfer + image + KL loss; returns ``(total, l_cfr, l_img, l_kl)``."""
    aux_pred = aux_points_closed(pred_points, cfg.aux_n)
    l_cfr = batched_chamfer(batch["aux"].to(aux_pred), batch["aux_mask"], aux_pred).mean()
    target = batch["images"].to(pred_img)
    l_img = (pred_img - target).abs().mean() + perceptual(pred_img, target)
    l_kl = kl_divergence(mu, logvar).mean()
    total = cfg.w_chamfer * l_cfr + cfg.w_image * l_img + cfg.w_kl * l_kl
    return total, l_cfr, l_img, l_kl


def path_tensors(paths: list[BezierPath]):
    """Batch tensors ``(points, mask)`` for the sequence encoder."""
    pts = torch.tensor(np.stack([p.points for p in paths]), dtype=torch.float32)
    mask = torch.tensor(np.stack([p.mask for p in paths]))
    return pts, mask


def decoded_to_path(points: torch.Tensor) -> BezierPath:
    return BezierPath.from_points(points.detach().double().cpu().numpy(), closed=True)


def interpolate(z1, z2, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return (1.0 - t) * z1 + t * z2


def sample_prior(seed: int, count: int | None = None, d_latent: int = 24):
    g = torch.Generator().manual_seed(int(seed))
    shape = (d_latent,) if count is None else (count, d_latent)
    return torch.randn(shape, generator=g)


def save_checkpoint(model: NeuralPathVAE, path, epoch: int = 0, dataset_hash: str = "") -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.cfg),
            "state_dict": model.state_dict(),
            "epoch": epoch,
            "dataset_hash": dataset_hash,
        },
        path,
    )


def load_checkpoint(path) -> tuple[NeuralPathVAE, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise StructuralError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise StructuralError(f"unsupported checkpoint version {blob.get('version')}")
    model = NeuralPathVAE(VaeConfig.from_dict(blob["config"]))
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise StructuralError(f"checkpoint parameters do not match config: {exc}") from exc
    model.eval()
    meta = {k: blob[k] for k in ("epoch", "dataset_hash")}
    return model, meta
