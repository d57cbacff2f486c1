"""VAE training loop with warmup + linear decay and JSON-lines logging."""

from __future__ import annotations

import json
import logging
import math
import warnings

import torch

from .dataset import PathDataset, manifest_hash
from .errors import DatasetError, NumericError
from .geometry import aux_points_closed, batched_chamfer
from .vae import NeuralPathVAE, VaeConfig, perceptual_backend, save_checkpoint, vae_loss

log = logging.getLogger(__name__)


def _lr_lambda(total_steps: int, warmup_frac: float):
    warmup = max(1, int(math.ceil(warmup_frac * total_steps)))

    def f(step):
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    return f


@torch.no_grad()
def evaluate_chamfer(model: NeuralPathVAE, tensors: dict, batch_size: int = 256) -> float:
    """Mean Chamfer between input and reconstruction (z = mu) over a split."""
    model.eval()
    n = tensors["points"].shape[0]
    total = 0.0
    for i in range(0, n, batch_size):
        b = {k: v[i : i + batch_size] for k, v in tensors.items()}
        mu, _ = model.encode(b["points"], b["mask"], b["images"])
        pred = aux_points_closed(model.decode_points(mu), model.cfg.aux_n)
        total += float(batched_chamfer(b["aux"], b["aux_mask"], pred).sum())
    return total / max(n, 1)


def train(dataset: PathDataset, cfg: VaeConfig | None = None, log_path=None, checkpoint_path=None,
          epoch_callback=None) -> tuple[NeuralPathVAE, list[dict]]:
    """Train the dual-branch VAE end-to-end; returns the model and per-epoch log rows."""
    cfg = cfg or VaeConfig()
    if len(dataset) == 0:
        raise DatasetError("cannot train on an empty dataset")
    torch.manual_seed(cfg.seed)
    train_set = dataset.subset("train")
    val_set = dataset.subset("val")
    if len(val_set) == 0:
        val_set = train_set
    tr, va = train_set.tensors(), val_set.tensors()
    n = tr["points"].shape[0]

    model = NeuralPathVAE(cfg)
    perceptual = perceptual_backend(cfg.perceptual)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(steps_per_epoch * cfg.epochs, cfg.warmup_frac))
    gen = torch.Generator().manual_seed(cfg.seed)

    rows = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            perm = torch.randperm(n, generator=gen)
            sums = torch.zeros(4)
            for i in range(0, n, cfg.batch_size):
                idx = perm[i : i + cfg.batch_size]
                batch = {k: v[idx] for k, v in tr.items()}
                out = model(batch["points"], batch["mask"], batch["images"])
                losses = vae_loss(cfg, *out, batch, perceptual)
                if not torch.isfinite(losses[0]):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}: "
                        f"cfr={float(losses[1]):.4g} img={float(losses[2]):.4g} kl={float(losses[3]):.4g}"
                    )
                opt.zero_grad()
                losses[0].backward()
                opt.step()
                sched.step()
                sums += torch.tensor([float(x.detach()) for x in losses]) * len(idx)
            means = (sums / n).tolist()
            row = {"epoch": epoch, "loss": means[0], "L_cfr": means[1], "L_img": means[2], "L_kl": means[3],
                   "val_chamfer": evaluate_chamfer(model, va)}
            rows.append(row)
            log.info("epoch %d %s", epoch, row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            if epoch_callback:
                epoch_callback(row)
            if len(rows) >= 10:
                window = [r["val_chamfer"] for r in rows[-10:]]
                if window[-1] > window[0]:
                    warnings.warn(f"validation Chamfer rose over epochs {epoch - 9}-{epoch}", RuntimeWarning)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, epoch=cfg.epochs, dataset_hash=manifest_hash(dataset.manifest))
    return model, rows
