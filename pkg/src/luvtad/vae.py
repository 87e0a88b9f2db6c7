"""Convolutional VAE baseline sharing the denoiser's building blocks."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import torch
from torch import nn
from torch.nn import functional as F

from . import nncore
from .diffusion import TrainLog, _jsonable, collect_training_frames, epoch_seed, to_model_range
from .errors import NumericInstabilityError, ShapeError
from .nncore import OptimizerState, ResBlock, Tensor, _groups

LOGVAR_RANGE = (-10.0, 10.0)


@dataclass(frozen=True)
class VaeSpec:
    in_channels: int = 1
    image_size: int = 64
    widths: tuple[int, ...] = (32, 64, 128)
    latent_dim: int = 64
    max_groups: int = 8

    @property
    def bottleneck(self) -> int:
        return self.image_size // 2 ** len(self.widths)


@dataclass
class LatentStats:
    mu: Tensor
    logvar: Tensor


class VAE(nn.Module):
    def __init__(self, spec: VaeSpec = VaeSpec()):
        super().__init__()
        if spec.bottleneck < 1 or spec.image_size % 2 ** len(spec.widths):
            raise ShapeError(f"image size {spec.image_size} not divisible through {len(spec.widths)} stages")
        self.spec = spec
        w = spec.widths
        g = spec.max_groups
        self.inp = nn.Conv2d(spec.in_channels, w[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = w[0]
        for c in w:
            self.enc.append(ResBlock(prev, c, 0, g))
            self.down.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c
        flat = w[-1] * spec.bottleneck**2
        self.heads = nn.Linear(flat, 2 * spec.latent_dim)
        self.expand = nn.Linear(spec.latent_dim, flat)
        self.dec = nn.ModuleList()
        for c in reversed(w):
            self.dec.append(ResBlock(prev, c, 0, g))
            prev = c
        self.out_norm = nn.GroupNorm(_groups(prev, g), prev)
        self.out = nn.Conv2d(prev, spec.in_channels, 3, padding=1)

    def encode(self, x: Tensor) -> LatentStats:
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.image_size, s.image_size):
            raise ShapeError(f"encoder expects (B, {s.in_channels}, {s.image_size}, {s.image_size}), got {tuple(x.shape)}")
        h = self.inp(x)
        for block, pool in zip(self.enc, self.down):
            h = pool(block(h))
        mu, logvar = self.heads(h.flatten(1)).chunk(2, dim=1)
        return LatentStats(mu, logvar.clamp(*LOGVAR_RANGE))

    def decode(self, z: Tensor) -> Tensor:
        s = self.spec
        if z.ndim != 2 or z.shape[1] != s.latent_dim:
            raise ShapeError(f"latent must be (B, {s.latent_dim}), got {tuple(z.shape)}")
        h = self.expand(z).view(z.shape[0], s.widths[-1], s.bottleneck, s.bottleneck)
        for block in self.dec:
            h = block(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))

    def forward(self, x: Tensor, eps: Optional[Tensor] = None) -> tuple[Tensor, LatentStats]:
        stats = self.encode(x)
        return self.decode(reparameterize(stats, eps=eps)), stats


def reparameterize(stats: LatentStats, gen: Optional[torch.Generator] = None, eps: Optional[Tensor] = None) -> Tensor:
    if eps is None:
        eps = torch.randn(stats.mu.shape, generator=gen, dtype=stats.mu.dtype)
    return stats.mu + torch.exp(0.5 * stats.logvar) * eps


def kl_divergence(stats: LatentStats) -> Tensor:
    """Per-sample KL(q || N(0, I)) summed over latent dimensions."""
    mu, lv = stats.mu, stats.logvar
    return 0.5 * (mu.square() + lv.exp() - 1.0 - lv).sum(dim=1)


def elbo_loss(model: VAE, x: Tensor, gen: Optional[torch.Generator] = None, eps: Optional[Tensor] = None) -> Tensor:
    """Pixel-averaged MSE plus batch-averaged KL (negative ELBO surrogate)."""
    if x.ndim != 4 or x.shape[0] == 0:
        raise ShapeError(f"elbo_loss needs a non-empty (B, C, h, w) batch, got {tuple(x.shape)}")
    stats = model.encode(x)
    recon = model.decode(reparameterize(stats, gen, eps))
    loss = F.mse_loss(recon, x) + kl_divergence(stats).mean()
    if not torch.isfinite(loss):
        raise NumericInstabilityError("non-finite VAE loss")
    return loss


@torch.no_grad()
def reconstruct(model: VAE, x: Tensor) -> Tensor:
    """Deterministic reconstruction through the posterior mean."""
    return model.decode(model.encode(x).mu).clamp(-1.0, 1.0)


@dataclass
class VaeTrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    widths: tuple[int, ...] = (32, 64, 128)
    latent_dim: int = 64
    hflip: bool = True
    seed: int = 0
    checkpoint_every: int = 0


def build_vae(cfg: VaeTrainConfig, image_size: int) -> VAE:
    torch.manual_seed(cfg.seed)
    return VAE(VaeSpec(widths=tuple(cfg.widths), latent_dim=cfg.latent_dim, image_size=image_size))


def train_vae(
    sequences,
    cfg: VaeTrainConfig,
    checkpoint: Optional[str] = None,
    resume: bool = False,
    stop_after: Optional[int] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> tuple[VAE, TrainLog]:
    frames = collect_training_frames(sequences)
    x_all = to_model_range(frames)
    model = build_vae(cfg, x_all.shape[-1])
    opt = OptimizerState(lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay, decoupled=False)
    log = TrainLog()
    start = 0
    if resume and checkpoint and Path(checkpoint).exists():
        tensors, meta = nncore.load_checkpoint(checkpoint)
        nncore.restore_tensors(model, tensors, opt)
        opt.step = int(meta["optimizer"]["step"])
        log = TrainLog.from_json(meta["log"])
        start = int(meta["epoch"])
    params = nncore.named_parameters(model)
    t0 = time.perf_counter() - (log.wall[-1] if log.wall else 0.0)
    done = 0
    for epoch in range(start, cfg.epochs):
        gen = torch.Generator().manual_seed(epoch_seed(cfg.seed, epoch))
        total, count = 0.0, 0
        for idx in nncore.iter_batches(len(x_all), cfg.batch_size, gen):
            x = x_all[idx]
            if cfg.hflip:
                flip = torch.rand(len(idx), generator=gen) < 0.5
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            loss = elbo_loss(model, x, gen)
            nncore.adamw_step(params, nncore.backward(loss, params), opt)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        log.append(epoch + 1, total / count, time.perf_counter() - t0)
        if progress:
            progress(epoch + 1, total / count)
        done += 1
        last = epoch + 1 == cfg.epochs or (stop_after is not None and done >= stop_after)
        if checkpoint and (last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
            meta = {
                "kind": "vae",
                "epoch": epoch + 1,
                "seed": cfg.seed,
                "loss_digest": log.digest(),
                "log": log.to_json(),
                "optimizer": opt.hyper(),
                "train_config": _jsonable(asdict(cfg)),
                "image_size": int(x_all.shape[-1]),
            }
            nncore.save_checkpoint(checkpoint, nncore.state_tensors(model, opt), meta)
        if stop_after is not None and done >= stop_after:
            break
    model.eval()
    return model, log


def load_vae(path) -> tuple[VAE, dict]:
    tensors, meta = nncore.load_checkpoint(path)
    tc = meta["train_config"]
    model = VAE(VaeSpec(widths=tuple(tc["widths"]), latent_dim=int(tc["latent_dim"]), image_size=int(meta["image_size"])))
    nncore.restore_tensors(model, tensors)
    model.eval()
    return model, meta
