"""Denoising diffusion: schedule, corruption, sampling and training.

Arrays in :class:`NoiseSchedule` are indexed by the step ``t`` directly;
index 0 holds the clean-image convention (alpha_bar[0] == 1, beta[0] == 0).
Images enter the model in [-1, 1]; see :func:`to_model_range`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from . import nncore
from .errors import ConfigError, DataContractError, NumericInstabilityError, ShapeError
from .nncore import OptimizerState, Tensor, UNetDenoiser, UNetSpec

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ConfigError(f"step {t} outside 1..{self.T}")


def cosine_schedule(T: int, s: float = COSINE_OFFSET, max_beta: float = MAX_BETA) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1 + s)) * math.pi / 2) ** 2
    ratio = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - ratio[1:] / ratio[:-1], max_beta)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def to_model_range(frames) -> Tensor:
    """[0, 1] rasters -> [-1, 1] tensor of shape (N, 1, h, w)."""
    x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    return x * 2.0 - 1.0


def from_model_range(x: Tensor) -> np.ndarray:
    return ((x[:, 0].detach().cpu().numpy().astype(np.float64) + 1.0) / 2.0).clip(0.0, 1.0)


def forward_sample(x0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Closed-form corruption ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be an int or a per-sample (B,) integer tensor.
    """
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    if torch.is_tensor(t) and t.ndim > 0:
        if int(t.min()) < 1 or int(t.max()) > schedule.T:
            raise ConfigError(f"steps must lie in 1..{schedule.T}")
        ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t]
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    t = int(t)
    schedule.check_step(t)
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# simplex noise


@dataclass(frozen=True)
class SimplexNoiseConfig:
    octaves: int = 4
    base_frequency: float = 4.0  # cycles per image side
    persistence: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.octaves < 1:
            raise ConfigError("simplex octaves must be >= 1")
        if not 0.0 < self.persistence <= 1.0:
            raise ConfigError("simplex persistence must lie in (0, 1]")
        if self.base_frequency <= 0:
            raise ConfigError("simplex base_frequency must be > 0")


_F2 = 0.5 * (math.sqrt(3.0) - 1.0)
_G2 = (3.0 - math.sqrt(3.0)) / 6.0
_GRAD2 = np.array(
    [[1, 1], [-1, 1], [1, -1], [-1, -1], [1, 0], [-1, 0], [1, 0], [-1, 0], [0, 1], [0, -1], [0, 1], [0, -1]],
    dtype=np.float64,
)


def _simplex2(x: np.ndarray, y: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Vectorised 2-D simplex noise, approximately in [-1, 1]."""
    s = (x + y) * _F2
    i = np.floor(x + s).astype(np.int64)
    j = np.floor(y + s).astype(np.int64)
    t = (i + j) * _G2
    x0 = x - (i - t)
    y0 = y - (j - t)
    i1 = (x0 > y0).astype(np.int64)
    j1 = 1 - i1
    corners = (
        (x0, y0, 0, 0),
        (x0 - i1 + _G2, y0 - j1 + _G2, i1, j1),
        (x0 - 1.0 + 2.0 * _G2, y0 - 1.0 + 2.0 * _G2, 1, 1),
    )
    ii = i & 255
    jj = j & 255
    total = np.zeros_like(x)
    for cx, cy, di, dj in corners:
        gi = perm[ii + di + perm[jj + dj]] % 12
        falloff = np.maximum(0.5 - cx * cx - cy * cy, 0.0)
        total += falloff**4 * (_GRAD2[gi, 0] * cx + _GRAD2[gi, 1] * cy)
    return 70.0 * total


def simplex_noise(h: int, w: int, config: SimplexNoiseConfig = SimplexNoiseConfig(), count: Optional[int] = None) -> np.ndarray:
    """Multi-octave simplex field(s) amplitude-normalised into [-1, 1].

    Returns shape (h, w), or (count, h, w) when ``count`` is given; each
    field uses its own permutation and offsets drawn from ``config.seed``.
    """
    config.validate()
    if h < 1 or w < 1:
        raise ConfigError(f"noise size must be positive, got {(h, w)}")
    rng = np.random.default_rng(config.seed)
    n = 1 if count is None else count
    rows, cols = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.empty((n, h, w))
    norm = sum(config.persistence**k for k in range(config.octaves))
    for idx in range(n):
        perm = np.tile(rng.permutation(256), 2)
        acc = np.zeros((h, w))
        for k in range(config.octaves):
            freq = config.base_frequency * 2**k
            oy, ox = rng.uniform(0, 256, size=2)
            acc += config.persistence**k * _simplex2(cols * freq + ox, rows * freq + oy, perm)
        out[idx] = np.clip(acc / norm, -1.0, 1.0)
    return out[0] if count is None else out


class NoiseSampler:
    """Draws corruption noise of one kind from a seeded stream.

    Simplex fields are standardised to zero mean and unit variance per
    image so they can stand in for Gaussian noise in the schedule algebra.
    """

    def __init__(self, kind: str = "gaussian", seed: int = 0, simplex: SimplexNoiseConfig = SimplexNoiseConfig()):
        if kind not in ("gaussian", "simplex"):
            raise ConfigError(f"noise kind must be 'gaussian' or 'simplex', got {kind!r}")
        self.kind = kind
        self.simplex = simplex
        self.gen = torch.Generator().manual_seed(seed)
        self._np = np.random.default_rng(seed)

    def __call__(self, shape, dtype=torch.float32) -> Tensor:
        if self.kind == "gaussian":
            return torch.randn(shape, generator=self.gen, dtype=torch.float64).to(dtype)
        b, c, h, w = shape
        cfg = replace(self.simplex, seed=int(self._np.integers(2**63 - 1)))
        fields = simplex_noise(h, w, cfg, count=b * c)
        fields -= fields.mean(axis=(1, 2), keepdims=True)
        fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
        return torch.from_numpy(fields.reshape(b, c, h, w)).to(dtype)


# ---------------------------------------------------------------------------
# loss, sampling, reconstruction


def ddpm_loss(
    model: Callable[[Tensor, Tensor], Tensor],
    x0: Tensor,
    schedule: NoiseSchedule,
    sampler: NoiseSampler,
    t: Optional[Tensor] = None,
) -> Tensor:
    """Noise-prediction mean squared error at uniformly drawn steps."""
    if x0.ndim != 4 or x0.shape[0] == 0:
        raise ShapeError(f"ddpm_loss needs a non-empty (B, C, h, w) batch, got {tuple(x0.shape)}")
    if t is None:
        t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=sampler.gen)
    eps = sampler(x0.shape, x0.dtype)
    x_t = forward_sample(x0, t, eps, schedule)
    loss = F.mse_loss(model(x_t, t), eps)
    if not torch.isfinite(loss):
        raise NumericInstabilityError("non-finite diffusion loss")
    return loss


def posterior_mean(x0: Tensor, x_t: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    """Mean of q(x_{t-1} | x_t, x_0)."""
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar_prev[t]
    beta = schedule.beta[t]
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = math.sqrt(schedule.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0 * x0 + ct * x_t


def reverse_step(
    model: Callable[[Tensor, Tensor], Tensor],
    x_t: Tensor,
    t: int,
    schedule: NoiseSchedule,
    sampler: Optional[NoiseSampler] = None,
    add_noise: bool = True,
) -> Tensor:
    """Sample x_{t-1} from the learned reverse transition."""
    t = int(t)
    schedule.check_step(t)
    steps = torch.full((x_t.shape[0],), t, dtype=torch.long)
    eps_hat = model(x_t, steps)
    beta = float(schedule.beta[t])
    mean = (x_t - beta / math.sqrt(1.0 - schedule.alpha_bar[t]) * eps_hat) / math.sqrt(schedule.alpha[t])
    if t == 1 or not add_noise:
        return mean
    var = (1.0 - schedule.alpha_bar_prev[t]) / (1.0 - schedule.alpha_bar[t]) * beta
    if sampler is None:
        sampler = NoiseSampler("gaussian")
    return mean + math.sqrt(var) * sampler(x_t.shape, x_t.dtype)


@dataclass(frozen=True)
class ReconstructionConfig:
    lambda_t: Optional[int] = None  # None: T // 4
    noise_kind: str = "simplex"
    seed: int = 0
    simplex: SimplexNoiseConfig = SimplexNoiseConfig()


def default_depth(T: int) -> int:
    return max(1, T // 4)


@torch.no_grad()
def reconstruct(model, x0: Tensor, cfg: ReconstructionConfig, schedule: NoiseSchedule) -> Tensor:
    """Partial diffusion: corrupt to depth ``lambda_t`` then denoise to step 0."""
    depth = default_depth(schedule.T) if cfg.lambda_t is None else int(cfg.lambda_t)
    if not 1 <= depth <= schedule.T:
        raise ConfigError(f"lambda_t={depth} outside 1..{schedule.T}")
    sampler = NoiseSampler(cfg.noise_kind, cfg.seed, cfg.simplex)
    x = forward_sample(x0, depth, sampler(x0.shape, x0.dtype), schedule)
    for t in range(depth, 0, -1):
        x = reverse_step(model, x, t, schedule, sampler)
    return x.clamp(-1.0, 1.0)


# ---------------------------------------------------------------------------
# training


@dataclass
class DiffusionTrainConfig:
    T: int = 1000
    epochs: int = 1000
    batch_size: int = 16
    lr: float = 1e-6
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    noise_kind: str = "simplex"
    simplex: SimplexNoiseConfig = SimplexNoiseConfig()
    widths: tuple[int, ...] = (32, 64, 128)
    hflip: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    ema_decay: float = 0.0  # 0 disables weight averaging


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    wall: list[float] = field(default_factory=list)

    def append(self, epoch: int, loss: float, wall: float) -> None:
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.wall.append(wall)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.losses).encode()).hexdigest()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "mean_loss", "wall_time_s"])
            for e, l, w in zip(self.epochs, self.losses, self.wall):
                out.writerow([e, f"{l:.8g}", f"{w:.3f}"])

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "losses": self.losses, "wall": self.wall}

    @classmethod
    def from_json(cls, d: dict) -> "TrainLog":
        return cls(list(d["epochs"]), list(d["losses"]), list(d["wall"]))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def collect_training_frames(sequences) -> np.ndarray:
    """Stack frames of defect-free sequences into one (N, h, w) array."""
    sequences = list(sequences)
    if not sequences:
        raise DataContractError("training set is empty")
    for seq in sequences:
        if getattr(seq, "label", "defect-free") != "defect-free":
            raise DataContractError(f"sequence {seq.id!r} is labelled defective; training uses defect-free data only")
    return np.concatenate([np.asarray(s.frames, dtype=np.float32) for s in sequences])


def _save_state(path, model, opt, cfg, log: TrainLog, epoch: int, kind: str, ema=None) -> None:
    meta = {
        "kind": kind,
        "epoch": epoch,
        "seed": cfg.seed,
        "loss_digest": log.digest(),
        "log": log.to_json(),
        "optimizer": opt.hyper(),
        "train_config": _jsonable(asdict(cfg)),
    }
    nncore.save_checkpoint(path, nncore.state_tensors(model, opt, ema), meta)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def build_denoiser(widths: Sequence[int], seed: int) -> UNetDenoiser:
    torch.manual_seed(seed)
    return UNetDenoiser(UNetSpec(widths=tuple(widths)))


def train_ddpm(
    sequences,
    cfg: DiffusionTrainConfig,
    checkpoint: Optional[str] = None,
    resume: bool = False,
    stop_after: Optional[int] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> tuple[UNetDenoiser, TrainLog]:
    """Fit the noise predictor on frames of defect-free sequences.

    Each epoch draws its shuffling and noise from a seed derived from
    ``(cfg.seed, epoch)``, so a run resumed from an epoch checkpoint
    reproduces the uninterrupted run exactly.  ``stop_after`` ends the run
    early after that many epochs (used to emulate interruption).
    """
    frames = collect_training_frames(sequences)
    x_all = to_model_range(frames)
    schedule = cosine_schedule(cfg.T)
    model = build_denoiser(cfg.widths, cfg.seed)
    opt = OptimizerState(lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay, decoupled=True)
    log = TrainLog()
    start = 0
    if not 0.0 <= cfg.ema_decay < 1.0:
        raise ConfigError(f"ema_decay must lie in [0, 1), got {cfg.ema_decay}")
    params = nncore.named_parameters(model)
    ema = {n: p.detach().clone() for n, p in params.items()} if cfg.ema_decay else None
    if resume and checkpoint and Path(checkpoint).exists():
        tensors, meta = nncore.load_checkpoint(checkpoint)
        nncore.restore_tensors(model, tensors, opt)
        opt.step = int(meta["optimizer"]["step"])
        log = TrainLog.from_json(meta["log"])
        start = int(meta["epoch"])
        if ema is not None:
            ema = nncore.ema_tensors(tensors)
    t0 = time.perf_counter() - (log.wall[-1] if log.wall else 0.0)
    done = 0
    for epoch in range(start, cfg.epochs):
        s = epoch_seed(cfg.seed, epoch)
        gen = torch.Generator().manual_seed(s)
        sampler = NoiseSampler(cfg.noise_kind, s + 1, cfg.simplex)
        total, count = 0.0, 0
        for idx in nncore.iter_batches(len(x_all), cfg.batch_size, gen):
            x0 = x_all[idx]
            if cfg.hflip:
                flip = torch.rand(len(idx), generator=gen) < 0.5
                x0 = torch.where(flip[:, None, None, None], x0.flip(-1), x0)
            loss = ddpm_loss(model, x0, schedule, sampler)
            grads = nncore.backward(loss, params)
            nncore.adamw_step(params, grads, opt)
            if ema is not None:
                nncore.ema_update(ema, params, cfg.ema_decay)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        log.append(epoch + 1, total / count, time.perf_counter() - t0)
        if progress:
            progress(epoch + 1, total / count)
        done += 1
        last = epoch + 1 == cfg.epochs or (stop_after is not None and done >= stop_after)
        if checkpoint and (last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
            _save_state(checkpoint, model, opt, cfg, log, epoch + 1, "ddpm", ema)
        if stop_after is not None and done >= stop_after:
            break
    if ema is not None:
        _load_ema(model, ema)
    model.eval()
    return model, log


def _load_ema(model: UNetDenoiser, ema: dict) -> None:
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(ema[n])


def load_denoiser(path, use_ema: bool = True) -> tuple[UNetDenoiser, dict]:
    """Rebuild a denoiser from a checkpoint; averaged weights win when present."""
    tensors, meta = nncore.load_checkpoint(path)
    widths = tuple(meta["train_config"]["widths"])
    model = UNetDenoiser(UNetSpec(widths=widths))
    nncore.restore_tensors(model, tensors)
    ema = nncore.ema_tensors(tensors)
    if use_ema and ema:
        _load_ema(model, ema)
    model.eval()
    return model, meta
