"""Tensor, layer, gradient and optimiser substrate for both model families.

Tensors and reverse-mode differentiation come from torch; this module
fixes the denoiser architecture, the optimiser update rules (written out so
their state can be checkpointed and resumed bit-exactly) and the binary
checkpoint format.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import FormatError, NumericInstabilityError, ShapeError, UsageError

Tensor = torch.Tensor

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------------------
# layers


def _groups(channels: int, max_groups: int) -> int:
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, max_groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, max_groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None
        self.norm2 = nn.GroupNorm(_groups(cout, max_groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, emb: Optional[Tensor] = None) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None and emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class UNetSpec:
    """Fixed architecture descriptor: one stage per resolution."""

    in_channels: int = 1
    widths: tuple[int, ...] = (32, 64, 128)
    max_groups: int = 8

    @property
    def emb_dim(self) -> int:
        return 4 * self.widths[0]


class UNetDenoiser(nn.Module):
    """Small U-shaped noise predictor with additive time conditioning.

    Resolution halves between consecutive ``widths`` entries; the last
    entry is the bottleneck width.
    """

    def __init__(self, spec: UNetSpec = UNetSpec()):
        super().__init__()
        if len(spec.widths) < 2:
            raise ShapeError("UNetSpec.widths needs at least two stages")
        self.spec = spec
        w, g, e = spec.widths, spec.max_groups, spec.emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(w[0], e), nn.SiLU(), nn.Linear(e, e))
        self.inp = nn.Conv2d(spec.in_channels, w[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.pool = nn.ModuleList()
        for i in range(len(w) - 1):
            self.down.append(ResBlock(w[max(i - 1, 0)], w[i], e, g))
            self.pool.append(nn.Conv2d(w[i], w[i], 3, stride=2, padding=1))
        self.mid1 = ResBlock(w[-2], w[-1], e, g)
        self.mid2 = ResBlock(w[-1], w[-1], e, g)
        self.up = nn.ModuleList()
        prev = w[-1]
        for i in reversed(range(len(w) - 1)):
            self.up.append(ResBlock(prev + w[i], w[i], e, g))
            prev = w[i]
        self.out_norm = nn.GroupNorm(_groups(w[0], g), w[0])
        self.out = nn.Conv2d(w[0], spec.in_channels, 3, padding=1)

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4:
            raise ShapeError(f"layer 'inp': expected rank-4 input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"layer 'inp': expected {self.spec.in_channels} channels, got {x.shape[1]}")
        factor = 2 ** (len(self.spec.widths) - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"layer 'pool': spatial size {tuple(x.shape[2:])} not divisible by {factor}")

    def forward(self, x: Tensor, t: Tensor) -> Tensor:
        self.check_input(x)
        emb = self.time_mlp(timestep_embedding(t, self.spec.widths[0]).to(x.dtype))
        h = self.inp(x)
        skips = []
        for block, pool in zip(self.down, self.pool):
            h = block(h, emb)
            skips.append(h)
            h = pool(h)
        h = self.mid2(self.mid1(h, emb), emb)
        for block in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


def forward_denoiser(params: UNetDenoiser, x_t: Tensor, t) -> Tensor:
    """Predicted noise for ``x_t`` at step(s) ``t`` (int or (B,) tensor)."""
    if not torch.is_tensor(t):
        t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    elif t.ndim == 0:
        t = t.expand(x_t.shape[0])
    return params(x_t, t)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def zero_parameters(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


# ---------------------------------------------------------------------------
# gradients


def backward(loss: Tensor, params: Mapping[str, Tensor] | nn.Module) -> dict[str, Tensor]:
    """Reverse-mode accumulation of ``loss`` into fresh gradients.

    Every parameter receives a gradient; parameters the loss does not
    depend on get zeros.
    """
    named = dict(params.named_parameters()) if isinstance(params, nn.Module) else dict(params)
    if not torch.is_tensor(loss) or loss.grad_fn is None:
        raise UsageError("backward() needs a loss produced by a recorded forward pass")
    if loss.numel() != 1:
        raise UsageError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = [n for n, p in named.items() if p.requires_grad]
    grads = torch.autograd.grad(loss, [named[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        out[n] = torch.zeros_like(named[n]) if g is None else g
    return out


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    lr: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = True  # AdamW when True, plain Adam (L2 in the gradient) otherwise
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "decoupled": self.decoupled,
            "step": self.step,
        }


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: OptimizerState) -> None:
    """One in-place Adam/AdamW update of ``params`` with bias correction."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericInstabilityError(f"non-finite gradient for parameter {name!r}")
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape for {name!r}")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if not state.decoupled and state.weight_decay:
                g = g + state.weight_decay * p
            m = state.exp_avg.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            v = state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if state.decoupled and state.weight_decay:
                p.mul_(1.0 - state.lr * state.weight_decay)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, Tensor], metadata: Optional[dict] = None) -> None:
    """Write named float32 tensors plus a JSON trailer."""
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<HI", CKPT_VERSION, len(tensors))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    meta = json.loads(data[off:].decode("utf-8")) if off < len(data) else {}
    return tensors, meta


def state_tensors(
    model: nn.Module, opt: Optional[OptimizerState] = None, ema: Optional[Mapping[str, Tensor]] = None
) -> dict[str, Tensor]:
    """Flatten model parameters (plus optimiser moments and EMA weights) into one named table."""
    out = {f"param/{n}": p for n, p in model.state_dict().items()}
    if opt is not None:
        for n, m in opt.exp_avg.items():
            out[f"adam_m/{n}"] = m
            out[f"adam_v/{n}"] = opt.exp_avg_sq[n]
    for n, v in (ema or {}).items():
        out[f"ema/{n}"] = v
    return out


def ema_tensors(tensors: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k[len("ema/") :]: v.clone() for k, v in tensors.items() if k.startswith("ema/")}


def ema_update(ema: dict[str, Tensor], params: Mapping[str, Tensor], decay: float) -> None:
    """In-place ``ema = decay * ema + (1 - decay) * param``."""
    with torch.no_grad():
        for n, p in params.items():
            ema[n].mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def restore_tensors(model: nn.Module, tensors: Mapping[str, Tensor], opt: Optional[OptimizerState] = None) -> None:
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    expected = model.state_dict()
    missing = set(expected) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    for name, t in params.items():
        if name not in expected:
            raise FormatError(f"checkpoint has unknown parameter {name!r}")
        if tuple(t.shape) != tuple(expected[name].shape):
            raise ShapeError(f"layer {name!r}: checkpoint shape {tuple(t.shape)} != {tuple(expected[name].shape)}")
    model.load_state_dict({k: v.to(expected[k].dtype) for k, v in params.items()})
    if opt is not None:
        opt.exp_avg = {k[len("adam_m/") :]: v.clone() for k, v in tensors.items() if k.startswith("adam_m/")}
        opt.exp_avg_sq = {k[len("adam_v/") :]: v.clone() for k, v in tensors.items() if k.startswith("adam_v/")}


def named_parameters(module: nn.Module) -> dict[str, Tensor]:
    return dict(module.named_parameters())


def iter_batches(n: int, batch_size: int, gen: torch.Generator) -> Iterable[Tensor]:
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def spec_to_dict(spec: UNetSpec) -> dict:
    return asdict(spec)
