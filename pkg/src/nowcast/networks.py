"""Time-conditioned U-Net and ConvLSTM backbones with Monte Carlo dropout.

Dropout masks are drawn from an explicit ``torch.Generator`` when one is
passed, so a stochastic forward pass is reproducible from its RNG stream.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass(frozen=True)
class UNetConfig:
    in_frames: int = 2
    channels: int = 1
    base_channels: int = 32
    depth: int = 3
    dropout_rate: float = 0.2
    time_embedding_dim: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.base_channels % 8:
            raise ValueError("base_channels must be a multiple of 8 (group norm)")


@dataclass(frozen=True)
class ConvLSTMConfig:
    layers: int = 2
    hidden_channels: int = 128
    kernel: int = 5
    pixel_dropout: float = 0.15
    context_frames: int = 4
    channels: int = 1

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if not 0.0 <= self.pixel_dropout < 1.0:
            raise ValueError("pixel_dropout must lie in [0, 1)")


def mc_dropout(x: Tensor, p: float, active: bool, generator: torch.Generator | None = None) -> Tensor:
    if not active or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def sinusoidal_embedding(t: Tensor, dim: int, max_period: float = 10_000.0) -> Tensor:
    # t in [0, 1]; scaled so neighbouring lead steps get well-separated codes
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = (1000.0 * t.float())[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, dropout):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin) if cin % 8 == 0 else nn.Identity()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.dropout = dropout

    def forward(self, x, emb, dropout_on=False, generator=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = F.silu(self.norm2(h))
        h = mc_dropout(h, self.dropout, dropout_on, generator)
        return self.conv2(h) + self.skip(x)


class UNet(nn.Module):
    """Shared backbone for the interpolator and the forecaster.

    ``forward(x0, cond, time_index)`` maps two ``(B, C, H, W)`` frames and a
    per-sample time index in ``[0, 1]`` to one frame in ``(0, 1)``.
    """

    def __init__(self, cfg: UNetConfig = UNetConfig()):
        super().__init__()
        self.cfg = cfg
        emb_dim = cfg.time_embedding_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim * 2), nn.SiLU(), nn.Linear(emb_dim * 2, emb_dim))
        widths = [cfg.base_channels * 2 ** k for k in range(cfg.depth + 1)]
        self.stem = nn.Conv2d(cfg.in_frames * cfg.channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for k in range(cfg.depth):
            self.down_blocks.append(ResBlock(widths[k], widths[k], emb_dim, cfg.dropout_rate))
            self.downsample.append(nn.Conv2d(widths[k], widths[k + 1], 3, stride=2, padding=1))
        self.mid = ResBlock(widths[-1], widths[-1], emb_dim, cfg.dropout_rate)
        self.upsample = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for k in reversed(range(cfg.depth)):
            self.upsample.append(nn.Conv2d(widths[k + 1], widths[k], 3, padding=1))
            self.up_blocks.append(ResBlock(2 * widths[k], widths[k], emb_dim, cfg.dropout_rate))
        self.head = nn.Sequential(nn.GroupNorm(8, widths[0]), nn.SiLU(), nn.Conv2d(widths[0], cfg.channels, 3, padding=1))

    def forward(self, x0: Tensor, cond: Tensor, time_index, dropout_on: bool = False,
                generator: torch.Generator | None = None) -> Tensor:
        if x0.shape != cond.shape:
            raise ValueError(f"x0 and cond shapes differ: {tuple(x0.shape)} vs {tuple(cond.shape)}")
        H, W = x0.shape[-2:]
        if H % 2 ** self.cfg.depth or W % 2 ** self.cfg.depth:
            raise ValueError(f"spatial dims {H}x{W} not divisible by 2**{self.cfg.depth}")
        t = torch.as_tensor(time_index, dtype=x0.dtype, device=x0.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x0.shape[0])
        emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_embedding_dim).to(x0.dtype))
        h = self.stem(torch.cat([x0, cond], dim=1))
        skips = []
        for block, down in zip(self.down_blocks, self.downsample):
            h = block(h, emb, dropout_on, generator)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb, dropout_on, generator)
        for up, block in zip(self.upsample, self.up_blocks):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), emb, dropout_on, generator)
        return torch.sigmoid(self.head(h))


class ConvLSTMCell(nn.Module):
    def __init__(self, cin, hidden, kernel):
        super().__init__()
        self.hidden = hidden
        self.conv = nn.Conv2d(cin + hidden, 4 * hidden, kernel, padding=kernel // 2)

    def forward(self, x, state):
        h, c = state
        i, f, g, o = torch.chunk(self.conv(torch.cat([x, h], dim=1)), 4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class ConvLSTM(nn.Module):
    """Stacked ConvLSTM that encodes a context window and emits the next frame."""

    def __init__(self, cfg: ConvLSTMConfig = ConvLSTMConfig()):
        super().__init__()
        self.cfg = cfg
        cins = [cfg.channels] + [cfg.hidden_channels] * (cfg.layers - 1)
        self.cells = nn.ModuleList(ConvLSTMCell(c, cfg.hidden_channels, cfg.kernel) for c in cins)
        self.head = nn.Conv2d(cfg.hidden_channels, cfg.channels, 1)

    def forward(self, context: Tensor, dropout_on: bool = False,
                generator: torch.Generator | None = None) -> Tensor:
        """``context`` is ``(B, T, C, H, W)``; returns ``(B, C, H, W)``."""
        if context.dim() != 5 or context.shape[1] != self.cfg.context_frames:
            raise ValueError(f"expected (B, {self.cfg.context_frames}, C, H, W) context, got {tuple(context.shape)}")
        B, T, C, H, W = context.shape
        states = [(context.new_zeros(B, self.cfg.hidden_channels, H, W),) * 2 for _ in self.cells]
        for t in range(T):
            x = context[:, t]
            for k, cell in enumerate(self.cells):
                h, c = cell(x, states[k])
                states[k] = (h, c)
                x = mc_dropout(h, self.cfg.pixel_dropout, dropout_on, generator)
        return torch.sigmoid(self.head(x))


def convlstm_next(model: ConvLSTM, context: Tensor, dropout_on: bool = False,
                  generator: torch.Generator | None = None) -> Tensor:
    """Single-sample convenience: ``(T, C, H, W)`` context to a ``(C, H, W)`` frame."""
    if context.dim() != 4:
        raise ValueError("convlstm_next expects a (T, C, H, W) context")
    return model(context[None], dropout_on, generator)[0]


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- checkpoints ---------------------------------------------------------


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: nn.Module, *, kind: str, cfg_hash: str, spec_fingerprint: str,
                    epoch: int, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": kind,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "config_hash": cfg_hash,
        "spec_fingerprint": spec_fingerprint,
        "epoch": epoch,
    }
    payload.update(extra or {})
    torch.save(payload, path)
    return path


def load_checkpoint(path, *, kind: str | None = None, cfg_hash: str | None = None,
                    spec_fingerprint: str | None = None):
    """Rebuild the network stored at ``path``; mismatched hashes are hard errors."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"{path} holds a {payload['kind']!r} model, expected {kind!r}")
    if cfg_hash is not None and payload["config_hash"] != cfg_hash:
        raise CheckpointError(f"{path}: config hash {payload['config_hash']} != {cfg_hash}")
    if spec_fingerprint is not None and payload["spec_fingerprint"] != spec_fingerprint:
        raise CheckpointError(f"{path}: normalization fingerprint {payload['spec_fingerprint']} != {spec_fingerprint}")
    if payload["kind"] == "convlstm":
        model = ConvLSTM(ConvLSTMConfig(**payload["model_config"]))
    else:
        model = UNet(UNetConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload
