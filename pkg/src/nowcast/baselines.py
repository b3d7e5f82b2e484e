"""Persistence and autoregressive ConvLSTM comparators.

STEPS is not implemented here. :class:`EnsembleNowcaster` is the hook for an
external implementation (e.g. pysteps): it receives the context frames in
mm/h and returns an ensemble in mm/h, which :func:`external_ensemble` maps
back into model space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
from torch import Tensor

from nowcast.data import NormalizationSpec, forward_transform, inverse_transform
from nowcast.dyffusion import EnsembleForecast, SequenceBatch, fit
from nowcast.losses import LossSpec
from nowcast.networks import ConvLSTM

MODEL_TAGS = ("convlstm_bce", "convlstm_lcb", "persistence")


@dataclass
class BaselineForecast:
    frames: np.ndarray  # (h, C, H, W)
    model_tag: str
    wall_time_s: float = 0.0

    def __post_init__(self):
        if self.model_tag not in MODEL_TAGS:
            raise ValueError(f"unknown model tag {self.model_tag!r}")


def persistence_forecast(x0, h: int = 8) -> BaselineForecast:
    x0 = np.asarray(x0)
    return BaselineForecast(frames=np.repeat(x0[None], h, axis=0), model_tag="persistence")


def train_convlstm_step(model: ConvLSTM, batch: SequenceBatch, loss_fn: LossSpec,
                        generator: torch.Generator, spec: NormalizationSpec | None = None) -> Tensor:
    """One-step supervision at a random window offset ``k``: frames k..k+T-1 predict k+T."""
    T = model.cfg.context_frames
    S = batch.length
    if S < T + 1:
        raise ValueError(f"ConvLSTM training needs >= {T + 1} frames per sequence, got {S}")
    k = int(torch.randint(0, S - T, (1,), generator=generator))
    context = batch.context_frames(k, T)
    target = batch.context_frames(k + T, 1, role="target")[:, 0]
    pred = model(context, dropout_on=True, generator=generator)
    return loss_fn(pred, target, spec)


def fit_convlstm(model: ConvLSTM, data: np.ndarray, *, context: int, loss_fn: LossSpec,
                 spec: NormalizationSpec | None = None, **kw):
    def step(frames, epoch, gen):
        return train_convlstm_step(model, SequenceBatch(frames, context), loss_fn, gen, spec)

    return fit(step, model.parameters(), data, **kw)


@torch.no_grad()
def convlstm_rollout_batch(model: ConvLSTM, context: Tensor, h: int = 8,
                           hook: Callable[[int, Tensor], Tensor] | None = None) -> Tensor:
    """``(B, T, C, H, W)`` context to ``(B, h, C, H, W)``; dropout is off.

    ``hook(k, frame)`` may replace the k-th prediction before it is fed back.
    """
    T = model.cfg.context_frames
    if context.shape[1] != T:
        raise ValueError(f"expected {T} context frames, got {context.shape[1]}")
    window = context
    out = []
    for k in range(h):
        nxt = model(window, dropout_on=False)
        if hook is not None:
            nxt = hook(k, nxt)
        out.append(nxt)
        window = torch.cat([window[:, 1:], nxt[:, None]], dim=1)
    return torch.stack(out, dim=1)


def convlstm_rollout(model: ConvLSTM, context: Tensor, h: int = 8, model_tag: str = "convlstm_lcb",
                     hook: Callable[[int, Tensor], Tensor] | None = None) -> BaselineForecast:
    if context.dim() != 4:
        raise ValueError("convlstm_rollout expects a (T, C, H, W) context")
    frames = convlstm_rollout_batch(model, context[None], h, hook)[0]
    return BaselineForecast(frames=frames.numpy(), model_tag=model_tag)


class EnsembleNowcaster(Protocol):
    def __call__(self, context_mmh: np.ndarray, h: int, members: int, seed: int) -> np.ndarray:
        """``(T, H, W)`` rain rates to ``(members, h, H, W)`` rain rates."""


def external_ensemble(nowcaster: EnsembleNowcaster, context: np.ndarray, spec: NormalizationSpec,
                      h: int = 8, members: int = 10, seed: int = 0) -> EnsembleForecast:
    """Run an external mm/h nowcaster on normalized ``(T, C, H, W)`` context frames."""
    rates = inverse_transform(np.asarray(context)[:, 0], spec)
    out = np.asarray(nowcaster(rates, h, members, seed), dtype=np.float64)
    if out.shape != (members, h) + rates.shape[1:]:
        raise ValueError(f"external nowcaster returned shape {out.shape}")
    normalized = forward_transform(np.nan_to_num(np.maximum(out, 0.0)), spec)[:, :, None]
    return EnsembleForecast(members=normalized.astype(np.float32), member_seeds=[seed] * members)
