"""Two-stage interpolator/forecaster training and cold-sampling rollout.

Networks are any callables with the :class:`~nowcast.networks.UNet` call
signature ``net(x0, cond, time_index, dropout_on=..., generator=...)``; the
time index is the lead step divided by the horizon ``h``. The forecaster is
always called with time index 1.

Interpolator endpoints are fixed by convention: index 0 returns ``x0`` and
index ``h`` returns the horizon frame, without touching the network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from nowcast.data import NormalizationSpec
from nowcast.losses import CompositeLossConfig, LossSpec, composite_loss

log = logging.getLogger(__name__)

LEAD_MINUTES = 30


class FrameworkError(RuntimeError):
    pass


class SequenceBatch:
    """A ``(B, S, C, H, W)`` batch whose frame reads are recorded.

    Frames are addressed by lead index: 0 is x0 (the last context frame) and
    ``1..h`` are targets. Each read is logged with its role (``"input"`` or
    ``"target"``) so training steps can be audited for footprint and for
    horizon exposure.
    """

    def __init__(self, frames: Tensor, context: int = 1):
        if frames.dim() != 5:
            raise ValueError(f"expected (B, S, C, H, W) frames, got {tuple(frames.shape)}")
        self._frames = frames
        self.context = context
        self.h = frames.shape[1] - context
        self.batch_size = frames.shape[0]
        self._reads: list[set[int]] = [set() for _ in range(self.batch_size)]
        self.input_leads: set[int] = set()

    def frame(self, lead, role: str = "input") -> Tensor:
        """Read lead ``lead`` (int, or per-sample ``(B,)`` tensor) for every sample."""
        if role not in ("input", "target"):
            raise ValueError(f"unknown role {role!r}")
        leads = torch.as_tensor(lead).reshape(-1)
        if leads.numel() == 1:
            leads = leads.expand(self.batch_size)
        if torch.any(leads < 0) or torch.any(leads > self.h):
            raise IndexError(f"lead index outside [0, {self.h}]")
        for b, k in enumerate(leads.tolist()):
            self._reads[b].add(k)
            if role == "input":
                self.input_leads.add(k)
        idx = leads + (self.context - 1)
        return self._frames[torch.arange(self.batch_size), idx]

    def context_frames(self, start: int, count: int, role: str = "input") -> Tensor:
        """Read ``count`` consecutive raw frames beginning at absolute index ``start``."""
        for b in range(self.batch_size):
            self._reads[b].update(range(start - self.context + 1, start - self.context + 1 + count))
        if role == "input":
            self.input_leads.update(range(start - self.context + 1, start - self.context + 1 + count))
        return self._frames[:, start:start + count]

    @property
    def length(self) -> int:
        return self._frames.shape[1]

    @property
    def frames_per_sample(self) -> int:
        return max(len(r) for r in self._reads) if self._reads else 0


@dataclass
class DyffusionState:
    interpolator: Callable
    forecastor: Callable
    h: int = 8
    interp_dropout_enabled_in_stage2: bool = True

    def __post_init__(self):
        if self.h < 2:
            raise FrameworkError("horizon h must be >= 2")


@dataclass
class EnsembleForecast:
    members: np.ndarray  # (X, h, C, H, W)
    member_seeds: list[int]
    lead_times: list[int] = field(default_factory=list)
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not self.lead_times:
            self.lead_times = [LEAD_MINUTES * (k + 1) for k in range(self.members.shape[1])]


def _dropout_rate(net) -> float | None:
    cfg = getattr(net, "cfg", None)
    return getattr(cfg, "dropout_rate", None)


def interpolate(net, x0: Tensor, xh: Tensor, n, h: int, dropout_on: bool = True,
                generator: torch.Generator | None = None) -> Tensor:
    """``I(x0, xh, i_n)`` with the endpoint conventions ``I(.., 0) = x0``, ``I(.., h) = xh``."""
    if isinstance(n, int):
        if not 0 <= n <= h:
            raise IndexError(f"interpolation index {n} outside [0, {h}]")
        if n == 0:
            return x0
        if n == h:
            return xh
        return net(x0, xh, torch.full((x0.shape[0],), n / h, dtype=x0.dtype), dropout_on=dropout_on,
                   generator=generator)
    n = torch.as_tensor(n).reshape(-1)
    if torch.any(n < 0) or torch.any(n > h):
        raise IndexError(f"interpolation index outside [0, {h}]")
    interior = (n > 0) & (n < h)
    if bool(interior.all()):
        return net(x0, xh, n.to(x0.dtype) / h, dropout_on=dropout_on, generator=generator)
    out = net(x0, xh, n.to(x0.dtype) / h, dropout_on=dropout_on, generator=generator) if bool(interior.any()) else x0
    shape = (-1,) + (1,) * (x0.dim() - 1)
    out = torch.where((n == 0).reshape(shape), x0, out)
    return torch.where((n == h).reshape(shape), xh, out)


def forecast(net, x0: Tensor, cond: Tensor, dropout_on: bool = True,
             generator: torch.Generator | None = None) -> Tensor:
    return net(x0, cond, torch.ones(x0.shape[0], dtype=x0.dtype), dropout_on=dropout_on, generator=generator)


def _cold_step(interpolator, x0, xhat_h, xhat_in, n, h, generator, dropout_on=True,
               clamp=(0.0, 1.0)):
    # both interpolator calls see the same dropout masks
    state = generator.get_state() if generator is not None else None
    ahead = interpolate(interpolator, x0, xhat_h, n + 1, h, dropout_on, generator)
    if generator is not None:
        after = generator.get_state()
        generator.set_state(state)
    here = interpolate(interpolator, x0, xhat_h, n, h, dropout_on, generator)
    if generator is not None:
        generator.set_state(after)
    update = ahead - here + xhat_in
    return update if clamp is None else update.clamp(*clamp)


def cold_sampling_update(x0: Tensor, xhat_h: Tensor, xhat_in: Tensor, n: int, state: DyffusionState,
                         generator: torch.Generator | None = None, dropout_on: bool = True,
                         clamp: tuple[float, float] | None = (0.0, 1.0)) -> Tensor:
    """One clamped cold-sampling step from lead ``n`` to lead ``n + 1``.

    ``clamp=None`` returns the pre-clamp value (used by diagnostics).
    """
    if not isinstance(n, int) or not 0 <= n <= state.h - 2:
        raise IndexError(f"cold-sampling index {n} outside [0, {state.h - 2}]")
    return _cold_step(state.interpolator, x0, xhat_h, xhat_in, n, state.h, generator, dropout_on, clamp)


def member_seeds(seed, members: int) -> list[int]:
    """Independent per-member seeds spawned from ``seed`` (an int or int sequence)."""
    children = np.random.SeedSequence(seed).spawn(members)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


@torch.no_grad()
def rollout_batch(x0: Tensor, state: DyffusionState, seeds: Sequence[int], dropout_on: bool = True) -> Tensor:
    """Roll out ``len(seeds)`` members for a ``(B, C, H, W)`` batch; returns ``(B, X, h, C, H, W)``."""
    if len(seeds) < 1:
        raise FrameworkError("need at least one ensemble member")
    h = state.h
    out = []
    for seed in seeds:
        gen = torch.Generator().manual_seed(int(seed))
        xhat_h = forecast(state.forecastor, x0, x0, dropout_on, gen)
        xhat_in = x0
        frames = []
        for n in range(h - 1):
            xhat_in = _cold_step(state.interpolator, x0, xhat_h, xhat_in, n, h, gen, dropout_on)
            frames.append(xhat_in)
            xhat_h = forecast(state.forecastor, x0, xhat_in, dropout_on, gen)
        frames.append(xhat_h)
        out.append(torch.stack(frames, dim=1))
    return torch.stack(out, dim=1)


def rollout(x0: Tensor, state: DyffusionState, members: int = 10, seed: int = 0,
            seeds: Sequence[int] | None = None, dropout_on: bool = True) -> EnsembleForecast:
    """Ensemble forecast for a single ``(C, H, W)`` initial frame."""
    if members < 1:
        raise FrameworkError("need at least one ensemble member")
    seeds = list(seeds) if seeds is not None else member_seeds(seed, members)
    arr = rollout_batch(x0[None], state, seeds, dropout_on)[0]
    return EnsembleForecast(members=arr.cpu().numpy(), member_seeds=seeds)


def ensemble_mean(f) -> np.ndarray:
    members = f.members if isinstance(f, EnsembleForecast) else np.asarray(f)
    if members.shape[0] == 0:
        raise FrameworkError("empty ensemble")
    return members.mean(axis=0)


# -- training steps ------------------------------------------------------


def train_interpolator_step(interpolator, batch: SequenceBatch, loss_fn: LossSpec,
                            generator: torch.Generator, spec: NormalizationSpec | None = None) -> Tensor:
    """Interpolator loss on one batch; only frames 0, n and h are read per sample."""
    h = batch.h
    if h < 2:
        raise FrameworkError("interpolator training needs h >= 2")
    n = torch.randint(1, h, (batch.batch_size,), generator=generator)
    x0 = batch.frame(0, "input")
    xh = batch.frame(h, "input")
    target = batch.frame(n, "target")
    pred = interpolate(interpolator, x0, xh, n, h, dropout_on=True, generator=generator)
    return loss_fn(pred, target, spec)


def train_forecastor_step(state: DyffusionState, batch: SequenceBatch, epoch: int, loss_fn: LossSpec,
                          generator: torch.Generator, spec: NormalizationSpec | None = None,
                          composite: CompositeLossConfig = CompositeLossConfig()) -> Tensor:
    """Forecaster loss with the initial-forecast term; ground truth beyond x0 is never an input."""
    rate = _dropout_rate(state.interpolator)
    if not state.interp_dropout_enabled_in_stage2 or rate == 0.0:
        raise FrameworkError("stage-2 training requires interpolator dropout to be enabled")
    h = batch.h
    if h < 2:
        raise FrameworkError("forecaster training needs h >= 2")
    x0 = batch.frame(0, "input")
    x_initial = forecast(state.forecastor, x0, x0, dropout_on=True, generator=generator)
    n = torch.randint(1, h, (batch.batch_size,), generator=generator)
    with torch.no_grad():
        x_in = interpolate(state.interpolator, x0, x_initial.detach(), n, h, dropout_on=True, generator=generator)
    xhat_h = forecast(state.forecastor, x0, x_in, dropout_on=True, generator=generator)
    x_next = _cold_step(state.interpolator, x0, xhat_h, x_in, n, h, generator)
    target_h = batch.frame(h, "target")
    target_next = batch.frame(n + 1, "target")
    return composite_loss(
        loss_fn(x_initial, target_h, spec),
        loss_fn(xhat_h, target_h, spec),
        loss_fn(x_next, target_next, spec),
        epoch,
        composite,
    )


# -- training loops ------------------------------------------------------


def iterate_batches(data: np.ndarray, batch_size: int, epoch: int, seed: int):
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = np.sort(order[start:start + batch_size])
        yield torch.from_numpy(np.ascontiguousarray(data[idx]))


def fit(step_fn, params, data: np.ndarray, *, epochs: int, batch_size: int, lr: float, seed: int,
        start_epoch: int = 0, optimizer_state: dict | None = None, on_epoch_end=None):
    """Generic seeded Adam loop; ``step_fn(frames, epoch, generator)`` returns a loss tensor."""
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        gen = torch.Generator().manual_seed(seed * 100_003 + epoch)
        total, count = 0.0, 0
        for frames in iterate_batches(data, batch_size, epoch, seed):
            opt.zero_grad(set_to_none=True)
            loss = step_fn(frames, epoch, gen)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * frames.shape[0]
            count += frames.shape[0]
        history.append(total / max(count, 1))
        log.info("epoch %d loss %.6f", epoch, history[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch, history, opt)
    return history, opt


def fit_interpolator(interpolator, data: np.ndarray, *, context: int, loss_fn: LossSpec,
                     spec: NormalizationSpec | None = None, **kw):
    def step(frames, epoch, gen):
        return train_interpolator_step(interpolator, SequenceBatch(frames, context), loss_fn, gen, spec)

    return fit(step, interpolator.parameters(), data, **kw)


def fit_forecastor(state: DyffusionState, data: np.ndarray, *, context: int, loss_fn: LossSpec,
                   spec: NormalizationSpec | None = None,
                   composite: CompositeLossConfig = CompositeLossConfig(), **kw):
    interp = state.interpolator
    if hasattr(interp, "requires_grad_"):
        interp.requires_grad_(False)

    def step(frames, epoch, gen):
        return train_forecastor_step(state, SequenceBatch(frames, context), epoch, loss_fn, gen, spec, composite)

    return fit(step, state.forecastor.parameters(), data, **kw)
