"""Class-balanced MSE+MAE, perceptual distance, and their mixtures.

All losses take normalized tensors in ``[0, 1]`` of any matching shape whose
last two dimensions are ``(H, W)``; reductions are means over every element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from nowcast.data import NormalizationSpec

RAIN_THRESHOLDS = (0.5, 2.0, 6.0, 10.0, 18.0, 30.0)
RAIN_WEIGHTS = (1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0)


@dataclass(frozen=True)
class ClassWeightTable:
    thresholds: tuple[float, ...] = RAIN_THRESHOLDS
    weights: tuple[float, ...] = RAIN_WEIGHTS

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != len(self.thresholds) + 1:
            raise ValueError("ClassWeightTable needs exactly one more weight than thresholds")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly ascending")
        if any(b <= a for a, b in zip(self.weights, self.weights[1:])):
            raise ValueError("weights must be strictly increasing")


@dataclass(frozen=True)
class LcbConfig:
    alpha: float = 0.6
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")


@dataclass(frozen=True)
class CompositeLossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    alpha_decay_epochs: int = 20

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.alpha_decay_epochs < 1:
            raise ValueError("alpha_decay_epochs must be positive")


def class_weight(rate, table: ClassWeightTable = ClassWeightTable()):
    """Weight of a rain rate in mm/h; band edges belong to the lower band.

    Accepts a scalar, numpy array or tensor and returns the same kind.
    """
    if isinstance(rate, Tensor):
        if torch.any(rate < 0):
            raise ValueError("rain rate must be non-negative")
        edges = torch.tensor(table.thresholds, dtype=rate.dtype, device=rate.device)
        weights = torch.tensor(table.weights, dtype=rate.dtype, device=rate.device)
        return weights[torch.bucketize(rate, edges, right=False)]
    arr = np.asarray(rate, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("rain rate must be non-negative")
    out = np.asarray(table.weights)[np.searchsorted(table.thresholds, arr, side="left")]
    return float(out) if out.ndim == 0 else out


def _physical(target: Tensor, spec: NormalizationSpec) -> Tensor:
    y = target.clamp(0.0, 1.0)
    return torch.clamp(torch.exp(y * (spec.minmax_hi - spec.minmax_lo) + spec.minmax_lo) - spec.log_offset, min=0.0)


def target_weights(target: Tensor, spec: NormalizationSpec,
                   table: ClassWeightTable = ClassWeightTable()) -> Tensor:
    with torch.no_grad():
        return class_weight(_physical(target.detach(), spec), table)


def cb_loss(pred: Tensor, target: Tensor, cfg: LcbConfig = LcbConfig(),
            spec: NormalizationSpec | None = None,
            table: ClassWeightTable = ClassWeightTable()) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    spec = spec or NormalizationSpec.analytic()
    w = target_weights(target, spec, table)
    diff = pred - target
    return (w * (diff * diff + cfg.beta * diff.abs())).mean()


class PerceptualExtractor(nn.Module):
    """Frozen multi-scale conv features for an LPIPS-style distance.

    The default weights are drawn from a seeded generator, so the distance is
    deterministic across processes. A pretrained backbone can be dropped in by
    subclassing and overriding :meth:`features`.
    """

    def __init__(self, widths=(16, 32, 64), in_channels: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.in_channels = in_channels
        chans = (in_channels,) + tuple(widths)
        for k, (cin, cout) in enumerate(zip(chans, chans[1:])):
            bound = 1.0 / math.sqrt(cin * 9)
            w = (torch.rand(cout, cin, 3, 3, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            b = (torch.rand(cout, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            self.register_buffer(f"weight{k}", w.float())
            self.register_buffer(f"bias{k}", b.float())
        self.n_layers = len(widths)

    def features(self, x: Tensor) -> list[Tensor]:
        # (..., C, H, W) with C == 1 replicated to the expected channel count
        lead = x.shape[:-3]
        x = x.reshape(-1, *x.shape[-3:])
        if x.shape[1] == 1 and self.in_channels != 1:
            x = x.expand(-1, self.in_channels, -1, -1)
        h = 2.0 * x - 1.0
        feats = []
        for k in range(self.n_layers):
            w = getattr(self, f"weight{k}").to(h.dtype)
            b = getattr(self, f"bias{k}").to(h.dtype)
            h = torch.tanh(F.conv2d(h, w, b, stride=2, padding=1))
            feats.append(h.reshape(*lead, *h.shape[1:]) if lead else h)
        return feats

    def forward(self, pred: Tensor, target: Tensor) -> Tensor:
        return perceptual_distance(pred, target, self)


def _unit_normalize(f: Tensor, eps: float = 1e-10) -> Tensor:
    return f / (torch.sqrt((f * f).sum(dim=-3, keepdim=True)) + eps)


_DEFAULT_EXTRACTOR: PerceptualExtractor | None = None


def default_extractor() -> PerceptualExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = PerceptualExtractor().eval().requires_grad_(False)
    return _DEFAULT_EXTRACTOR


def perceptual_distance(pred: Tensor, target: Tensor, extractor: PerceptualExtractor | None = None,
                        reduce: bool = True) -> Tensor:
    """Mean over layers of the spatially averaged squared unit-feature distance.

    Inputs are ``(..., C, H, W)``. With ``reduce=False`` one value per leading
    index is returned instead of the overall mean.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 2:
        pred, target = pred[None], target[None]
    if pred.dim() < 3:
        raise ValueError("perceptual_distance expects (..., C, H, W) or (H, W) inputs")
    extractor = extractor or default_extractor()
    fp, ft = extractor.features(pred), extractor.features(target)
    per_layer = []
    for a, b in zip(fp, ft):
        d = _unit_normalize(a) - _unit_normalize(b)
        per_layer.append((d * d).sum(dim=-3).mean(dim=(-2, -1)))
    dist = torch.stack(per_layer).mean(dim=0)
    return dist.mean() if reduce else dist


def lcb_loss(pred: Tensor, target: Tensor, cfg: LcbConfig = LcbConfig(),
             spec: NormalizationSpec | None = None, table: ClassWeightTable = ClassWeightTable(),
             extractor: PerceptualExtractor | None = None) -> Tensor:
    """``(1 - alpha) * perceptual + alpha * cb_loss``; degenerate mixes skip the unused term."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if cfg.alpha == 1.0:
        return cb_loss(pred, target, cfg, spec, table)
    if cfg.alpha == 0.0:
        return perceptual_distance(pred, target, extractor)
    return (1.0 - cfg.alpha) * perceptual_distance(pred, target, extractor) + cfg.alpha * cb_loss(pred, target, cfg, spec, table)


def alpha_schedule(epoch: int, cfg: CompositeLossConfig = CompositeLossConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(0.0, 1.0 - epoch / cfg.alpha_decay_epochs)


def composite_loss(l_initial, l_forecast, l_onestep, epoch: int,
                   cfg: CompositeLossConfig = CompositeLossConfig()):
    a = alpha_schedule(epoch, cfg)
    if a == 1.0:
        return l_initial
    if a == 0.0:
        return cfg.lambda1 * l_forecast + cfg.lambda2 * l_onestep
    return a * l_initial + (1.0 - a) * (cfg.lambda1 * l_forecast + cfg.lambda2 * l_onestep)


@dataclass(frozen=True)
class LossSpec:
    """Picks the training objective: ``lcb``, ``l1`` or ``bce``."""

    kind: str = "lcb"
    lcb: LcbConfig = field(default_factory=LcbConfig)
    table: ClassWeightTable = field(default_factory=ClassWeightTable)

    def __call__(self, pred: Tensor, target: Tensor, spec: NormalizationSpec | None = None) -> Tensor:
        if self.kind == "lcb":
            return lcb_loss(pred, target, self.lcb, spec, self.table)
        if self.kind == "l1":
            return F.l1_loss(pred, target)
        if self.kind == "bce":
            return F.binary_cross_entropy(pred, target)
        raise ValueError(f"unknown loss kind {self.kind!r}")
