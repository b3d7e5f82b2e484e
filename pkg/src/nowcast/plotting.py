"""Panel figures (rows = truth + models, columns = x0 + hourly leads) and lead-time curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import Normalize  # noqa: E402

from nowcast.data import RainSequence, inverse_transform  # noqa: E402

LEAD_MINUTES = 30
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def hourly_leads(h: int) -> list[int]:
    """Lead indices (0-based into the target frames) that fall on whole hours."""
    return [k for k in range(h) if (LEAD_MINUTES * (k + 1)) % 60 == 0]


def panel_figure(truth: RainSequence, forecasts: dict, spec, vmax: float | None = None):
    """Build the panel grid; ``forecasts`` maps tag -> (manifest, (h, C, H, W) mean frames)."""
    h = truth.h
    for tag, (meta, frames) in forecasts.items():
        if frames.shape[0] != h or int(meta.get("h", h)) != h:
            raise ValueError(f"{tag}: forecast has {frames.shape[0]} leads, truth has {h}")
        starts = meta.get("start_times")
        if starts and truth.start_time.isoformat() not in starts:
            raise ValueError(f"{tag}: forecast start times do not include {truth.start_time.isoformat()}")
    leads = hourly_leads(h)
    rows = [("truth", truth.targets)] + [(tag, frames) for tag, (_, frames) in forecasts.items()]
    x0 = inverse_transform(truth.x0[0], spec)
    panels = [[x0] + [inverse_transform(np.clip(fr[k, 0], 0, 1), spec) for k in leads] for _, fr in rows]
    if vmax is None:
        vmax = max(float(np.max(p)) for row in panels for p in row) or 1.0
    norm = Normalize(vmin=0.0, vmax=vmax)
    fig, axes = plt.subplots(len(rows), len(leads) + 1, figsize=(2.2 * (len(leads) + 1), 2.2 * len(rows)),
                             squeeze=False)
    im = None
    for r, ((tag, _), row) in enumerate(zip(rows, panels)):
        for c, img in enumerate(row):
            ax = axes[r, c]
            im = ax.imshow(img, cmap="viridis", norm=norm, origin="lower")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title("t0" if c == 0 else f"t+{LEAD_MINUTES * (leads[c - 1] + 1)} min", fontsize=9)
            if c == 0:
                ax.set_ylabel(tag, fontsize=9)
    fig.colorbar(im, ax=axes, shrink=0.8, label="rain rate [mm/h]")
    return fig, axes


def plot_panels(truth: RainSequence, forecasts: dict, spec, path) -> Path:
    fig, _ = panel_figure(truth, forecasts, spec)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_degradation(reports: dict, path, metrics=("mse", "lpips", "csi_2")) -> Path:
    """Per-lead curves from ``metrics_<tag>.json`` dictionaries."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2), squeeze=False)
    for ax, name in zip(axes[0], metrics):
        for tag, rep in reports.items():
            leads = sorted(int(k) for k in rep["per_lead"])
            vals = [rep["per_lead"][str(k)][name] for k in leads]
            vals = [np.nan if v is None else v for v in vals]
            ax.plot(leads, vals, marker="o", label=tag)
        ax.set_xlabel("lead time [min]")
        ax.set_title(name)
    axes[0, 0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
