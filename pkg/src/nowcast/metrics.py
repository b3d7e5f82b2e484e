"""Forecast verification scores and model-comparison reports.

MSE, CRPS, spread-skill and the perceptual score are computed in normalized
space; CSI is computed on rain rates in mm/h. Per-pixel work runs through
:mod:`nowcast.kernels`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from nowcast import kernels
from nowcast.data import NormalizationSpec, RainSequence, inverse_transform
from nowcast.losses import PerceptualExtractor, perceptual_distance

CSI_THRESHOLDS = (2.0, 10.0, 18.0)
METRIC_FIELDS = ("mse", "lpips", "csi_2", "csi_10", "csi_18", "crps", "ssr")
TABLE_HEADER = ("Model", "MSE", "LPIPS", "CSI_2", "CSI_10", "CSI_18", "CRPS", "SSR", "Time [s]")
DASH = "−"


@dataclass(frozen=True)
class ContingencyCounts:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other: "ContingencyCounts") -> "ContingencyCounts":
        return ContingencyCounts(self.hits + other.hits, self.misses + other.misses,
                                 self.false_alarms + other.false_alarms,
                                 self.correct_negatives + other.correct_negatives)

    @property
    def csi(self) -> float:
        denom = self.hits + self.misses + self.false_alarms
        return self.hits / denom if denom else float("nan")


def _flat(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1))


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def mse(pred, target) -> float:
    _check_shapes(pred, target)
    d = _flat(pred) - _flat(target)
    return float(np.mean(d * d))


def contingency_counts(pred, target, threshold: float, spec: NormalizationSpec) -> ContingencyCounts:
    """Counts after binarizing both normalized inputs at ``threshold`` mm/h."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    _check_shapes(pred, target)
    p = _flat(inverse_transform(pred, spec))
    t = _flat(inverse_transform(target, spec))
    return ContingencyCounts(*kernels.contingency(p, t, float(threshold)))


def csi(pred, target, threshold: float, spec: NormalizationSpec) -> float:
    """Critical success index; NaN when no event is forecast or observed."""
    return contingency_counts(pred, target, threshold, spec).csi


def _members_2d(members, obs):
    members = np.asarray(members, dtype=np.float64)
    if members.shape[0] == 0:
        raise ValueError("empty ensemble")
    if members.shape[1:] != np.shape(obs):
        raise ValueError(f"member shape {members.shape[1:]} != obs shape {np.shape(obs)}")
    return np.ascontiguousarray(members.reshape(members.shape[0], -1)), _flat(obs)


def crps_ensemble(members, obs, fair: bool = False) -> float:
    m, o = _members_2d(members, obs)
    return kernels.crps_sum(m, o, fair) / o.size


def ssr(members, obs) -> float:
    """Mean unbiased member std over RMSE of the ensemble mean.

    0 for a single member or zero spread; NaN when spread > 0 but RMSE is 0.
    """
    m, o = _members_2d(members, obs)
    spread, sq = kernels.spread_error_sums(m, o)
    return _ssr_from_sums(spread, sq, o.size, m.shape[0])


def _ssr_from_sums(spread_sum, sq_sum, n_pix, n_members) -> float:
    if n_members < 2 or spread_sum == 0.0:
        return 0.0
    rmse = math.sqrt(sq_sum / n_pix)
    if rmse == 0.0:
        return float("nan")
    return (spread_sum / n_pix) / rmse


def perceptual_score(pred, target, extractor: PerceptualExtractor | None = None) -> float:
    """Perceptual distance of ``(..., C, H, W)`` frames, averaged over leading dims."""
    p = torch.as_tensor(np.asarray(pred, dtype=np.float32))
    t = torch.as_tensor(np.asarray(target, dtype=np.float32))
    with torch.no_grad():
        return float(perceptual_distance(p, t, extractor))


# -- reports -------------------------------------------------------------


@dataclass
class MetricReport:
    per_lead: dict[int, dict[str, float | None]]
    averaged: dict[str, float | None]
    sample_count: int
    wall_time_s: float = 0.0
    excluded: dict[str, list[int]] = field(default_factory=dict)

    def scores_dict(self) -> dict:
        return {
            "per_lead": {str(k): _jsonable(v) for k, v in self.per_lead.items()},
            "averaged": _jsonable(self.averaged),
            "sample_count": self.sample_count,
            "excluded": self.excluded,
        }

    def to_json(self, include_time: bool = False) -> str:
        d = self.scores_dict()
        if include_time:
            d["wall_time_s"] = self.wall_time_s
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = None if v is None or (isinstance(v, float) and math.isnan(v)) else v
    return out


class MetricAccumulator:
    """Pools scores over samples.

    Totals are summed with :func:`math.fsum` so the report does not depend on
    sample order. The report's ``wall_time_s`` is the mean per forecast.
    """

    def __init__(self, spec: NormalizationSpec, thresholds: Sequence[float] = CSI_THRESHOLDS,
                 extractor: PerceptualExtractor | None = None, fair_crps: bool = False):
        self.spec = spec
        self.thresholds = tuple(thresholds)
        self.extractor = extractor
        self.fair_crps = fair_crps
        self.probabilistic: bool | None = None
        self.h: int | None = None
        self.n_members = 0
        self.samples = 0
        self.wall_time_s = 0.0
        self._parts: dict = {}

    def _part(self, lead, key):
        return self._parts.setdefault((lead, key), [])

    def add(self, forecast, truth: RainSequence | np.ndarray, wall_time_s: float = 0.0):
        """Score one forecast (ensemble ``(X, h, C, H, W)`` or deterministic ``(h, C, H, W)``)."""
        target = truth.targets if isinstance(truth, RainSequence) else np.asarray(truth)
        if hasattr(forecast, "members"):
            members = np.asarray(forecast.members, dtype=np.float64)
            probabilistic = True
        else:
            members = np.asarray(getattr(forecast, "frames", forecast), dtype=np.float64)[None]
            probabilistic = False
        if members.shape[1] != target.shape[0]:
            raise ValueError(f"lead-time mismatch: forecast has {members.shape[1]} leads, truth {target.shape[0]}")
        if members.shape[2:] != target.shape[1:]:
            raise ValueError(f"frame shape mismatch: {members.shape[2:]} vs {target.shape[1:]}")
        if self.probabilistic is None:
            self.probabilistic, self.h, self.n_members = probabilistic, target.shape[0], members.shape[0]
        elif self.probabilistic != probabilistic or self.h != target.shape[0]:
            raise ValueError("cannot mix forecast kinds or horizons in one report")
        mean = members.mean(axis=0)
        lp = _per_lead_perceptual(mean, target, self.extractor)
        for k in range(self.h):
            obs = _flat(target[k])
            m_k = _flat(mean[k])
            d = m_k - obs
            self._part(k, "sq").append(float(np.dot(d, d)))
            self._part(k, "n").append(obs.size)
            self._part(k, "lpips").append(float(lp[k]))
            for thr in self.thresholds:
                self._part(k, ("cc", thr)).append(contingency_counts(mean[k], target[k], thr, self.spec))
            if probabilistic:
                ens = np.ascontiguousarray(members[:, k].reshape(members.shape[0], -1))
                self._part(k, "crps").append(kernels.crps_sum(ens, obs, self.fair_crps))
                spread, _ = kernels.spread_error_sums(ens, obs)
                self._part(k, "spread").append(spread)
        self.samples += 1
        self.wall_time_s += wall_time_s

    def report(self) -> MetricReport:
        if not self.samples:
            raise ValueError("no samples accumulated")
        per_lead = {}
        excluded: dict[str, list[int]] = {}
        for k in range(self.h):
            lead = 30 * (k + 1)
            n_pix = sum(self._part(k, "n"))
            sq = math.fsum(self._part(k, "sq"))
            row = {"mse": sq / n_pix, "lpips": math.fsum(self._part(k, "lpips")) / self.samples}
            for thr in self.thresholds:
                cc = ContingencyCounts(0, 0, 0, 0)
                for c in self._part(k, ("cc", thr)):
                    cc = cc + c
                name = f"csi_{_thr_name(thr)}"
                row[name] = cc.csi
                if math.isnan(cc.csi):
                    excluded.setdefault(name, []).append(lead)
            if self.probabilistic:
                row["crps"] = math.fsum(self._part(k, "crps")) / n_pix
                row["ssr"] = _ssr_from_sums(math.fsum(self._part(k, "spread")), sq, n_pix, self.n_members)
                if math.isnan(row["ssr"]):
                    excluded.setdefault("ssr", []).append(lead)
            else:
                row["crps"] = None
                row["ssr"] = None
            per_lead[lead] = row
        averaged = {}
        for name in per_lead[30]:
            vals = [r[name] for r in per_lead.values()]
            if vals[0] is None:
                averaged[name] = None
                continue
            kept = [v for v in vals if not math.isnan(v)]
            averaged[name] = math.fsum(kept) / len(kept) if kept else float("nan")
        return MetricReport(per_lead=per_lead, averaged=averaged, sample_count=self.samples,
                            wall_time_s=self.wall_time_s / self.samples, excluded=excluded)


def _thr_name(thr: float) -> str:
    return str(int(thr)) if float(thr).is_integer() else str(thr)


def _per_lead_perceptual(mean: np.ndarray, target: np.ndarray, extractor) -> np.ndarray:
    p = torch.as_tensor(mean.astype(np.float32))
    t = torch.as_tensor(np.array(target, dtype=np.float32))
    with torch.no_grad():
        return perceptual_distance(p, t, extractor, reduce=False).double().numpy()


def evaluate_rollout(forecast, truth: RainSequence, spec: NormalizationSpec,
                     thresholds: Sequence[float] = CSI_THRESHOLDS,
                     extractor: PerceptualExtractor | None = None) -> MetricReport:
    acc = MetricAccumulator(spec, thresholds, extractor)
    acc.add(forecast, truth, getattr(forecast, "wall_time_s", 0.0))
    return acc.report()


def _fmt(v, digits=6) -> str:
    if v is None:
        return DASH
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.{digits}f}"


def table_rows(reports: dict[str, MetricReport], include_time: bool = True) -> list[list[str]]:
    rows = []
    for name, rep in reports.items():
        a = rep.averaged
        row = [name] + [_fmt(a.get(f)) for f in METRIC_FIELDS]
        row.append(_fmt(rep.wall_time_s, 2) if include_time else DASH)
        rows.append(row)
    return rows


def render_csv(reports: dict[str, MetricReport], include_time: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    w.writerows(table_rows(reports, include_time))
    return buf.getvalue()


def write_reports(out_dir, reports: dict[str, MetricReport], include_time: bool = True) -> dict[str, Path]:
    """Write ``table.csv`` plus one ``metrics_<model>.json`` per model."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"table": out_dir / "table.csv"}
    paths["table"].write_text(render_csv(reports, include_time), encoding="utf-8")
    for name, rep in reports.items():
        p = out_dir / f"metrics_{name}.json"
        p.write_text(rep.to_json())
        paths[name] = p
    return paths
