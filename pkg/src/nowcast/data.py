"""IMERG ingestion, [0, 1] preprocessing, sequence windowing and synthetic rain.

Frames are stored as ``(S, C, H, W)`` float32 arrays in normalized space; a
dataset is the stack ``(N, S, C, H, W)`` together with the
:class:`NormalizationSpec` that produced it.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import h5py
import numpy as np

CADENCE = dt.timedelta(minutes=30)
GRID_SIZE = 128

IMERG_PRECIP_PATH = "Grid/precipitation"
IMERG_LAT_PATH = "Grid/lat"
IMERG_LON_PATH = "Grid/lon"
IMERG_TIME_PATH = "Grid/time"
IMERG_FILL_VALUE = -9999.9

_EPOCH = dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)
_IMERG_NAME_TIME = re.compile(r"(\d{8})-S(\d{6})")


class DataError(ValueError):
    """Raised for malformed granules, bad crops or unusable frame lists."""


@dataclass
class RainField:
    values: np.ndarray
    timestamp: dt.datetime
    bbox: tuple[float, float, float, float] = (float("nan"),) * 4  # lat_min, lat_max, lon_min, lon_max

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DataError(f"RainField must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("RainField contains non-finite values")
        if np.any(self.values < 0):
            raise DataError("RainField contains negative rain rates")


@dataclass(frozen=True)
class NormalizationSpec:
    """Clip to ``[0, clip_max]``, take ``log(log_offset + x)``, then min-max scale."""

    clip_max: float = 100.0
    log_offset: float = 1.0
    minmax_lo: float = 0.0
    minmax_hi: float = math.log(101.0)

    def __post_init__(self):
        if not self.minmax_hi > self.minmax_lo:
            raise DataError("degenerate NormalizationSpec: minmax_hi must exceed minmax_lo")
        if self.clip_max <= 0:
            raise DataError("clip_max must be positive")

    @classmethod
    def analytic(cls, clip_max: float = 100.0) -> "NormalizationSpec":
        return cls(clip_max=clip_max, log_offset=1.0, minmax_lo=0.0, minmax_hi=math.log1p(clip_max))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(**{k: float(d[k]) for k in ("clip_max", "log_offset", "minmax_lo", "minmax_hi")})

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RainSequence:
    """Normalized frames ``(S, C, H, W)``.

    The first ``context`` frames are inputs (the last of them is x0); the
    remaining ``h`` frames are forecast targets at 30-minute lead steps.
    """

    frames: np.ndarray
    start_time: dt.datetime
    spec: NormalizationSpec = field(default_factory=NormalizationSpec)
    context: int = 1

    @property
    def h(self) -> int:
        return self.frames.shape[0] - self.context

    @property
    def x0(self) -> np.ndarray:
        return self.frames[self.context - 1]

    @property
    def targets(self) -> np.ndarray:
        return self.frames[self.context:]

    @property
    def timestamps(self) -> list[dt.datetime]:
        return [self.start_time + k * CADENCE for k in range(self.frames.shape[0])]


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    n_sequences: int = 64
    n_blobs: int = 3
    advection_velocity: tuple[float, float] = (1.0, 0.0)  # (columns, rows) per frame
    growth_rate: float = 0.0
    size: int = 64
    h: int = 8
    context: int = 1
    sigma_range: tuple[float, float] = (2.5, 5.0)

    def __post_init__(self):
        if self.n_sequences < 1 or self.n_blobs < 1:
            raise DataError("n_sequences and n_blobs must be positive")
        if self.h < 1 or self.context < 1:
            raise DataError("h and context must be positive")
        if self.size < 8:
            raise DataError("size too small")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise DataError("invalid sigma_range")


# -- ingestion -----------------------------------------------------------


def _granule_time(f: h5py.File, path: Path) -> dt.datetime:
    if IMERG_TIME_PATH in f:
        seconds = float(np.asarray(f[IMERG_TIME_PATH]).ravel()[0])
        return _EPOCH + dt.timedelta(seconds=seconds)
    m = _IMERG_NAME_TIME.search(path.name)
    if m is None:
        raise DataError(f"cannot determine timestamp of {path}")
    return dt.datetime.strptime(m.group(1) + m.group(2), "%Y%m%d%H%M%S").replace(tzinfo=dt.timezone.utc)


def read_granule(path, dataset_path: str = IMERG_PRECIP_PATH,
                 fill_value: float = IMERG_FILL_VALUE) -> RainField:
    """Read one IMERG-layout HDF5 granule into a ``(lat, lon)`` RainField.

    IMERG stores precipitation as ``(time, lon, lat)``; the single time slice
    is transposed to row = latitude. Fill values (and any other negative
    sentinel) become 0 mm/h.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with h5py.File(path, "r") as f:
        if dataset_path not in f:
            raise DataError(f"{path}: missing dataset {dataset_path!r}")
        raw = np.asarray(f[dataset_path], dtype=np.float64)
        lat = np.asarray(f[IMERG_LAT_PATH]) if IMERG_LAT_PATH in f else None
        lon = np.asarray(f[IMERG_LON_PATH]) if IMERG_LON_PATH in f else None
        timestamp = _granule_time(f, path)
    if raw.ndim == 3:
        raw = raw[0]
    if raw.ndim != 2:
        raise DataError(f"{path}: expected a 2-D or (1, lon, lat) array, got {raw.shape}")
    values = raw.T
    values = np.where(np.isclose(values, fill_value) | (values < 0), 0.0, values)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite precipitation values")
    if lat is not None and lon is not None and lat.size and lon.size:
        bbox = (float(lat.min()), float(lat.max()), float(lon.min()), float(lon.max()))
    else:
        bbox = (float("nan"),) * 4
    return RainField(values=values, timestamp=timestamp, bbox=bbox)


def write_granule(path, values: np.ndarray, timestamp: dt.datetime,
                  lat: np.ndarray | None = None, lon: np.ndarray | None = None,
                  dataset_path: str = IMERG_PRECIP_PATH) -> Path:
    """Write a ``(lat, lon)`` field in IMERG granule layout (used for fixtures)."""
    path = Path(path)
    values = np.asarray(values, dtype=np.float32)
    n_lat, n_lon = values.shape
    if lat is None:
        lat = np.arange(n_lat, dtype=np.float32) * 0.1
    if lon is None:
        lon = np.arange(n_lon, dtype=np.float32) * 0.1
    with h5py.File(path, "w") as f:
        f.create_dataset(dataset_path, data=values.T[None])
        f.create_dataset(IMERG_LAT_PATH, data=np.asarray(lat, dtype=np.float32))
        f.create_dataset(IMERG_LON_PATH, data=np.asarray(lon, dtype=np.float32))
        seconds = (timestamp - _EPOCH).total_seconds()
        f.create_dataset(IMERG_TIME_PATH, data=np.array([seconds], dtype=np.int64))
    return path


def crop_boxes(field: RainField, boxes: Sequence[tuple[int, int]],
               size: int = GRID_SIZE) -> list[RainField]:
    """Cut ``size x size`` boxes whose top-left corners are ``(row, col)``."""
    H, W = field.values.shape
    out = []
    for row, col in boxes:
        if row < 0 or col < 0 or row + size > H or col + size > W:
            raise DataError(f"box at ({row}, {col}) of size {size} exceeds grid {H}x{W}")
        values = field.values[row:row + size, col:col + size].copy()
        bbox = field.bbox
        if not any(math.isnan(b) for b in bbox):
            lat_min, lat_max, lon_min, lon_max = bbox
            dlat = (lat_max - lat_min) / max(H - 1, 1)
            dlon = (lon_max - lon_min) / max(W - 1, 1)
            bbox = (lat_min + row * dlat, lat_min + (row + size - 1) * dlat,
                    lon_min + col * dlon, lon_min + (col + size - 1) * dlon)
        out.append(RainField(values=values, timestamp=field.timestamp, bbox=bbox))
    return out


# -- preprocessing -------------------------------------------------------


def forward_transform(x, spec: NormalizationSpec) -> np.ndarray:
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if np.any(x < 0):
        raise DataError("forward_transform requires non-negative rain rates")
    y = (np.log(spec.log_offset + np.minimum(x, spec.clip_max)) - spec.minmax_lo) / (spec.minmax_hi - spec.minmax_lo)
    return np.clip(y, 0.0, 1.0)


def inverse_transform(y, spec: NormalizationSpec, tol: float = 1e-6) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < -tol) or np.any(y > 1 + tol):
        raise DataError("inverse_transform input outside [0, 1]")
    x = np.exp(y * (spec.minmax_hi - spec.minmax_lo) + spec.minmax_lo) - spec.log_offset
    return np.maximum(x, 0.0)


def window_sequences(frames: Sequence[RainField], h: int = 8, stride: int = 1,
                     context: int = 1, spec: NormalizationSpec | None = None) -> list[RainSequence]:
    """Slide a ``context + h`` window over time-ordered frames.

    Windows that straddle a gap in the 30-minute cadence are skipped.
    """
    spec = spec or NormalizationSpec.analytic()
    length = context + h
    if len(frames) < length:
        raise DataError(f"need at least {length} frames, got {len(frames)}")
    times = [f.timestamp for f in frames]
    # run_start[k] is the first index of the contiguous run containing k
    run_start = [0] * len(frames)
    for k in range(1, len(frames)):
        run_start[k] = run_start[k - 1] if times[k] - times[k - 1] == CADENCE else k
    normalized = None
    out = []
    for start in range(0, len(frames) - length + 1, stride):
        end = start + length - 1
        if run_start[end] > start:
            continue
        if normalized is None:
            normalized = {}
        stack = []
        for k in range(start, end + 1):
            if k not in normalized:
                normalized[k] = forward_transform(frames[k].values, spec).astype(np.float32)
            stack.append(normalized[k])
        out.append(RainSequence(frames=np.stack(stack)[:, None], start_time=times[start],
                                spec=spec, context=context))
    return out


def count_gaps(timestamps: Sequence[dt.datetime]) -> int:
    return sum(1 for a, b in zip(timestamps, timestamps[1:]) if b - a != CADENCE)


# -- synthetic data ------------------------------------------------------

# Peak-rate bands (mm/h) matching the seven class-weight bands.
_PEAK_BANDS = ((0.1, 0.5), (0.5, 2.0), (2.0, 6.0), (6.0, 10.0), (10.0, 18.0), (18.0, 30.0), (30.0, 80.0))


def synth_fields(cfg: SyntheticConfig) -> np.ndarray:
    """Physical rain rates ``(N, S, H, W)`` of advected, growing Gaussian blobs."""
    rng = np.random.default_rng(cfg.seed)
    S = cfg.context + cfg.h
    n = cfg.size
    vx, vy = cfg.advection_velocity
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    out = np.zeros((cfg.n_sequences, S, n, n), dtype=np.float64)
    travel_x, travel_y = vx * (S - 1), vy * (S - 1)
    for i in range(cfg.n_sequences):
        for j in range(cfg.n_blobs):
            band = _PEAK_BANDS[(i * cfg.n_blobs + j) % len(_PEAK_BANDS)]
            peak = rng.uniform(*band)
            sigma = rng.uniform(*cfg.sigma_range)
            margin = 2.5 * sigma
            cx = _sample_start(rng, margin, n - 1 - margin, travel_x)
            cy = _sample_start(rng, margin, n - 1 - margin, travel_y)
            for k in range(S):
                amp = peak * (1.0 + cfg.growth_rate) ** k
                r2 = (xx - (cx + vx * k)) ** 2 + (yy - (cy + vy * k)) ** 2
                out[i, k] += amp * np.exp(-r2 / (2.0 * sigma * sigma))
    return out


def _sample_start(rng, lo, hi, travel):
    # keep the blob inside [lo, hi] over its whole trajectory when possible
    a, b = (lo, hi - travel) if travel >= 0 else (lo - travel, hi)
    if b <= a:
        a, b = lo, hi
    if b <= a:
        b = a = (lo + hi) / 2.0
    return rng.uniform(a, b)


def synth_advection(cfg: SyntheticConfig, spec: NormalizationSpec | None = None,
                    start_time: dt.datetime | None = None) -> list[RainSequence]:
    spec = spec or NormalizationSpec.analytic()
    start_time = start_time or dt.datetime(2023, 1, 1, tzinfo=dt.timezone.utc)
    fields = synth_fields(cfg)
    S = fields.shape[1]
    seqs = []
    for i, f in enumerate(fields):
        frames = forward_transform(f, spec).astype(np.float32)[:, None]
        # non-overlapping timelines keep chronological splits meaningful
        seqs.append(RainSequence(frames=frames, start_time=start_time + i * S * CADENCE,
                                 spec=spec, context=cfg.context))
    return seqs


# -- dataset container ---------------------------------------------------


def stack_sequences(seqs: Sequence[RainSequence]) -> np.ndarray:
    if not seqs:
        raise DataError("no sequences to stack")
    return np.stack([s.frames for s in seqs]).astype(np.float32)


def save_dataset(path, seqs: Sequence[RainSequence], extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.npy`` (N, S, C, H, W) and a ``<path>.json`` sidecar."""
    path = Path(path)
    arr_path, meta_path = path.with_suffix(".npy"), path.with_suffix(".json")
    arr_path.parent.mkdir(parents=True, exist_ok=True)
    np.save(arr_path, stack_sequences(seqs))
    meta = {
        "spec": seqs[0].spec.to_dict(),
        "spec_fingerprint": seqs[0].spec.fingerprint(),
        "context": seqs[0].context,
        "h": seqs[0].h,
        "start_times": [s.start_time.isoformat() for s in seqs],
    }
    if extra:
        meta.update(extra)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return arr_path, meta_path


def load_dataset(path) -> list[RainSequence]:
    path = Path(path)
    arr = np.load(path.with_suffix(".npy"), mmap_mode="r")
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = NormalizationSpec.from_dict(meta["spec"])
    return [
        RainSequence(frames=np.asarray(arr[i]), start_time=dt.datetime.fromisoformat(t),
                     spec=spec, context=int(meta["context"]))
        for i, t in enumerate(meta["start_times"])
    ]


def chronological_split(seqs: Sequence[RainSequence], fractions=(0.8, 0.1, 0.1)):
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must be three values summing to 1")
    ordered = sorted(seqs, key=lambda s: s.start_time)
    n = len(ordered)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:]
