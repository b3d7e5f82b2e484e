"""Experiment configuration: one YAML file, two presets, a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields
from pathlib import Path

import yaml

from nowcast.data import NormalizationSpec, SyntheticConfig
from nowcast.losses import ClassWeightTable, CompositeLossConfig, LcbConfig, LossSpec
from nowcast.networks import ConvLSTMConfig, UNetConfig

DATA_ROOT_ENV = "NOWCAST_DATA_ROOT"


class ConfigError(ValueError):
    pass


_BASE = {
    "seed": None,
    "output_dir": "runs/default",
    "data": {
        "source": "synthetic",
        "granule_dir": None,
        "granule_glob": "*.HDF5",
        "dataset_path": "Grid/precipitation",
        "boxes": [[0, 0]],
        "box_size": 128,
        "clip_max": 100.0,
        "h": 8,
        "context": 4,
        "stride": 1,
        "split": [0.8, 0.1, 0.1],
        "synthetic": {
            "seed": 0,
            "n_sequences": 160,
            "n_blobs": 3,
            "advection_velocity": [1.0, 0.0],
            "growth_rate": 0.0,
            "size": 64,
        },
    },
    "loss": {
        "alpha": 0.6,
        "beta": 1.0,
        "lambda1": 0.5,
        "lambda2": 0.5,
        "alpha_decay_epochs": 20,
        "thresholds": [0.5, 2.0, 6.0, 10.0, 18.0, 30.0],
        "weights": [1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0],
    },
    "model": {
        "interpolator": {"base_channels": 32, "depth": 4, "dropout_rate": 0.2, "time_embedding_dim": 64},
        "forecastor": {"base_channels": 32, "depth": 4, "dropout_rate": 0.0, "time_embedding_dim": 64},
        "convlstm": {"layers": 2, "hidden_channels": 128, "kernel": 5, "pixel_dropout": 0.15, "context_frames": 4},
    },
    "train": {
        "epochs_interpolator": 60,
        "epochs_forecastor": 30,
        "epochs_convlstm": 30,
        "batch_size": 8,
        "lr": 2e-4,
        "dyffusion_loss": "lcb",
        "convlstm_loss": "lcb",
    },
    "eval": {
        "members": 10,
        "thresholds": [2.0, 10.0, 18.0],
        "models": ["dyffusion", "convlstm", "persistence"],
        "max_samples": None,
        "fair_crps": False,
        "plot_sample": 0,
    },
}

PRESETS = {
    "full": {},
    "synth": {
        "output_dir": "runs/synth",
        "data": {"source": "synthetic", "synthetic": {"size": 64, "n_sequences": 160}},
        "model": {
            "interpolator": {"depth": 3},
            "forecastor": {"depth": 3},
            "convlstm": {"hidden_channels": 16},
        },
        "train": {"epochs_interpolator": 8, "epochs_forecastor": 8, "epochs_convlstm": 8, "lr": 1e-3},
        "eval": {"members": 5},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class ExperimentConfig:
    """Validated view over the merged config dictionary."""

    def __init__(self, raw: dict, base_dir: Path | None = None):
        self.raw = raw
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        if raw.get("seed") is None:
            raise ConfigError("config must set an integer 'seed'")
        unknown = set(raw) - set(_BASE) - {"preset"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        # build every typed section eagerly so bad values fail at load
        self.spec, self.table, self.lcb, self.composite = self.normalization(), self.weight_table(), self.lcb_config(), self.composite_config()
        self.interpolator_config(), self.forecastor_config(), self.convlstm_config()
        if self.data["source"] == "synthetic":
            self.synthetic_config()
        elif self.data["source"] == "imerg":
            gd = self.granule_dir()
            if gd is None or not gd.is_dir():
                raise ConfigError(f"granule_dir {gd} is not a directory")
        else:
            raise ConfigError(f"unknown data source {self.data['source']!r}")

    # sections
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def h(self) -> int:
        return int(self.data["h"])

    @property
    def context(self) -> int:
        return int(self.data["context"])

    def _resolve(self, p) -> Path:
        p = Path(os.path.expandvars(str(p)))
        if p.is_absolute():
            return p
        root = os.environ.get(DATA_ROOT_ENV)
        return (Path(root) if root else self.base_dir) / p

    def granule_dir(self) -> Path | None:
        gd = self.data.get("granule_dir")
        return None if gd is None else self._resolve(gd)

    @property
    def output_dir(self) -> Path:
        p = Path(self.raw["output_dir"])
        return p if p.is_absolute() else self.base_dir / p

    # typed views
    def normalization(self) -> NormalizationSpec:
        return NormalizationSpec.analytic(float(self.data["clip_max"]))

    def weight_table(self) -> ClassWeightTable:
        return ClassWeightTable(tuple(self.raw["loss"]["thresholds"]), tuple(self.raw["loss"]["weights"]))

    def lcb_config(self) -> LcbConfig:
        return LcbConfig(alpha=float(self.raw["loss"]["alpha"]), beta=float(self.raw["loss"]["beta"]))

    def composite_config(self) -> CompositeLossConfig:
        L = self.raw["loss"]
        return CompositeLossConfig(float(L["lambda1"]), float(L["lambda2"]), int(L["alpha_decay_epochs"]))

    def loss_spec(self, kind: str) -> LossSpec:
        return LossSpec(kind=kind, lcb=self.lcb, table=self.table)

    def _typed(self, cls, d: dict, **extra):
        names = {f.name for f in fields(cls)}
        bad = set(d) - names
        if bad:
            raise ConfigError(f"unknown {cls.__name__} keys: {sorted(bad)}")
        try:
            return cls(**{**d, **extra})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc

    def interpolator_config(self) -> UNetConfig:
        return self._typed(UNetConfig, self.raw["model"]["interpolator"])

    def forecastor_config(self) -> UNetConfig:
        return self._typed(UNetConfig, self.raw["model"]["forecastor"])

    def convlstm_config(self) -> ConvLSTMConfig:
        return self._typed(ConvLSTMConfig, self.raw["model"]["convlstm"])

    def synthetic_config(self, **overrides) -> SyntheticConfig:
        d = dict(self.data["synthetic"])
        d["advection_velocity"] = tuple(d.get("advection_velocity", (1.0, 0.0)))
        if "sigma_range" in d:
            d["sigma_range"] = tuple(d["sigma_range"])
        return self._typed(SyntheticConfig, d, h=self.h, context=self.context, **overrides)

    def training_hash(self) -> str:
        """Hash of everything that shapes trained weights (data, loss, model, train, seed).

        Epoch counts are left out: weights after epoch k do not depend on how
        many epochs follow, so a run may be resumed with a longer schedule.
        """
        keys = ("seed", "data", "loss", "model", "train")
        body = {k: self.raw[k] for k in keys}
        body["train"] = {k: v for k, v in body["train"].items() if not k.startswith("epochs_")}
        blob = json.dumps(body, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def load_config(path=None, preset: str | None = None, seed: int | None = None,
                overrides: dict | None = None) -> ExperimentConfig:
    """Merge defaults, then the preset, then the file, then CLI overrides."""
    user: dict = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        user = yaml.safe_load(path.read_text()) or {}
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
        base_dir = path.parent.resolve()
    preset = preset or user.get("preset") or "full"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    raw = deep_merge(deep_merge(_BASE, PRESETS[preset]), user)
    raw["preset"] = preset
    if seed is not None:
        raw["seed"] = seed
    if overrides:
        raw = deep_merge(raw, overrides)
    return ExperimentConfig(raw, base_dir)
