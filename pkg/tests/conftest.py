import datetime as dt

import numpy as np
import pytest
import torch

from nowcast.config import load_config

T0 = dt.datetime(2023, 3, 9, 3, 0, tzinfo=dt.timezone.utc)


class OracleInterpolator:
    """Returns ground truth at the requested lead, ignoring its inputs."""

    def __init__(self, targets, h):
        # targets: (B, h + 1, C, H, W) with index 0 = x0
        self.targets = targets
        self.h = h
        self.calls = 0

    def __call__(self, x0, cond, time_index, dropout_on=False, generator=None):
        self.calls += 1
        n = torch.round(torch.as_tensor(time_index).reshape(-1) * self.h).long()
        if n.numel() == 1:
            n = n.expand(x0.shape[0])
        return self.targets[torch.arange(x0.shape[0]), n].to(x0.dtype)


class OracleForecastor:
    def __init__(self, horizon):
        self.horizon = horizon
        self.calls = 0

    def __call__(self, x0, cond, time_index, dropout_on=False, generator=None):
        self.calls += 1
        return self.horizon.to(x0.dtype)


class IdentityInterpolator:
    def __call__(self, x0, cond, time_index, dropout_on=False, generator=None):
        return x0


class IdentityForecastor:
    def __call__(self, x0, cond, time_index, dropout_on=False, generator=None):
        return cond


@pytest.fixture
def tiny_config(tmp_path):
    """A seconds-scale synthetic experiment in a temporary output directory."""

    def make(**overrides):
        base = {
            "output_dir": str(tmp_path / "run"),
            "data": {"context": 4, "h": 4, "synthetic": {"size": 16, "n_sequences": 20, "n_blobs": 2,
                                                          "sigma_range": [1.5, 2.5]}},
            "model": {
                "interpolator": {"base_channels": 8, "depth": 2, "time_embedding_dim": 16},
                "forecastor": {"base_channels": 8, "depth": 2, "time_embedding_dim": 16},
                "convlstm": {"hidden_channels": 4, "kernel": 3},
            },
            "train": {"epochs_interpolator": 2, "epochs_forecastor": 2, "epochs_convlstm": 2, "batch_size": 4},
            "eval": {"members": 2},
        }
        from nowcast.config import deep_merge

        return load_config(None, "synth", 0, deep_merge(base, overrides))

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
