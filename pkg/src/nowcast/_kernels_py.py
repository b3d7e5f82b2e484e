"""Pure-numpy versions of the verification kernels in ``_kernels.pyx``."""

import numpy as np


def crps_sum(members, obs, fair=False):
    members = np.asarray(members, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if members.ndim != 2 or obs.shape != members.shape[1:]:
        raise ValueError("members and obs disagree on pixel count")
    n_mem = members.shape[0]
    if n_mem < 1:
        raise ValueError("empty ensemble")
    skill = np.abs(members - obs).sum(axis=0) / n_mem
    ranked = np.sort(members, axis=0)
    coef = 2.0 * np.arange(n_mem) - n_mem + 1.0
    spread = (coef[:, None] * ranked).sum(axis=0)
    norm = n_mem * (n_mem - 1) if (fair and n_mem > 1) else n_mem * n_mem
    return float((skill - spread / norm).sum())


def spread_error_sums(members, obs):
    members = np.asarray(members, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if members.ndim != 2 or obs.shape != members.shape[1:]:
        raise ValueError("members and obs disagree on pixel count")
    n_mem = members.shape[0]
    if n_mem < 1:
        raise ValueError("empty ensemble")
    # shift by the first member so identical members give exactly zero spread
    d = members - members[0]
    s = d.sum(axis=0)
    mean = members[0] + s / n_mem
    if n_mem > 1:
        var = np.maximum((d * d).sum(axis=0) - s * s / n_mem, 0.0) / (n_mem - 1)
        spread = float(np.sqrt(var).sum())
    else:
        spread = 0.0
    return spread, float(((mean - obs) ** 2).sum())


def contingency(pred, obs, threshold):
    pred = np.asarray(pred) >= threshold
    obs = np.asarray(obs) >= threshold
    if pred.shape != obs.shape:
        raise ValueError("pred and obs disagree on pixel count")
    hits = int(np.count_nonzero(pred & obs))
    misses = int(np.count_nonzero(~pred & obs))
    fa = int(np.count_nonzero(pred & ~obs))
    return hits, misses, fa, pred.size - hits - misses - fa


def class_weights(rates, thresholds, weights):
    thresholds = np.asarray(thresholds, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != thresholds.shape[0] + 1:
        raise ValueError("need one more weight than thresholds")
    return weights[np.searchsorted(thresholds, np.asarray(rates, dtype=np.float64), side="left")]
