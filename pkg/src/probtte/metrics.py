"""Point and probabilistic scores for travel-time predictions."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from ._rng import substream
from .errors import ValidationError

MEAN_BASED = "mean-based"
SAMPLE_BASED = "sample-based"


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    mape: float
    crps: float  # seconds
    crps_standardized: float  # crps / model scale
    coverage90: float
    n: int
    scoring_mode: str = MEAN_BASED
    policy: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _point(preds, mode: str, seed: int) -> np.ndarray:
    means = np.array([p.mean for p in preds], dtype=float)
    if mode == MEAN_BASED:
        return means
    if mode != SAMPLE_BASED:
        raise ValidationError(f"unknown scoring mode {mode!r}")
    sd = np.sqrt(np.maximum([p.variance for p in preds], 1e-12))
    return means + sd * substream(seed, "sampling").standard_normal(len(preds))


def point_metrics(preds: Sequence, truths: Sequence, mode: str = MEAN_BASED, seed: int = 0) -> tuple:
    """RMSE, MAE and MAPE (as a fraction).

    Mean-based mode scores predictive means; sample-based mode scores one
    seeded draw per trip.
    """
    truths = np.asarray(truths, dtype=float)
    if len(preds) != len(truths):
        raise ValidationError("predictions and truths differ in length")
    if len(truths) == 0:
        raise ValidationError("nothing to score")
    if np.any(truths == 0):
        raise ValidationError("MAPE is undefined for zero travel times")
    err = _point(preds, mode, seed) - truths
    return (
        float(np.sqrt(np.mean(err ** 2))),
        float(np.mean(np.abs(err))),
        float(np.mean(np.abs(err / truths))),
    )


def crps_gaussian(mean, std, truth):
    """Closed-form CRPS of N(mean, std^2) at ``truth``."""
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise ValidationError("CRPS needs a positive standard deviation")
    z = (np.asarray(truth, dtype=float) - mean) / std
    out = std * (z * (2.0 * stats.norm.cdf(z) - 1.0) + 2.0 * stats.norm.pdf(z) - 1.0 / math.sqrt(math.pi))
    return float(out) if out.ndim == 0 else out


def coverage(preds: Sequence, truths: Sequence, level: float = 0.9) -> float:
    """Fraction of truths inside the central ``level`` predictive interval."""
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    truths = np.asarray(truths, dtype=float)
    means = np.array([p.mean for p in preds])
    sd = np.sqrt([p.variance for p in preds])
    half = stats.norm.ppf(0.5 + level / 2.0) * sd
    return float(np.mean(np.abs(truths - means) <= half))


def score(preds: Sequence, truths: Sequence, scale: float = 1.0, mode: str = MEAN_BASED,
          seed: int = 0, policy: str = "") -> MetricsReport:
    rmse, mae, mape = point_metrics(preds, truths, mode, seed)
    sd = np.sqrt([max(p.variance, 1e-12) for p in preds])
    crps = float(np.mean(crps_gaussian(np.array([p.mean for p in preds]), sd, np.asarray(truths))))
    return MetricsReport(
        rmse=rmse, mae=mae, mape=mape, crps=crps, crps_standardized=crps / scale,
        coverage90=coverage(preds, truths, 0.9), n=len(truths), scoring_mode=mode, policy=policy,
    )
