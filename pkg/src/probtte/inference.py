"""Conditional travel-time prediction from completed same-day trips.

The day-level deviation is written ``eta = L z`` with ``z ~ N(0, I)``.
Conditioning on observed trips gives a Gaussian posterior over ``z``,
which stays ``r_L``-dimensional no matter how many links the network has.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from ._rng import substream
from .data import Batch, assign_bucket, subsample
from .errors import ValidationError
from .model import ModelParams, _assemble, _solve, diag_d, mu_vector

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class PosteriorState:
    bucket: int
    z_mean: np.ndarray
    z_cov: np.ndarray
    n_obs: int = 0  # conditioning trips, not augmented rows

    @classmethod
    def prior(cls, r_L: int, bucket: int) -> "PosteriorState":
        return cls(bucket, np.zeros(r_L), np.eye(r_L), 0)


@dataclass(frozen=True)
class GaussianPrediction:
    """Predictive distribution of one trip's travel time, in seconds."""

    mean: float
    variance: float
    prior_mean: float
    correction: float
    day_var: float
    trip_var: float
    n_conditioning: int = 0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def interval(self, level: float = 0.9) -> tuple:
        half = stats.norm.ppf(0.5 + level / 2.0) * self.std
        return self.mean - half, self.mean + half


def condition(observed: Sequence, params: ModelParams, bucket: int) -> PosteriorState:
    """Posterior of the latent day effect given augmented observed trips.

    ``observed`` is a sequence of :class:`~probtte.data.SubTripSet`, each
    carrying its observed (sub-)trip travel times.
    """
    params.check_bucket(bucket)
    if not observed:
        return PosteriorState.prior(params.r_L, bucket)
    days = {g.parent.day for g in observed}
    if len(days) != 1:
        raise ValidationError("conditioning trips must share one day")
    for g in observed:
        if assign_bucket(g.parent.depart, params.p) != bucket:
            raise ValidationError(f"trip {g.parent.trip_id} is not in bucket {bucket}")
    batch = Batch(days.pop(), bucket, observed)
    sv = _solve(_assemble(batch, params))
    z_cov = 0.5 * (sv.C_inv + sv.C_inv.T)
    return PosteriorState(bucket, z_cov @ sv.vtu, z_cov, len(observed))


def _query_vectors(query, params: ModelParams, bucket: int):
    links = np.asarray(query, dtype=np.int64)
    if links.size == 0:
        raise ValidationError("query trip has no links")
    if links.min() < 0 or links.max() >= params.n_links:
        raise ValidationError("query references an unknown link")
    aL = params.L[bucket][links].sum(axis=0)
    aH = params.H[bucket][links].sum(axis=0)
    return links, aL, aH


def predict(query, posterior: PosteriorState, params: ModelParams) -> GaussianPrediction:
    """Predictive distribution of ``query`` (a link sequence) given a posterior."""
    t = posterior.bucket
    params.check_bucket(t)
    links, aL, aH = _query_vectors(query, params, t)
    s = params.scale
    prior_mean = float(mu_vector(params, t)[links].sum())
    correction = float(aL @ posterior.z_mean)
    day_var = float(aL @ posterior.z_cov @ aL)
    trip_var = float(aH @ aH + diag_d(params, t)[links].sum())
    variance = max((day_var + trip_var) * s * s, VARIANCE_FLOOR)
    return GaussianPrediction(
        mean=(prior_mean + correction) * s,
        variance=variance,
        prior_mean=prior_mean * s,
        correction=correction * s,
        day_var=day_var * s * s,
        trip_var=trip_var * s * s,
        n_conditioning=posterior.n_obs,
    )


def predict_prior(query, params: ModelParams, bucket: int) -> GaussianPrediction:
    params.check_bucket(bucket)
    return predict(query, PosteriorState.prior(params.r_L, bucket), params)


def sample(pred: GaussianPrediction, n: int, seed: int = 0, physical: bool = False) -> np.ndarray:
    """Draw ``n`` travel times; ``physical`` clamps draws at 1 s."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = substream(seed, "sampling")
    sd = math.sqrt(max(pred.variance, VARIANCE_FLOOR))
    draws = pred.mean + sd * rng.standard_normal(n)
    return np.maximum(draws, 1.0) if physical else draws


def select_conditioning(query, pool: Sequence, p: int, max_obs: int = 32) -> list:
    """Most recently completed pool trips of the query's day and bucket.

    A pool trip qualifies when it arrived no later than the query departs.
    """
    bucket = assign_bucket(query.depart, p)
    done = [
        t for t in pool
        if t.day == query.day and t.trip_id != query.trip_id
        and assign_bucket(t.depart, p) == bucket and t.arrival <= query.depart
    ]
    done.sort(key=lambda t: (t.arrival, t.trip_id), reverse=True)
    return done[:max_obs]


def predict_trip(
    query,
    params: ModelParams,
    pool: Optional[Sequence] = None,
    policy: str = "conditional",
    max_obs: int = 32,
    k: int = 0,
    eta: Optional[float] = None,
) -> GaussianPrediction:
    """Predict a query trip under the ``prior`` or ``conditional`` policy."""
    if policy not in ("prior", "conditional"):
        raise ValidationError(f"unknown conditioning policy {policy!r}")
    bucket = assign_bucket(query.depart, params.p)
    if policy == "prior" or not pool or max_obs <= 0:
        return predict_prior(query.links, params, bucket)
    observed = [subsample(t, k, eta) for t in select_conditioning(query, pool, params.p, max_obs)]
    return predict(query.links, condition(observed, params, bucket), params)
