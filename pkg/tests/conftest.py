"""Shared random-instance builders and independent dense oracles."""
import numpy as np
import pytest
from scipy import stats

from probtte.data import Batch, Trip, subsample
from probtte.model import BLOCK_FLOOR, ModelParams


def random_params(rng, n, r_L, r_H, p=1, scale=1.0, amp=0.5):
    return ModelParams(
        amp * rng.standard_normal((p, n, r_L)),
        amp * rng.standard_normal((p, n, r_H)),
        rng.standard_normal((p, r_L)),
        rng.standard_normal((p, r_H)),
        scale=scale,
    )


def random_trip(rng, n, trip_id="t", day=0, depart=3600.0, min_len=1, max_len=None,
                every_link=False):
    """A trip over distinct random links with random increasing checkpoints."""
    max_len = min(n, max_len or n)
    length = int(rng.integers(min_len, max_len + 1))
    links = rng.choice(n, size=length, replace=False)
    if every_link:
        stops = np.arange(1, length + 1)
    else:
        inner = [c for c in range(1, length) if rng.random() < 0.5]
        stops = np.array(inner + [length])
    times = np.cumsum(rng.uniform(5.0, 60.0, size=len(stops)))
    return Trip(trip_id, day, depart, links, list(zip(stops, times)))


def random_batch(rng, n, b, k, min_len=1, max_len=None):
    groups = [subsample(random_trip(rng, n, f"t{i}", min_len=min_len, max_len=max_len), k)
              for i in range(b)]
    return Batch(0, 0, groups)


def kron_joint(batch, params, bucket=0):
    """Mean and covariance (model units) from explicit stacked matrices.

    Builds the row-by-link selection and the row-by-(trip, link) block
    selection, then forms ``A L L^T A^T + B (I kron Sigma_p) B^T``.
    """
    n = params.n_links
    rows = [r for g in batch.groups for r in g.rows()]
    owner = [q for q, g in enumerate(batch.groups) for _ in g.rows()]
    A = np.zeros((len(rows), n))
    B = np.zeros((len(rows), len(batch.groups) * n))
    for i, (r, q) in enumerate(zip(rows, owner)):
        A[i, r] = 1.0
        B[i, q * n + np.asarray(r)] = 1.0
    L, H = params.L[bucket], params.H[bucket]
    if params.diag_override is not None:
        d = params.diag_override[bucket]
    else:
        z = H @ params.w_d[bucket]
        d = np.array([np.log1p(np.exp(v)) for v in z])
    sigma_p = H @ H.T + np.diag(d)
    cov = A @ L @ L.T @ A.T + B @ np.kron(np.eye(len(batch.groups)), sigma_p) @ B.T
    cov += BLOCK_FLOOR * np.eye(len(rows))
    return A @ (L @ params.w_mu[bucket]), cov


def dense_nll(batch, params, bucket=0):
    """Negative log-density of the batch targets in seconds, via scipy."""
    mean, cov = kron_joint(batch, params, bucket)
    s = params.scale
    return -stats.multivariate_normal(s * mean, s * s * cov).logpdf(batch.targets)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
