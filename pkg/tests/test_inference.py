import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probtte.data import Trip, subsample
from probtte.errors import ValidationError
from probtte.inference import (
    GaussianPrediction, PosteriorState, condition, predict, predict_prior, predict_trip,
    sample, select_conditioning,
)
from probtte.model import ModelParams

from conftest import kron_joint, random_params, random_trip


def scalar_params(mu=5.0, sd2=1.0, sp2=3.0):
    return ModelParams(np.array([[np.sqrt(sd2)]]), np.array([[0.0]]),
                       np.array([mu / np.sqrt(sd2)]), np.array([0.0]),
                       diag_override=np.array([sp2]))


def brute_force(query, observed, params):
    """Condition the explicit joint (query, observed rows) Gaussian."""
    from probtte.data import Batch

    batch = Batch(0, 0, observed)
    mean_o, cov_o = kron_joint(batch, params)
    L, H = params.L[0], params.H[0]
    d = params.diag_override[0] if params.diag_override is not None else np.log1p(np.exp(H @ params.w_d[0]))
    a = np.zeros(params.n_links)
    a[list(query)] = 1.0
    A = np.zeros((batch.m, params.n_links))
    for i, r in enumerate(batch.rows):
        A[i, r] = 1.0
    mu = L @ params.w_mu[0]
    cross = a @ L @ L.T @ A.T
    qq = a @ (L @ L.T + H @ H.T + np.diag(d)) @ a
    gain = np.linalg.solve(cov_o, cross)
    s = params.scale
    mean = s * (a @ mu + gain @ (batch.targets / s - mean_o))
    return mean, s * s * (qq - cross @ gain)


def test_empty_posterior_is_prior():
    post = condition([], scalar_params(), 0)
    np.testing.assert_array_equal(post.z_mean, [0.0])
    np.testing.assert_array_equal(post.z_cov, [[1.0]])
    P = random_params(np.random.default_rng(0), 4, 2, 2)
    assert predict([0, 3], PosteriorState.prior(2, 0), P) == predict_prior([0, 3], P, 0)


def test_scalar_shrinkage():
    P = scalar_params()
    obs = subsample(Trip("o", 0, 0.0, [0], [(1, 9.0)]), 0)
    pred = predict([0], condition([obs], P, 0), P)
    assert pred.mean == pytest.approx(6.0, abs=1e-8)
    assert pred.variance == pytest.approx(3.75, abs=1e-8)
    assert pred.n_conditioning == 1


def test_scalar_prior_assembly():
    P = ModelParams(np.array([[1.0]]), np.array([[0.0]]), np.array([5.0]), np.array([0.0]),
                    diag_override=np.array([2.0]))
    pred = predict_prior([0], P, 0)
    assert (pred.mean, pred.variance) == (5.0, 3.0)


def test_orthogonal_links_variance_is_additive():
    P = ModelParams(np.eye(2), np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([1.0, 1.0]),
                    np.array([0.0, 0.0]), diag_override=np.array([0.5, 0.25]))
    pred = predict_prior([0, 1], P, 0)
    # |aL|^2 = 2, H parts 1 + 4, D parts 0.75
    assert pred.variance == pytest.approx(2.0 + 5.0 + 0.75)
    assert pred.day_var == pytest.approx(2.0)


def test_prior_matches_dense_marginal(rng):
    P = random_params(rng, 9, 3, 2, scale=4.0)
    q = [1, 4, 7, 8]
    L, H = P.L[0], P.H[0]
    d = np.log1p(np.exp(H @ P.w_d[0]))
    a = np.zeros(9)
    a[q] = 1
    pred = predict_prior(q, P, 0)
    assert pred.mean == pytest.approx(4.0 * a @ L @ P.w_mu[0], rel=1e-12)
    assert pred.variance == pytest.approx(16.0 * a @ (L @ L.T + H @ H.T + np.diag(d)) @ a, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_condition_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 20))
    P = random_params(rng, n, int(rng.integers(1, 5)), int(rng.integers(1, 4)))
    observed = [subsample(random_trip(rng, n, f"o{i}"), int(rng.integers(0, 3)))
                for i in range(int(rng.integers(1, 6)))]
    query = random_trip(rng, n, "q").links
    pred = predict(query, condition(observed, P, 0), P)
    mean, var = brute_force(query, observed, P)
    assert abs(pred.mean - mean) < 1e-8
    assert abs(pred.variance - var) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_variance_never_grows_with_data(seed):
    rng = np.random.default_rng(seed)
    n = 12
    P = random_params(rng, n, 3, 2)
    obs = [subsample(random_trip(rng, n, f"o{i}"), 2) for i in range(4)]
    q = random_trip(rng, n, "q").links
    assert predict(q, condition(obs, P, 0), P).variance <= predict_prior(q, P, 0).variance + 1e-9
    small, big = condition(obs[:2], P, 0), condition(obs, P, 0)
    assert np.linalg.eigvalsh(small.z_cov - big.z_cov).min() >= -1e-9


def test_condition_rejects_mixed_days_and_buckets():
    P = random_params(np.random.default_rng(1), 4, 2, 2, p=2)
    a = subsample(Trip("a", 0, 100.0, [0], [(1, 5.0)]), 0)
    b = subsample(Trip("b", 1, 100.0, [1], [(1, 5.0)]), 0)
    c = subsample(Trip("c", 0, 50000.0, [2], [(1, 5.0)]), 0)
    with pytest.raises(ValidationError, match="one day"):
        condition([a, b], P, 0)
    with pytest.raises(ValidationError, match="bucket"):
        condition([a, c], P, 0)
    with pytest.raises(ValidationError, match="unknown link"):
        predict_prior([7], P, 0)


def test_sampling():
    pred = GaussianPrediction(0.0, 1.0, 0.0, 0.0, 0.5, 0.5)
    draws = sample(pred, 10 ** 6, seed=3)
    assert abs(draws.mean()) < 0.01 and abs(draws.var() - 1.0) < 0.01
    np.testing.assert_array_equal(sample(pred, 50, seed=4), sample(pred, 50, seed=4))
    tight = GaussianPrediction(20.0, 0.0, 20.0, 0.0, 0.0, 0.0)
    np.testing.assert_allclose(sample(tight, 100), 20.0, atol=1e-4)
    wide = GaussianPrediction(0.0, 100.0, 0.0, 0.0, 50.0, 50.0)
    assert sample(wide, 1000, physical=True).min() == 1.0
    assert sample(wide, 1000).min() < 0.0


def test_interval():
    lo, hi = GaussianPrediction(100.0, 25.0, 100.0, 0.0, 0.0, 25.0).interval(0.9)
    assert hi - 100.0 == pytest.approx(1.6448536269514722 * 5.0)
    assert 100.0 - lo == pytest.approx(hi - 100.0)


def _trip(tid, day, depart, total, links=(0, 1)):
    return Trip(tid, day, depart, links, [(len(links), total)])


def test_select_conditioning_policy():
    q = _trip("q", 0, 9 * 3600.0, 100.0)
    pool = [
        q,
        _trip("done-early", 0, 8 * 3600.0 + 60, 300.0),
        _trip("done-late", 0, 8 * 3600.0 + 600, 300.0),
        _trip("running", 0, 9 * 3600.0 - 10, 300.0),
        _trip("other-day", 1, 8 * 3600.0, 100.0),
        _trip("other-bucket", 0, 7 * 3600.0, 100.0),
    ]
    picked = select_conditioning(q, pool, 12, max_obs=32)
    assert [t.trip_id for t in picked] == ["done-late", "done-early"]
    assert [t.trip_id for t in select_conditioning(q, pool, 12, max_obs=1)] == ["done-late"]


def test_predict_trip_policies():
    P = scalar_params()
    q = _trip("q", 0, 5000.0, 3.0, links=(0,))
    pool = [_trip("o", 0, 100.0, 9.0, links=(0,))]
    assert predict_trip(q, P, pool, "prior").mean == pytest.approx(5.0)
    assert predict_trip(q, P, pool, "conditional").mean == pytest.approx(6.0, abs=1e-8)
    assert predict_trip(q, P, pool, "conditional", max_obs=0).mean == pytest.approx(5.0)
    with pytest.raises(ValidationError, match="policy"):
        predict_trip(q, P, pool, "oracle")
