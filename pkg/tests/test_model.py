import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probtte.data import Batch, Trip, subsample
from probtte.errors import NumericalError, ValidationError
from probtte.model import (
    ModelParams, batch_gaussian, diag_d, grad_nll, init_params, mu_vector, nll, nll_dense,
    softplus, trip_cov,
)

from conftest import dense_nll, kron_joint, random_batch, random_params


def one_link_batch(tau, k=0):
    return Batch(0, 0, [subsample(Trip("t", 0, 0.0, [0], [(1, tau)]), k)])


def test_mu_identity_factor():
    P = ModelParams(np.eye(2), np.zeros((2, 1)), np.array([2.0, 3.0]), np.zeros(1))
    np.testing.assert_array_equal(mu_vector(P, 0), [2.0, 3.0])
    P.w_mu[0] = 0.0
    np.testing.assert_array_equal(mu_vector(P, 0), [0.0, 0.0])


def test_mu_matches_loop(rng):
    P = random_params(rng, 5, 3, 2)
    loop = [sum(P.L[0, i, j] * P.w_mu[0, j] for j in range(3)) for i in range(5)]
    np.testing.assert_allclose(mu_vector(P, 0), loop, rtol=0, atol=1e-14)


def test_diag_softplus_values(rng):
    P = ModelParams(np.zeros((3, 1)), np.ones((3, 1)), np.zeros(1), np.zeros(1))
    np.testing.assert_allclose(diag_d(P, 0), math.log(2.0), atol=1e-15)
    P.w_d[0] = -100.0
    d = diag_d(P, 0)
    assert np.all(d > 0)
    np.testing.assert_allclose(d, math.exp(-100.0), rtol=1e-12)
    Q = random_params(rng, 6, 2, 3)
    z = Q.H[0] @ Q.w_d[0]
    np.testing.assert_allclose(diag_d(Q, 0), [math.log1p(math.exp(v)) for v in z], rtol=0, atol=1e-14)


def test_softplus_is_finite_everywhere():
    x = np.array([-1e6, -800.0, -40.0, 0.0, 40.0, 800.0, 1e6])
    y = softplus(x)
    assert np.all(np.isfinite(y)) and np.all(y >= 0)
    assert y[-1] == 1e6


def test_trip_cov_cases(rng):
    P = ModelParams(np.eye(4)[:, :4], np.zeros((4, 1)), np.zeros(4), np.zeros(1))
    assert trip_cov([0, 1], [2, 3], P, 0) == 0.0
    Q = random_params(rng, 6, 3, 2, scale=2.0)
    assert trip_cov([4], [4], Q, 0) == pytest.approx(4.0 * Q.L[0, 4] @ Q.L[0, 4], rel=1e-14)
    a, b = [0, 2, 5], [1, 2]
    sigma = Q.L[0] @ Q.L[0].T
    expect = 4.0 * sum(sigma[i, j] for i in a for j in b)
    assert trip_cov(a, b, Q, 0) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValidationError):
        trip_cov([9], [0], Q, 0)


def test_single_link_reduction():
    P = ModelParams(np.array([[2.0, 1.0]]), np.array([[1.0, -1.0]]), np.array([1.5, 0.0]),
                    np.array([0.3, 0.1]))
    g = batch_gaussian(one_link_batch(10.0), P)
    np.testing.assert_allclose(g.mean, [3.0])
    np.testing.assert_allclose(g.V, [[2.0, 1.0]])
    expect = 2.0 + softplus(0.2)
    np.testing.assert_allclose(g.lambda_blocks[0], [[expect]], atol=2e-9)


def test_nested_block_shares_prefix_noise():
    P = ModelParams(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(1), np.zeros(1),
                    diag_override=np.array([1.0, 2.0, 4.0]))
    t = Trip("t", 0, 0.0, [2, 0, 1], [(2, 10.0), (3, 16.0)])
    blk = batch_gaussian(Batch(0, 0, [subsample(t, 1)]), P).lambda_blocks[0]
    # rows: full trip, then the 2-link prefix {2, 0}
    assert blk[0, 1] == pytest.approx(4.0 + 1.0)
    assert blk[0, 0] == pytest.approx(7.0) and blk[1, 1] == pytest.approx(5.0)


def test_batch_gaussian_matches_kronecker_oracle(rng):
    for _ in range(10):
        P = random_params(rng, 20, 3, 4)
        batch = random_batch(rng, 20, 4, 2)
        g = batch_gaussian(batch, P)
        mean, cov = kron_joint(batch, P)
        np.testing.assert_allclose(g.mean, mean, atol=1e-12)
        np.testing.assert_allclose(g.dense_cov(), cov, atol=1e-12)


def test_scalar_nll():
    P = ModelParams(np.ones((1, 1)), np.ones((1, 1)), np.ones(1), np.ones(1))
    var = 1.0 + 1.0 + math.log1p(math.e)
    expect = 0.5 * math.log(2 * math.pi * var)  # residual is zero
    assert nll(one_link_batch(1.0), P) == pytest.approx(expect, rel=1e-9)


def test_shift_invariance():
    P = ModelParams(np.array([[2.0]]), np.array([[0.5]]), np.array([3.0]), np.array([0.2]))
    base = nll(one_link_batch(7.5), P)
    c = 4.0
    Q = P.copy()
    Q.w_mu[0] += c / 2.0
    assert nll(one_link_batch(7.5 + c), Q) == pytest.approx(base, rel=1e-12)


def test_scale_reports_seconds(rng):
    P = random_params(rng, 8, 2, 2, scale=1.0)
    batch = random_batch(rng, 8, 3, 2)
    Q = P.copy()
    Q.scale = 7.0
    # scaled targets under a scaled model: density changes by the Jacobian only
    scaled = Batch(0, 0, [subsample(Trip(g.parent.trip_id, 0, 0.0, g.parent.links,
                                          [(n, 7.0 * t) for n, t in g.parent.checkpoints]), 2)
                          for g in batch.groups])
    assert nll(scaled, Q) == pytest.approx(nll(batch, P) + scaled.m * math.log(7.0), rel=1e-10)
    assert nll(scaled, Q) == pytest.approx(dense_nll(scaled, Q), rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_nll_matches_dense_density(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 31))
    r_L, r_H = (int(v) for v in rng.integers(1, 6, size=2))
    P = random_params(rng, n, r_L, r_H, scale=float(rng.uniform(0.5, 30.0)))
    batch = random_batch(rng, n, int(rng.integers(1, 9)), int(rng.integers(0, 3)))
    ref = dense_nll(batch, P)
    assert abs(nll(batch, P) - ref) / max(1.0, abs(ref)) < 1e-8
    assert abs(nll_dense(batch, P) - ref) / max(1.0, abs(ref)) < 1e-8


def test_stationary_mean_gradient():
    # tau equals the mean, so the w_mu gradient vanishes
    P = ModelParams(np.array([[1.5]]), np.array([[0.4]]), np.array([2.0]), np.array([0.1]))
    _, g = grad_nll(one_link_batch(3.0), P)
    assert abs(g.w_mu[0]) < 1e-14


def finite_difference(batch, P, name, index, h=1e-4):
    plus, minus = P.copy(), P.copy()
    getattr(plus, name)[(0,) + index] += h
    getattr(minus, name)[(0,) + index] -= h
    return (nll(batch, plus) - nll(batch, minus)) / (2 * h)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 12))
    P = random_params(rng, n, 3, 2, scale=float(rng.uniform(1.0, 20.0)))
    batch = random_batch(rng, n, 3, 2)
    _, g = grad_nll(batch, P)
    for name in ("L", "H", "w_mu", "w_d"):
        analytic = getattr(g, name)
        for index in np.ndindex(*analytic.shape):
            fd = finite_difference(batch, P, name, index)
            a = analytic[index]
            assert abs(a - fd) <= max(1e-4 * abs(fd), 1e-7), (name, index, a, fd)


def test_absent_link_gradient_is_zero(rng):
    P = random_params(rng, 10, 3, 3)
    t = Trip("t", 0, 0.0, [0, 1, 2, 3], [(2, 20.0), (4, 45.0)])
    _, g = grad_nll(Batch(0, 0, [subsample(t, 1)]), P)
    assert np.all(g.L[5:] == 0.0) and np.all(g.H[5:] == 0.0)


def test_override_freezes_diag_weights(rng):
    P = random_params(rng, 5, 2, 2)
    P.diag_override = np.full((1, 5), 0.3)
    _, g = grad_nll(random_batch(rng, 5, 2, 1), P)
    assert np.all(g.w_d == 0.0)


def test_invalid_and_non_finite_params():
    with pytest.raises(ValidationError, match="positive"):
        ModelParams(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros(1),
                    diag_override=np.array([-5.0]))
    P = ModelParams(np.full((1, 1), np.nan), np.zeros((1, 1)), np.zeros(1), np.zeros(1))
    with pytest.raises(NumericalError):
        nll(one_link_batch(1.0), P)


def test_init_param_shapes_and_seed():
    a = init_params(7, 3, 4, 2, seed=5)
    b = init_params(7, 3, 4, 2, seed=5)
    assert a.L.shape == (3, 7, 4) and a.H.shape == (3, 7, 2)
    assert a.w_mu.shape == (3, 4) and a.w_d.shape == (3, 2)
    np.testing.assert_array_equal(a.L, b.L)
    assert not np.array_equal(a.L, init_params(7, 3, 4, 2, seed=6).L)
    with pytest.raises(ValidationError):
        a.check_bucket(3)
