import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.stats import qmc

from probtte.errors import ValidationError
from probtte.inference import GaussianPrediction
from probtte.metrics import (
    MEAN_BASED, SAMPLE_BASED, coverage, crps_gaussian, point_metrics, score,
)


def gp(mean, var):
    return GaussianPrediction(mean, var, mean, 0.0, var / 2, var / 2)


def crps_integral(mean, std, truth, log2n=20, seed=0):
    """Monte Carlo estimate of the integral of (F(x) - 1{x >= truth})^2 over x.

    Importance sampling from a normal proposal covering both the
    predictive mass and the truth; scrambled Sobol points keep the error
    well below 1e-3.
    """
    center = 0.5 * (mean + truth)
    width = std + 0.5 * abs(truth - mean)
    u = qmc.Sobol(1, scramble=True, seed=seed).random_base2(log2n).ravel()
    x = center + width * stats.norm.ppf(u)
    gap = stats.norm.cdf(x, mean, std) - (x >= truth)
    return float(np.mean(gap ** 2 / stats.norm.pdf(x, center, width)))


def test_perfect_means_score_zero():
    preds = [gp(t, 4.0) for t in (100.0, 250.0, 700.0)]
    assert point_metrics(preds, [100.0, 250.0, 700.0]) == (0.0, 0.0, 0.0)


def test_point_arithmetic():
    rmse, mae, mape = point_metrics([gp(110.0, 25.0)], [100.0])
    assert (rmse, mae) == (10.0, 10.0)
    assert mape == pytest.approx(0.10)


def test_sample_based_mae_is_folded_normal():
    n = 200_000
    preds = [gp(500.0, 25.0)] * n
    _, mae, _ = point_metrics(preds, [500.0] * n, SAMPLE_BASED, seed=1)
    assert mae == pytest.approx(5.0 * math.sqrt(2.0 / math.pi), abs=0.03)
    again = point_metrics(preds[:100], [500.0] * 100, SAMPLE_BASED, seed=1)
    assert again == point_metrics(preds[:100], [500.0] * 100, SAMPLE_BASED, seed=1)


def test_point_metric_errors():
    with pytest.raises(ValidationError, match="length"):
        point_metrics([gp(1.0, 1.0)], [1.0, 2.0])
    with pytest.raises(ValidationError, match="zero"):
        point_metrics([gp(1.0, 1.0)], [0.0])
    with pytest.raises(ValidationError, match="mode"):
        point_metrics([gp(1.0, 1.0)], [1.0], mode="median")


def test_crps_reference_value():
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.23370, abs=1e-3)
    assert crps_integral(0.0, 1.0, 0.0) == pytest.approx(0.23370, abs=1e-3)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 5.0])
@pytest.mark.parametrize("z", [-3, -2, -1, 0, 1, 2, 3])
def test_crps_matches_integral(z, sigma):
    truth = 10.0 + z * sigma
    assert crps_gaussian(10.0, sigma, truth) == pytest.approx(crps_integral(10.0, sigma, truth), abs=1e-3)


def test_crps_limits_and_scaling():
    assert crps_gaussian(5.0, 1e-9, 7.0) == pytest.approx(2.0, abs=1e-8)
    assert crps_gaussian(0.0, 2.0, 0.0) == pytest.approx(2.0 * crps_gaussian(0.0, 1.0, 0.0), rel=1e-14)
    with pytest.raises(ValidationError):
        crps_gaussian(0.0, 0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 20))
def test_crps_minimized_at_truth(truth, sigma):
    grid = truth + sigma * np.linspace(-3, 3, 61)
    values = crps_gaussian(grid, sigma, truth)
    assert np.argmin(values) == 30
    assert np.all(values >= 0)


def test_coverage_extremes():
    preds = [gp(100.0, 9.0)] * 5
    for level in (0.1, 0.5, 0.9, 0.99):
        assert coverage(preds, [100.0] * 5, level) == 1.0
    assert coverage(preds, [130.0] * 5, 0.9) == 0.0
    with pytest.raises(ValidationError):
        coverage(preds, [100.0] * 5, 1.0)


def test_coverage_well_specified():
    rng = np.random.default_rng(0)
    means = rng.uniform(500, 2000, size=2000)
    sds = rng.uniform(20, 200, size=2000)
    truths = rng.normal(means, sds)
    cov = coverage([gp(m, s * s) for m, s in zip(means, sds)], truths, 0.9)
    assert 0.85 <= cov <= 0.95


def test_score_report():
    rep = score([gp(100.0, 25.0)], [110.0], scale=50.0, policy="prior")
    assert rep.mae == 10.0 and rep.n == 1 and rep.scoring_mode == MEAN_BASED
    assert rep.crps == pytest.approx(crps_gaussian(100.0, 5.0, 110.0))
    assert rep.crps_standardized == pytest.approx(rep.crps / 50.0)
    assert rep.coverage90 == 0.0
    assert set(rep.to_dict()) >= {"rmse", "mae", "mape", "crps", "coverage90", "n", "policy"}
