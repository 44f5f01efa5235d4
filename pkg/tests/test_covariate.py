import math
import warnings

import numpy as np
import pytest
from scipy import stats

from excess_engine.covariate import (
    Design, McmcConfig, ModelSpec, PosteriorDraws, apportion_annual_country, benchmark_factor,
    benchmark_partial, fit_model, nb_logpmf, pc_rate, predict_no_data, sum_to_zero_basis,
)
from excess_engine.data_model import CovariatePanel, MortalitySeries, Tier
from excess_engine.errors import DiagnosticsError, ValidationError
from excess_engine.gamma_uncertainty import ExpectedDistribution
from excess_engine.synthetic import covariate_world

T = 24


def fake_draws(S=4000, alpha=0.0, sigma_eps=1e-9, countries=("A",)):
    """Intercept-only posterior with fixed values."""
    panel = CovariatePanel(list(countries), [], np.zeros((len(countries), T, 0)), [],
                           np.zeros((len(countries), 0)))
    design = Design(ModelSpec([], []), panel)
    b = np.full((S, design.p), alpha)
    return PosteriorDraws(design, b, np.full(S, sigma_eps), np.zeros((S, 0)),
                          np.zeros((S, 0)), []), panel


def test_pc_prior_tail():
    rate = pc_rate(1.0, 0.01)
    assert rate == pytest.approx(-math.log(0.01))
    assert stats.expon(scale=1 / rate).sf(1.0) == pytest.approx(0.01, rel=1e-12)


def test_sum_to_zero_basis():
    C = sum_to_zero_basis(T)
    np.testing.assert_allclose(C.sum(axis=0), 0, atol=1e-13)
    np.testing.assert_allclose(C.T @ C, np.eye(T - 1), atol=1e-13)


def test_nb_converges_to_poisson():
    y = np.arange(0, 60)
    pois = stats.poisson.logpmf(y, 25.0)
    gaps = [np.max(np.abs(nb_logpmf(y, 25.0, tau) - pois)) for tau in (1e2, 1e4, 1e6)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-3


def test_predict_no_data_identity():
    draws, panel = fake_draws()
    ed = ExpectedDistribution("A", np.full(T, 500.0), np.full(T, 1e9))
    theta, Y = predict_no_data(draws, {"A": ed}, panel, "A", np.random.default_rng(0))
    np.testing.assert_allclose(theta, 1.0, atol=1e-6)
    mcse = np.sqrt(500.0 / Y.shape[0])
    assert np.all(np.abs(Y.mean(axis=0) - 500.0) < 4 * mcse)


def test_predict_no_data_scaling_and_overdispersion():
    draws, panel = fake_draws(S=20000, alpha=0.1, sigma_eps=0.1)
    base = ExpectedDistribution("A", np.full(T, 400.0), np.full(T, 50.0))
    double = ExpectedDistribution("A", np.full(T, 800.0), np.full(T, 50.0))
    _, Y1 = predict_no_data(draws, base, panel, "A", np.random.default_rng(1))
    _, Y2 = predict_no_data(draws, double, panel, "A", np.random.default_rng(1))
    ratio = Y2.mean() / Y1.mean()
    assert ratio == pytest.approx(2.0, rel=0.01)
    assert np.all(Y1.var(axis=0) >= Y1.mean(axis=0))


def test_benchmark_factor_arithmetic():
    assert benchmark_factor(1000, 800, 1.1) == pytest.approx(1000 / 880, rel=1e-15)
    assert benchmark_factor(1000, 800, 1.1) == pytest.approx(1.13636, abs=1e-5)
    assert benchmark_factor(880, 800, 1.1) == pytest.approx(1.0, rel=1e-15)


def _partial(y_last=900):
    counts = np.zeros(T, dtype=np.int64)
    counts[:10] = 1000
    counts[9] = y_last
    obs = np.zeros(T, dtype=bool)
    obs[:10] = True
    return MortalitySeries("A", counts, obs, Tier.PARTIAL)


def test_benchmark_partial_reproduces_last_month():
    draws, panel = fake_draws(S=500, alpha=0.2, sigma_eps=0.05)
    ed = ExpectedDistribution("A", np.full(T, 800.0), np.full(T, 100.0))
    s = _partial()
    theta, f, Y = benchmark_partial(draws, s, {"A": ed}, panel, np.random.default_rng(2))
    # the regression mean at the last observed month times f is the observed count
    reg = np.exp(draws.b[:, 0])
    np.testing.assert_allclose(f * ed.E_hat[9] * reg, 900.0, rtol=1e-12)
    np.testing.assert_array_equal(Y[:, :10], np.tile(s.counts[:10], (500, 1)))
    assert np.all(Y[:, 10:] >= 0)


def test_benchmark_partial_zero_last_count():
    draws, panel = fake_draws(S=50)
    ed = ExpectedDistribution("A", np.full(T, 800.0), np.full(T, 100.0))
    with pytest.warns(UserWarning, match="not benchmarked"):
        _, f, _ = benchmark_partial(draws, _partial(0), ed, panel, np.random.default_rng(3))
    np.testing.assert_array_equal(f, 1.0)


def test_apportion_equal_shares():
    draws, panel = fake_draws(S=4000)
    ed = ExpectedDistribution("A", np.full(T, 1000.0), np.full(T, 1e6))
    Y = apportion_annual_country(draws, [12000, 6000], ed, panel, "A", np.random.default_rng(4))
    np.testing.assert_array_equal(Y[:, :12].sum(axis=1), 12000)
    np.testing.assert_array_equal(Y[:, 12:].sum(axis=1), 6000)
    np.testing.assert_allclose(Y[:, :12].mean(axis=0) / 12000, 1 / 12, rtol=0.01)


def test_apportion_double_weight_and_zero():
    draws, panel = fake_draws(S=4000)
    E = np.full(T, 1000.0)
    E[0] = 2000.0
    ed = ExpectedDistribution("A", E, np.full(T, 1e6))
    Y = apportion_annual_country(draws, {0: 13000, 1: 0}, ed, panel, "A", np.random.default_rng(5))
    assert Y[:, 0].mean() / 13000 == pytest.approx(2 / 13, rel=0.01)
    assert not Y[:, 12:].any()
    with pytest.raises(ValidationError):
        apportion_annual_country(draws, [-1], ed, panel, "A", np.random.default_rng(5))


def test_missing_covariate_after_imputation():
    draws, panel = fake_draws()
    spec = ModelSpec(["x"], [])
    bad = CovariatePanel(["A"], ["x"], np.full((1, T, 1), np.nan), [], np.zeros((1, 0)))
    with pytest.raises(ValidationError):
        Design(spec, bad).rows(bad, "A")
    with pytest.raises(ValidationError, match="not in panel"):
        Design(ModelSpec(["y"], []), bad)


@pytest.fixture(scope="module")
def small_fit():
    rng = np.random.default_rng(21)
    series, expected, panel, spec, truth = covariate_world(rng, n_countries=20)
    cfg = McmcConfig(chains=2, warmup=300, draws=600, output_draws=600, check=False)
    return fit_model(series, expected, panel, spec, cfg, seed=3), truth


def test_fit_paths_sum_to_zero(small_fit):
    draws, _ = small_fit
    assert np.max(np.abs(draws.paths.sum(axis=2))) < 1e-8
    assert draws.b.shape[0] == 600


def test_fit_recovers_fixed_effects(small_fit):
    draws, truth = small_fit
    summary = draws.fixed_summary()
    lo, hi = summary["alpha"][1:]
    assert lo - 0.05 <= truth.alpha <= hi + 0.05
    for name, g in truth.gamma.items():
        _, lo, hi = summary[name]
        assert lo - 0.05 <= g <= hi + 0.05


def test_zero_signal_concentrates_at_zero():
    rng = np.random.default_rng(22)
    series, expected, panel, spec, _ = covariate_world(rng, n_countries=15, gamma_tv=(0.0,),
                                                       gamma_const=())
    cfg = McmcConfig(chains=2, warmup=300, draws=500, output_draws=500, check=False)
    draws = fit_model(series, expected, panel, spec, cfg, seed=4)
    g = draws.gamma[:, 0]
    assert abs(g.mean()) < 2 * g.std()


def test_diagnostics_gate_raises():
    rng = np.random.default_rng(23)
    series, expected, panel, spec, _ = covariate_world(rng, n_countries=6)
    cfg = McmcConfig(chains=2, warmup=5, draws=20, output_draws=20, min_ess=10_000)
    with pytest.raises(DiagnosticsError) as info:
        fit_model(series, expected, panel, spec, cfg, seed=1)
    assert info.value.table


def test_deterministic_given_seed():
    rng = np.random.default_rng(24)
    series, expected, panel, spec, _ = covariate_world(rng, n_countries=5)
    cfg = McmcConfig(chains=1, warmup=20, draws=40, output_draws=40, check=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = fit_model(series, expected, panel, spec, cfg, seed=9)
        b = fit_model(series, expected, panel, spec, cfg, seed=9)
    np.testing.assert_array_equal(a.b, b.b)
