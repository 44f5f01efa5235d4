"""Gamma summaries of the expected-deaths predictive distribution.

Log-scale predictions are sampled, exponentiated and summarized by a gamma
distribution with matching mean and variance. The variance uses the
unbiased convention (divide by S - 1), so three samples {80, 100, 120}
give variance 400 and shape 25.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data_model import N_MONTHS, Granularity
from .rng import child_rng
from .seasonal import month_shares_batch

DEFAULT_SAMPLES = 10_000
EPS = 1e-12
TAU_MAX = 1e8


@dataclass
class ExpectedDistribution:
    """Per-month gamma parameters for one country.

    ``E_hat`` is the gamma mean and ``tau_hat`` its shape; the rate is
    ``tau_hat / E_hat`` and the variance ``E_hat**2 / tau_hat``.
    """

    country: str
    E_hat: np.ndarray
    tau_hat: np.ndarray

    def __post_init__(self):
        self.E_hat = np.asarray(self.E_hat, dtype=float)
        self.tau_hat = np.asarray(self.tau_hat, dtype=float)
        if self.E_hat.shape != self.tau_hat.shape:
            raise ValueError("E_hat and tau_hat must have the same shape")
        if np.any(~(self.E_hat > 0)) or np.any(~(self.tau_hat > 0)):
            raise ValueError(f"{self.country}: gamma parameters must be positive")

    @property
    def rate(self):
        return self.tau_hat / self.E_hat

    @property
    def variance(self):
        return self.E_hat**2 / self.tau_hat

    def sample(self, rng, size):
        """Draws of E with shape ``(size, n_months)``."""
        return rng.gamma(self.tau_hat, 1.0 / self.rate, size=(size, len(self.E_hat)))


def moment_match(samples, axis=0):
    """Gamma (mean, shape) matching the sample mean and unbiased variance."""
    x = np.asarray(samples, dtype=float)
    m = x.mean(axis=axis)
    v = x.var(axis=axis, ddof=1)
    degenerate = v < EPS * m**2
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(degenerate, TAU_MAX, m**2 / np.where(degenerate, 1.0, v))
    tau = np.minimum(tau, TAU_MAX)
    if np.ndim(m) == 0:
        return float(m), float(tau)
    return m, tau


def gamma_from_monthly(eta_hat, sigma_hat, S=DEFAULT_SAMPLES, rng=None, samples=None):
    """Gamma summary of ``exp(N(eta_hat, sigma_hat**2))``.

    ``eta_hat`` and ``sigma_hat`` may be scalars or arrays of months. Passing
    ``samples`` skips the sampler and moment-matches them directly.
    """
    if samples is None:
        if S < 1000:
            raise ValueError("at least 1000 samples are required")
        sigma = np.asarray(sigma_hat, dtype=float)
        if np.any(sigma < 0):
            raise ValueError("sigma_hat must be non-negative")
        eta = np.asarray(eta_hat, dtype=float)
        rng = rng if rng is not None else np.random.default_rng()
        z = rng.standard_normal((S,) + np.shape(eta))
        samples = np.exp(eta + sigma * z)
    return moment_match(samples, axis=0)


def annual_month_samples(eta_hat, sigma_hat, model, temps, S=DEFAULT_SAMPLES, rng=None):
    """Samples of monthly expected deaths for one annual-only year: ``(S, 12)``."""
    rng = rng if rng is not None else np.random.default_rng()
    annual = np.exp(eta_hat + sigma_hat * rng.standard_normal(S))
    betas = model.beta + model.sd * rng.standard_normal(S)
    return annual[:, None] * month_shares_batch(betas, temps)


def gamma_from_annual(eta_hat, sigma_hat, model, temps, S=DEFAULT_SAMPLES, rng=None):
    """Split sampled annual expected totals into months with sampled shares
    and moment-match each month separately."""
    if S < 1000:
        raise ValueError("at least 1000 samples are required")
    if len(temps) != 12:
        raise ValueError("12 monthly temperatures are required")
    return moment_match(annual_month_samples(eta_hat, sigma_hat, model, temps, S, rng), axis=0)


@dataclass
class GammaFitReport:
    ks: float
    p_value: float
    n: int
    flagged: bool


def gamma_fit_diagnostic(samples, E_hat, tau_hat, threshold=0.05):
    """Kolmogorov-Smirnov distance between samples and the fitted gamma."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 1000:
        raise ValueError("at least 1000 samples are required")
    res = stats.kstest(x, stats.gamma(a=tau_hat, scale=E_hat / tau_hat).cdf)
    return GammaFitReport(float(res.statistic), float(res.pvalue), x.size,
                          bool(res.statistic > threshold))


def expected_distribution(fit, seed, S=DEFAULT_SAMPLES, model=None, temps=None):
    """Build the 24-month gamma summary from an expected-deaths fit.

    For annual fits ``model`` (temperature model) and ``temps`` (24 monthly
    temperatures for the pandemic years) are required.
    """
    rng = child_rng(seed, "gamma", fit.country)
    if fit.granularity is Granularity.MONTHLY:
        E, tau = gamma_from_monthly(fit.eta_hat[:N_MONTHS], fit.sigma_hat[:N_MONTHS], S, rng)
    else:
        if model is None or temps is None:
            raise ValueError(f"{fit.country}: annual fit needs a temperature model and temperatures")
        temps = np.asarray(temps, dtype=float)
        parts = [gamma_from_annual(fit.eta_hat[v], fit.sigma_hat[v], model,
                                   temps[12 * v:12 * (v + 1)], S, rng) for v in range(2)]
        E = np.concatenate([p[0] for p in parts])
        tau = np.concatenate([p[1] for p in parts])
    return ExpectedDistribution(fit.country, E, tau)
