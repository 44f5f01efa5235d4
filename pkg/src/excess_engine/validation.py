"""Cross-validation, residual diagnostics and the simulation suite."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .covariate import McmcConfig, fit_model, linear_predictor, nb_draw, predict_no_data
from .data_model import MortalitySeries
from .errors import DiagnosticsError, ValidationError
from .rng import child_rng

log = logging.getLogger(__name__)

LEVELS = (0.50, 0.80, 0.95)


@dataclass
class CvReport:
    """Cross-validation summary; biases are percentages, RMSE is of the rate
    per 1000 population."""

    scheme: str
    coverage: dict
    relative_bias: float
    abs_relative_bias: float
    rmse_x1000: float
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def as_dict(self):
        return {
            "scheme": self.scheme,
            "coverage": {f"{int(k * 100)}": v for k, v in self.coverage.items()},
            "relative_bias_pct": self.relative_bias,
            "abs_relative_bias_pct": self.abs_relative_bias,
            "rmse_x1000": self.rmse_x1000,
            "n_cells": len(self.records),
            "skipped": self.skipped,
        }


def score_cells(y, N, Y_draws):
    """Per-cell CV records from held-out counts ``y``, populations ``N`` and
    predictive draws ``Y_draws`` of shape ``(S, n)``."""
    y = np.asarray(y, dtype=float)
    N = np.asarray(N, dtype=float)
    Y_draws = np.asarray(Y_draws, dtype=float)
    y_hat = np.median(Y_draws, axis=0)
    out = []
    for i in range(len(y)):
        rec = {"y": y[i], "N": N[i], "r": y[i] / N[i], "r_hat": y_hat[i] / N[i]}
        for level in LEVELS:
            a = (1 - level) / 2
            lo, hi = np.quantile(Y_draws[:, i], [a, 1 - a])
            rec[f"hit{int(level * 100)}"] = bool(lo <= y[i] <= hi)
        out.append(rec)
    return out


def cv_metrics(records):
    """Coverage, relative bias (%), absolute relative bias (%) and RMSE of the
    rate (x1000) over a list of scored cells."""
    if not records:
        raise ValidationError("no scored cells")
    r = np.array([x["r"] for x in records])
    rh = np.array([x["r_hat"] for x in records])
    rel = (rh - r) / r
    coverage = {lv: float(np.mean([x[f"hit{int(lv * 100)}"] for x in records])) for lv in LEVELS}
    return (coverage, float(100 * rel.mean()), float(100 * np.abs(rel).mean()),
            float(1000 * np.sqrt(np.mean((rh - r) ** 2))))


def fingerprint(series_list):
    """Digest of every observed cell, used to prove held-out data is absent."""
    h = hashlib.sha256()
    for s in sorted(series_list, key=lambda x: x.country):
        for t in np.flatnonzero(s.observed):
            h.update(f"{s.country}:{t}:{int(s.counts[t])};".encode())
    return h.hexdigest()


def observed_cells(series_list):
    return {(s.country, int(t) + 1) for s in series_list for t in np.flatnonzero(s.observed)}


def _drop_month(series, t):
    obs = series.observed.copy()
    obs[t - 1] = False
    return MortalitySeries(series.country, series.counts, obs, series.tier,
                           series.completeness_scale, dict(series.annual_totals))


def run_cv(series, expected, panel, spec, populations, scheme="country", config=None,
           seed=0, warm=None, folds=None, predictor=None):
    """Leave-one-country-out or leave-one-month-out cross-validation.

    Parameters
    ----------
    populations : callable or PopulationTable
        ``populations(country)`` or ``populations.monthly(country)`` giving
        24 monthly populations.
    warm : PosteriorDraws, optional
        Full-data fit used to warm-start every fold.
    folds : list, optional
        Subset of fold keys (country codes or month indices).
    predictor : callable, optional
        Test hook ``predictor(fold_key, country, months) -> (S, n)`` draws
        that replaces the refit and prediction.
    """
    if scheme not in ("country", "month"):
        raise ValidationError(f"unknown CV scheme {scheme!r}")
    config = config or McmcConfig(warmup=300, draws=700)
    pop = populations if callable(populations) else populations.monthly
    fitted = [s for s in series if s.observed.any()]
    if scheme == "country":
        keys = folds if folds is not None else [s.country for s in fitted]
        if len(fitted) < 3:
            raise ValidationError("country CV needs at least 3 countries")
    else:
        months = sorted({t for _, t in observed_cells(fitted)})
        keys = folds if folds is not None else months
        if len(months) < 3:
            raise ValidationError("month CV needs at least 3 months")
    records, skipped = [], []
    for key in keys:
        if scheme == "country":
            train = [s for s in fitted if s.country != key]
            held = [(s.country, np.flatnonzero(s.observed) + 1) for s in fitted if s.country == key]
        else:
            train = [_drop_month(s, key) for s in fitted]
            held = [(s.country, np.array([key])) for s in fitted if s.observed[key - 1]]
        train_cells = observed_cells(train)
        for c, months in held:
            leaked = {(c, int(t)) for t in months} & train_cells
            if leaked:
                raise AssertionError(f"fold {key}: held-out cells present in training data")
        rng = child_rng(seed, "cv", scheme, key)
        if predictor is None:
            try:
                draws = fit_model(train, expected, panel, spec, config,
                                  seed=int(rng.integers(2**31)), init=warm)
            except DiagnosticsError as err:
                skipped.append({"fold": key, "reason": str(err).splitlines()[0]})
                log.warning("CV fold %s skipped: diagnostics failed", key)
                continue
        for c, months in held:
            idx = np.asarray(months) - 1
            if predictor is None:
                _, Y = predict_no_data(draws, expected, panel, c, rng)
                Yd = Y[:, idx]
            else:
                Yd = predictor(key, c, months)
            s = next(x for x in fitted if x.country == c)
            recs = score_cells(s.counts[idx], pop(c)[idx], Yd)
            for t, rec in zip(months, recs):
                rec.update(country=c, t=int(t), fold=key)
            records.extend(recs)
    coverage, rb, arb, rmse = cv_metrics(records)
    return CvReport(scheme, coverage, rb, arb, rmse, records, skipped)


def standardized_residual(y, E, theta, tau):
    """``(y - E theta) / sqrt(E theta (1 + E theta / tau))``."""
    mu = np.asarray(E, dtype=float) * np.asarray(theta, dtype=float)
    return (np.asarray(y, dtype=float) - mu) / np.sqrt(mu * (1.0 + mu / np.asarray(tau, dtype=float)))


def standardized_residuals(draws, series, expected, panel, region=None, in_sample=True):
    """Residual table rows ``(country, t, region, fitted, residual)``.

    In-sample residuals use the posterior median of ``theta`` for the fitted
    cell (overdispersion term included); otherwise the regression part only,
    which is the out-of-fold prediction for countries not in the fit.
    """
    region = region or {}
    rows = []
    pos = {cell: i for i, cell in enumerate(draws.cells)}
    for s in series:
        ed = expected[s.country]
        if in_sample:
            idx = [t for t in range(1, len(s.counts) + 1) if (s.country, t) in pos]
            theta = {t: float(np.median(np.exp(draws.u[:, pos[(s.country, t)]]))) for t in idx}
        else:
            eta = linear_predictor(draws, panel, s.country)
            idx = [int(t) + 1 for t in np.flatnonzero(s.observed)]
            theta = {t: float(np.median(np.exp(eta[:, t - 1]))) for t in idx}
        for t in idx:
            mu = ed.E_hat[t - 1] * theta[t]
            res = standardized_residual(s.counts[t - 1], ed.E_hat[t - 1], theta[t], ed.tau_hat[t - 1])
            rows.append((s.country, t, region.get(s.country, ""), float(mu), float(res)))
    return rows


# --------------------------------------------------------------------------
# simulation suite


@dataclass
class SimCheck:
    name: str
    value: float
    threshold: str
    passed: bool
    detail: dict = field(default_factory=dict)


def subnational_simulation(n_rep=50, seed=0, config=None):
    """Held-out national totals covered by 95% predictive intervals."""
    from .subnational import ShareConfig, fit_share_model, predict_national
    from .synthetic import subnational_world
    config = config or ShareConfig()
    hits = []
    for r in range(n_rep):
        rng = child_rng(seed, "subnational-sim", r)
        panel, totals = subnational_world(rng)
        post = fit_share_model(panel, config, seed=int(rng.integers(2**31)))
        Y = predict_national(post, panel.counts, rng)
        lo, hi = np.nanquantile(Y, [0.025, 0.975], axis=0)
        truth = totals[len(panel.hist_totals):]
        hits.append((lo <= truth) & (truth <= hi))
    hits = np.array(hits)
    return hits


def constrained_simulation(n_rep=5, seed=0, n_iter=20_000):
    """Months covered by 95% intervals and post-burn-in acceptance rates."""
    from .subnational import constrained_count_mcmc
    from .synthetic import constrained_world
    covered, accept = [], []
    for r in range(n_rep):
        rng = child_rng(seed, "constrained-sim", r)
        truth, total, z, anchors, _ = constrained_world(rng)
        res = constrained_count_mcmc(total, anchors, rng, z=z, logit_p_prior=(-1.5, 0.1),
                                     n_iter=n_iter)
        lo, hi = np.quantile(res.draws, [0.025, 0.975], axis=0)
        covered.append(int(((lo <= truth) & (truth <= hi)).sum()))
        accept.append(res.acceptance)
    return np.array(covered), np.array(accept)


def gamma_sweep(cvs=(0.02, 0.05, 0.1, 0.2), S=10_000, seed=0):
    """KS distance of the moment-matched gamma for lognormal samples."""
    from .gamma_uncertainty import gamma_fit_diagnostic, moment_match
    out = {}
    for cv in cvs:
        rng = child_rng(seed, "gamma-sweep", cv)
        sigma = np.sqrt(np.log1p(cv * cv))
        x = np.exp(np.log(1000.0) + sigma * rng.standard_normal(S))
        E, tau = moment_match(x)
        out[cv] = gamma_fit_diagnostic(x, E, tau).ks
    return out


def run_simulation_suite(seed=0, n_subnational=50, n_constrained=5, share_config=None):
    """Run the subnational, constrained-count and gamma simulations."""
    checks = []
    hits = subnational_simulation(n_subnational, seed, share_config)
    per_rep = hits.sum(axis=1)
    checks.append(SimCheck("subnational_coverage95", float(hits.mean()), ">= 0.88",
                           bool(hits.mean() >= 0.88)))
    checks.append(SimCheck("subnational_reps_5_of_6", float(np.mean(per_rep >= 5)), "> 0.5",
                           bool(np.mean(per_rep >= 5) > 0.5)))
    covered, accept = constrained_simulation(n_constrained, seed)
    med = float(np.median(covered))
    checks.append(SimCheck("constrained_months_covered_median", med, ">= 10", med >= 10,
                           {"per_rep": covered.tolist()}))
    checks.append(SimCheck("constrained_acceptance", float(np.median(accept)), "in [0.3, 0.6]",
                           bool(np.all((accept >= 0.3) & (accept <= 0.6))),
                           {"per_rep": accept.tolist()}))
    ks = gamma_sweep(seed=seed)
    checks.append(SimCheck("gamma_ks_max", max(ks.values()), "< 0.02", max(ks.values()) < 0.02,
                           {str(k): v for k, v in ks.items()}))
    return checks


def simulate_from_fit(draws, expected, panel, countries, rng):
    """Replace observed counts by draws from the fitted model (one draw)."""
    s = int(rng.integers(draws.n_draws))
    out = {}
    for c in countries:
        eta = linear_predictor(draws, panel, c)[s] + draws.sigma_eps[s] * rng.standard_normal(
            draws.design.T)
        ed = expected[c]
        out[c] = nb_draw(rng, ed.E_hat * np.exp(eta), ed.tau_hat)
    return out
