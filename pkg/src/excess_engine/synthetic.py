"""Synthetic data generators used by simulation checks and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariate import ModelSpec, nb_draw
from .data_model import N_MONTHS, CovariatePanel, MortalitySeries, Tier
from .gamma_uncertainty import ExpectedDistribution


@dataclass
class CovariateTruth:
    alpha: float
    gamma: dict
    paths: dict
    sigma_eps: float
    log_theta: dict


def smooth_series(rng, T=N_MONTHS, scale=1.0):
    """Standardized-looking smooth series: random level plus a slow wave."""
    t = np.arange(T)
    phase = rng.uniform(0, 2 * np.pi)
    return rng.normal(0, 1) + 0.5 * np.sin(2 * np.pi * t / T + phase) * scale


def rw2_path(rng, T=N_MONTHS, amplitude=0.05):
    """Smooth zero-sum path."""
    t = np.arange(T)
    b = amplitude * np.sin(2 * np.pi * t / T + rng.uniform(0, 2 * np.pi))
    return b - b.mean()


def covariate_world(rng, n_countries=40, alpha=0.1, gamma_tv=(0.08, -0.05),
                    gamma_const=(0.06,), sigma_eps=0.1, path_amplitude=0.05,
                    E_range=(2000.0, 40000.0), tau_range=(200.0, 3000.0)):
    """Countries fully observed under the covariate model.

    Returns ``(series, expected, panel, spec, truth)``.
    """
    T = N_MONTHS
    countries = [f"S{i:02d}" for i in range(n_countries)]
    tv_names = [f"x{j + 1}" for j in range(len(gamma_tv))]
    const_names = [f"z{g + 1}" for g in range(len(gamma_const))]
    X = np.stack([np.column_stack([smooth_series(rng) for _ in tv_names])
                  for _ in countries]) if tv_names else np.zeros((n_countries, T, 0))
    Z = rng.normal(0, 1, size=(n_countries, len(const_names)))
    panel = CovariatePanel(countries, tv_names, X, const_names, Z)
    paths = {n: rw2_path(rng, T, path_amplitude) for n in tv_names}
    series, expected, log_theta = [], {}, {}
    for i, c in enumerate(countries):
        eta = np.full(T, alpha, dtype=float)
        for j, n in enumerate(tv_names):
            eta += (gamma_tv[j] + paths[n]) * X[i, :, j]
        for g in range(len(const_names)):
            eta += gamma_const[g] * Z[i, g]
        eta += sigma_eps * rng.standard_normal(T)
        E = np.exp(rng.uniform(np.log(E_range[0]), np.log(E_range[1]))) * (
            1 + 0.1 * np.cos(2 * np.pi * np.arange(T) / 12))
        tau = np.full(T, rng.uniform(*tau_range))
        y = nb_draw(rng, E * np.exp(eta), tau)
        expected[c] = ExpectedDistribution(c, E, tau)
        series.append(MortalitySeries(c, y.astype(np.int64), np.ones(T, bool), Tier.FULL))
        log_theta[c] = eta
    gamma = {n: g for n, g in zip(tv_names, gamma_tv)}
    gamma.update({n: g for n, g in zip(const_names, gamma_const)})
    truth = CovariateTruth(alpha, gamma, paths, sigma_eps, log_theta)
    return series, expected, panel, ModelSpec(tv_names, const_names), truth


SIM_ALPHAS = (-0.25, -1.3, -1.15, -2.5, 1.75)


def subnational_world(rng, alphas=SIM_ALPHAS, sigma_e=0.5, n_months=24, n_missing=20,
                      n_fit=18):
    """Region panel from the multinomial share model.

    National totals follow ``1000 + 0.1 (1 + sin W_t)`` with ``W_t`` stepping
    by pi/6, rounded to integers. ``n_missing`` region-months are removed at
    random. Returns ``(panel, truth_totals)`` where the panel's historic part
    is months ``1..n_fit`` and its pandemic part the rest.
    """
    from .subnational import SubnationalPanel
    alphas = np.asarray(alphas, dtype=float)
    K = len(alphas)
    W = np.arange(n_months) * np.pi / 6
    totals = np.round(1000 + 0.1 * (1 + np.sin(W))).astype(np.int64)
    counts = np.empty((n_months, K))
    for t in range(n_months):
        a = np.append(alphas + sigma_e * rng.standard_normal(), 0.0)
        p = np.exp(a - a.max())
        counts[t] = rng.multinomial(totals[t], p / p.sum())[:K]
    drop = rng.choice(n_months * K, size=n_missing, replace=False)
    counts.reshape(-1)[drop] = np.nan
    panel = SubnationalPanel("SIM", [f"R{k + 1}" for k in range(K)], counts[:n_fit],
                             totals[:n_fit].astype(float), counts[n_fit:])
    return panel, totals


def constrained_world(rng, n=12, lo=5000, hi=20000, logit_mean=-1.5, logit_var=0.1,
                      anchor_var=0.05):
    """Annual total, surveillance counts and anchors for the count sampler.

    Second arguments of the normal noise terms are variances.
    Returns ``(truth, total, z, anchors, p)``.
    """
    truth = rng.integers(lo, hi + 1, size=n)
    p = 1.0 / (1.0 + np.exp(-(logit_mean + np.sqrt(logit_var) * rng.standard_normal(n))))
    z = np.round(truth * p).astype(np.int64)
    anchors = truth + np.sqrt(anchor_var * truth) * rng.standard_normal(n)
    return truth, int(truth.sum()), z, anchors, p


# --------------------------------------------------------------------------
# end-to-end world written as input files

WORLD_PLAN = (("full", 16), ("partial", 4), ("share", 2), ("annual", 3), ("constrained", 1),
              ("nodata", 4))
WORLD_TRUTH = {"alpha": 0.1, "x1": 0.08, "x2": -0.05, "z1": 0.06, "hi": -0.04,
               "sigma_eps": 0.08, "path_amplitude": 0.05}


def _codes(n):
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    return [f"Q{letters[i // 26]}{letters[i % 26]}" for i in range(n)]


def _write_csv(path, header, rows):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_world(out_dir, seed=1, plan=WORLD_PLAN, truth=WORLD_TRUTH):
    """Write a synthetic input set whose pandemic data follow the full model.

    Histories come from a negative-binomial baseline with a temperature
    seasonality. Expected numbers are then computed by the package's own
    expected and gamma stages, and pandemic counts are drawn from
    ``NegBin(E_hat theta, tau_hat)`` with ``log theta`` from the covariate
    model on the standardized covariates the pipeline will see, so the
    covariate model is correctly specified by construction.

    Returns ``(config_path, truth)`` where ``truth`` holds the tier plan and
    the true pandemic counts per country.
    """
    from pathlib import Path

    from .config import load_config
    from .data_model import PANDEMIC_YEARS, REGIONS, standardize_covariates
    from .pipeline import load_inputs, stage_expected, stage_gamma, stage_seasonal
    from .rng import child_rng

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = child_rng(seed, "world")
    kinds = [k for k, n in plan for _ in range(n)]
    codes = _codes(len(kinds))
    kind = dict(zip(codes, kinds))
    T = N_MONTHS
    hist_years = list(range(2015, 2020))

    region = {c: REGIONS[i % len(REGIONS)] for i, c in enumerate(codes)}
    income = {c: "High" if i % 3 == 0 else "LowMiddle" for i, c in enumerate(codes)}
    _write_csv(out / "region.csv", ["iso3", "who_region", "income_group"],
               [[c, region[c], income[c]] for c in codes])
    base = {c: float(np.exp(rng.uniform(np.log(2000), np.log(40000)))) for c in codes}
    _write_csv(out / "population.csv", ["iso3", "year", "population"],
               [[c, y, int(base[c] * 12 / 0.008 * (1 + 0.01 * (y - 2019)))]
                for c in codes for y in range(2019, 2023)])

    temps = {}
    rows = []
    for c in codes:
        mean, amp = rng.uniform(0, 25), rng.uniform(2, 12) * rng.choice([-1, 1])
        for y in range(2010, 2022):
            for m in range(1, 13):
                v = mean + amp * np.cos(2 * np.pi * (m - 1) / 12) + 0.3 * rng.standard_normal()
                temps[(c, y, m)] = round(float(v), 3)
                rows.append([c, y, m, temps[(c, y, m)]])
    _write_csv(out / "temperature.csv", ["iso3", "year", "month", "temp_c"], rows)

    # historic mortality: NB baseline with temperature seasonality
    mort = []
    annual_history = {c for c in codes if kind[c] == "annual"}
    annual_history = {sorted(annual_history)[0]} if annual_history else set()
    hist_monthly = {}
    for c in codes:
        if c in annual_history:
            for y in range(2008, 2020):
                mu = 12 * base[c] * np.exp(0.01 * (y - 2015))
                mort.append([c, y, "", int(nb_draw(rng, mu, 300.0 / 12))])
            continue
        for y in hist_years:
            for m in range(1, 13):
                mu = base[c] * np.exp(0.01 * (y - 2015) - 0.02 * (temps[(c, y, m)] - 12))
                d = int(nb_draw(rng, mu, 300.0))
                hist_monthly[(c, y, m)] = d
                mort.append([c, y, m, d])

    # covariates (raw)
    cov_rows = []
    raw_x = {}
    for c in codes:
        lvl = rng.normal(0, 1, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        for t in range(T):
            y, m = PANDEMIC_YEARS[t // 12], t % 12 + 1
            x = lvl + 0.5 * np.sin(2 * np.pi * t / T + ph)
            raw_x[(c, t)] = x
            cov_rows += [[c, y, m, "x1", round(float(x[0]), 6)],
                         [c, y, m, "x2", round(float(x[1]), 6)]]
        cov_rows += [[c, "", "", "z1", round(float(rng.normal(0, 1)), 6)],
                     [c, "", "", "hi", 1 if income[c] == "High" else 0]]
    _write_csv(out / "covariates.csv", ["iso3", "year", "month", "name", "value"], cov_rows)

    # observation plan
    t1 = {c: int(rng.integers(12, 21)) for c in codes if kind[c] == "partial"}
    observed = {}
    for c in codes:
        obs = np.zeros(T, dtype=bool)
        if kind[c] == "full":
            obs[:] = True
        elif kind[c] == "partial":
            obs[:t1[c]] = True
        observed[c] = obs

    _write_csv(out / "mortality.csv", ["iso3", "year", "month", "deaths"], mort)
    cfg_text = f'[run]\nseed = {int(seed)}\ndraws = 1000\n'
    (out / "run.toml").write_text(cfg_text)
    # files needed before the expected stage can run
    _write_csv(out / "subnational.csv", ["iso3", "region_id", "year", "month", "deaths"], [])
    cfg = load_config(out / "run.toml")
    inputs = load_inputs(cfg)
    fits = stage_expected(inputs)
    expected = stage_gamma(inputs, fits, stage_seasonal(inputs))

    panel = standardize_covariates(inputs.covariates, inputs.region,
                                   fitting_mask=np.array([observed[c] for c in inputs.covariates.countries]))
    paths = {n: rw2_path(rng, T, truth["path_amplitude"]) for n in ("x1", "x2")}
    Y = {}
    for c in codes:
        eta = np.full(T, truth["alpha"])
        for n in ("x1", "x2"):
            eta += (truth[n] + paths[n]) * panel.tv(c, n)
        for n in ("z1", "hi"):
            eta += truth[n] * panel.const(c, n)
        eta += truth["sigma_eps"] * rng.standard_normal(T)
        ed = expected[c]
        Y[c] = nb_draw(rng, ed.E_hat * np.exp(eta), ed.tau_hat).astype(np.int64)

    sub_rows = []
    for c in codes:
        if kind[c] in ("full", "partial"):
            for t in np.flatnonzero(observed[c]):
                mort.append([c, PANDEMIC_YEARS[t // 12], t % 12 + 1, int(Y[c][t])])
        elif kind[c] in ("annual", "constrained"):
            for v, y in enumerate(PANDEMIC_YEARS):
                mort.append([c, y, "", int(Y[c][12 * v:12 * (v + 1)].sum())])
    share_codes = [c for c in codes if kind[c] == "share"]
    for i, c in enumerate(share_codes):
        alphas = np.array([-0.5, -1.2, -1.0, -2.0])
        months = [(y, m) for y in (2018, 2019) for m in range(1, 13)]
        totals = [hist_monthly[(c, y, m)] for y, m in months] + list(Y[c])
        keys = months + [(PANDEMIC_YEARS[t // 12], t % 12 + 1) for t in range(T)]
        for j, ((y, m), tot) in enumerate(zip(keys, totals)):
            a = np.append(alphas + 0.3 * rng.standard_normal(), 0.0)
            p = np.exp(a - a.max())
            split = rng.multinomial(int(tot), p / p.sum())[:len(alphas)]
            sparse_tail = i == 0 and j >= len(totals) - 4
            for k, d in enumerate(split):
                if sparse_tail and k > 0:
                    continue
                if not sparse_tail and k > 0 and rng.random() < 0.05:
                    continue
                sub_rows.append([c, f"R{k + 1}", y, m, int(d)])
    for c in codes:
        if kind[c] != "constrained":
            continue
        p = 1 / (1 + np.exp(-(-1.5 + np.sqrt(0.1) * rng.standard_normal(T))))
        z = rng.binomial(Y[c], p)
        for t in range(T):
            sub_rows.append([c, "DSP", PANDEMIC_YEARS[t // 12], t % 12 + 1, int(z[t])])
    _write_csv(out / "mortality.csv", ["iso3", "year", "month", "deaths"], mort)
    _write_csv(out / "subnational.csv", ["iso3", "region_id", "year", "month", "deaths"], sub_rows)
    rep = []
    for c in codes:
        excess = np.maximum(Y[c] - expected[c].E_hat, 0)
        rep += [[c, PANDEMIC_YEARS[t // 12], t % 12 + 1, int(round(0.4 * excess[t]))]
                for t in range(T)]
    _write_csv(out / "covid_reported.csv", ["iso3", "year", "month", "deaths"], rep)
    return out / "run.toml", {"kind": kind, "Y": Y, "paths": paths, "truth": dict(truth)}
