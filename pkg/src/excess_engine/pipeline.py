"""End-to-end run: tier routing, hash-keyed stage cache and exported tables.

Stages run in dependency order::

    expected -> seasonal -> gamma -> covariate -> predict -> subnational -> aggregate

Each stage's cache key hashes its own config section, the seed, the input
files it reads and the keys of the stages it consumes, so changing one
input re-runs exactly the stages downstream of it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import (
    LEVELS,
    ExcessDraws,
    SummaryTable,
    aggregate,
    compute_excess,
    rank_countries,
    rate_table,
    ratio_table,
)
from .config import dump_config, input_path, load_config
from .covariate import (
    McmcConfig,
    ModelSpec,
    apportion_annual_country,
    benchmark_partial,
    fit_model,
    predict_no_data,
)
from .data_model import (
    N_MONTHS,
    PANDEMIC_YEARS,
    Granularity,
    ReportedCovidDeaths,
    Tier,
    ingest_history,
    ingest_mortality,
    read_covariates,
    read_population,
    read_subnational_rows,
    read_temperature,
    standardize_covariates,
)
from .drawsio import export_csv, write_draws
from .errors import ExcessEngineError, ValidationError
from .expected import TrendKind, fit_expected
from .gamma_uncertainty import expected_distribution
from .rng import child_rng
from .seasonal import fit_temperature_model, temperature_groups
from .subnational import (
    ShareConfig,
    SubnationalPanel,
    ar1_tail_extrapolate,
    constrained_count_mcmc,
    fit_share_model,
    predict_national,
)

log = logging.getLogger(__name__)

STAGES = ("expected", "seasonal", "gamma", "covariate", "predict", "subnational", "aggregate")


def file_hash(path):
    if path is None:
        return "absent"
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def add_context(err, context):
    """Prefix an exception message in place and return it."""
    if err.args:
        err.args = (f"{context}: {err.args[0]}",) + tuple(err.args[1:])
    else:
        err.args = (context,)
    return err


class StageCache:
    """Pickle-backed memo of stage results keyed by content hashes."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self.keys = {}
        self.executed = []
        self.cached = []

    def key(self, name, parts):
        blob = json.dumps([name, __version__, parts], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def run(self, name, parts, fn):
        key = self.key(name, parts)
        self.keys[name] = key
        path = None if self.root is None else self.root / f"{name}-{key[:24]}.pkl"
        if path is not None and path.exists():
            with path.open("rb") as fh:
                out = pickle.load(fh)
            self.cached.append(name)
            log.info("stage %s: cached", name)
            return out
        log.info("stage %s: running", name)
        try:
            out = fn()
        except ExcessEngineError as err:
            raise add_context(err, f"stage {name}") from None
        if path is not None:
            tmp = path.with_suffix(".tmp")
            with tmp.open("wb") as fh:
                pickle.dump(out, fh, protocol=pickle.HIGHEST_PROTOCOL)
            tmp.replace(path)
        self.executed.append(name)
        return out


@dataclass
class Inputs:
    """Everything read from the input files."""

    cfg: dict
    paths: dict
    hashes: dict
    countries: list
    region: dict
    income: dict
    population: object
    series: dict
    histories: dict
    covariates: object
    temperature: dict
    subnational: dict
    reported: ReportedCovidDeaths | None


def load_inputs(cfg):
    names = ("mortality", "covariates", "population", "region", "temperature", "subnational",
             "covid_reported")
    paths = {n: input_path(cfg, n) for n in names}
    hashes = {n: file_hash(p) for n, p in paths.items()}
    population = read_population(paths["population"], paths["region"])
    countries = population.countries
    sub_rows = read_subnational_rows(paths["subnational"]) if paths["subnational"] else {}
    unknown = sorted(set(sub_rows) - set(countries))
    if unknown:
        raise ValidationError(f"subnational.csv lists countries absent from region.csv: {unknown}")
    series = ingest_mortality(paths["mortality"], countries=countries,
                              subnational_countries=list(sub_rows))
    histories = ingest_history(paths["mortality"])
    covariates = read_covariates(paths["covariates"], countries=countries)
    temperature = read_temperature(paths["temperature"]) if paths["temperature"] else {}
    reported = ReportedCovidDeaths.from_csv(paths["covid_reported"]) if paths["covid_reported"] else None
    return Inputs(cfg, paths, hashes, countries, population.region, population.income_group,
                  population, series, histories, covariates, temperature, sub_rows, reported)


# --------------------------------------------------------------------------
# stages


def stage_expected(inputs):
    cfg = inputs.cfg["expected"]
    linear = {c.upper() for c in cfg["linear_countries"]}
    fits = {}
    for c in inputs.countries:
        h = inputs.histories.get(c)
        if h is None:
            raise ValidationError(f"{c}: no historic mortality data for expected deaths")
        kind = TrendKind.LINEAR if (c in linear or cfg["trend"] == "Linear") else TrendKind.SPLINE
        try:
            fits[c] = fit_expected(h, kind)
        except ExcessEngineError as err:
            raise add_context(err, c) from None
    return fits


def stage_seasonal(inputs):
    groups, used = temperature_groups(inputs.histories, inputs.temperature)
    if not groups:
        return None
    return fit_temperature_model(groups, used)


def pandemic_temperatures(temperature, country):
    temps = temperature.get(country, {})
    vals = [temps.get((y, m)) for y in PANDEMIC_YEARS for m in range(1, 13)]
    if any(v is None for v in vals):
        raise ValidationError(f"{country}: pandemic-period temperatures are incomplete")
    return np.array(vals, dtype=float)


def stage_gamma(inputs, fits, model):
    seed = inputs.cfg["run"]["seed"]
    S = inputs.cfg["expected"]["gamma_samples"]
    out = {}
    for c, fit in fits.items():
        try:
            if fit.granularity is Granularity.ANNUAL:
                if model is None:
                    raise ValidationError("annual-only history needs a temperature model "
                                          "(temperature.csv with monthly-history countries)")
                out[c] = expected_distribution(fit, seed, S, model,
                                               pandemic_temperatures(inputs.temperature, c))
            else:
                out[c] = expected_distribution(fit, seed, S)
        except ExcessEngineError as err:
            raise add_context(err, c) from None
    return out


def model_spec(cfg, panel):
    c = cfg["covariate"]
    tv = list(c["time_varying"]) or list(panel.tv_names)
    const = list(c["constant"]) or list(panel.const_names)
    return ModelSpec(tv, const, c["interaction"] or None, c["pc_u"], c["pc_alpha"], c["fixed_sd"])


def mcmc_config(cfg, section="covariate", check=True):
    c = cfg[section]
    return McmcConfig(chains=c["chains"], warmup=c["warmup"], draws=c["iterations"],
                      output_draws=cfg["run"]["draws"], rhat_max=cfg["covariate"]["rhat_max"],
                      min_ess=cfg["covariate"]["min_ess"], check=check)


def fitting_series(inputs):
    return [inputs.series[c] for c in inputs.countries if inputs.series[c].observed.any()]


def standardized_panel(inputs):
    mask = np.array([inputs.series[c].observed for c in inputs.covariates.countries])
    return standardize_covariates(inputs.covariates, inputs.region, fitting_mask=mask)


def stage_covariate(inputs, expected):
    panel = standardized_panel(inputs)
    spec = model_spec(inputs.cfg, panel)
    draws = fit_model(fitting_series(inputs), expected, panel, spec, mcmc_config(inputs.cfg),
                      seed=inputs.cfg["run"]["seed"])
    return panel, draws


def _as_float(Y):
    return np.asarray(Y, dtype=float)


def stage_predict(inputs, expected, panel, draws):
    """ACM draws ``(S, 24)`` and route label for every non-subnational country."""
    seed = inputs.cfg["run"]["seed"]
    S = draws.n_draws
    out = {}
    for c in inputs.countries:
        if c in inputs.subnational:
            continue
        s = inputs.series[c]
        rng = child_rng(seed, "predict", c)
        try:
            if s.tier is Tier.FULL:
                out[c] = (np.tile(_as_float(s.counts), (S, 1)), "observed")
            elif s.tier is Tier.PARTIAL:
                _, _, Y = benchmark_partial(draws, s, expected, panel, rng)
                out[c] = (_as_float(Y), f"benchmarked after month {s.n_observed_prefix}")
            elif s.tier is Tier.NO_DATA:
                out[c] = (_as_float(predict_no_data(draws, expected, panel, c, rng)[1]), "covariate")
            else:
                out[c] = _route_annual(s, draws, expected, panel, rng)
        except ExcessEngineError as err:
            raise add_context(err, c) from None
    return out


def _route_annual(s, draws, expected, panel, rng):
    Y = _as_float(predict_no_data(draws, expected, panel, s.country, rng)[1])
    parts = []
    totals = {PANDEMIC_YEARS.index(y): v for y, v in s.annual_totals.items()}
    if totals:
        A = apportion_annual_country(draws, totals, expected, panel, s.country, rng)
        for v in totals:
            Y[:, 12 * v:12 * (v + 1)] = A[:, 12 * v:12 * (v + 1)]
        parts.append("annual apportioned " + ",".join(str(PANDEMIC_YEARS[v]) for v in sorted(totals)))
    if s.observed.any():
        Y[:, s.observed] = _as_float(s.counts)[s.observed]
        parts.append("observed months")
    covered = s.observed.copy()
    for v in totals:
        covered[12 * v:12 * (v + 1)] = True
    if not covered.all():
        parts.append("covariate elsewhere")
    return Y, "; ".join(parts)


def subnational_panel(inputs, country):
    """Historic and pandemic region panel; historic rows need a national total."""
    rows = inputs.subnational[country]
    regions = sorted({r for r, _, _ in rows})
    hist = inputs.histories.get(country)
    totals = {}
    if hist is not None and hist.granularity is Granularity.MONTHLY:
        totals = {(int(y), int(m)): float(d) for y, m, d in zip(hist.years, hist.months, hist.counts)}
    hist_keys = sorted({(y, m) for _, y, m in rows if y < PANDEMIC_YEARS[0] and (y, m) in totals})
    H = np.full((len(hist_keys), len(regions)), np.nan)
    P = np.full((N_MONTHS, len(regions)), np.nan)
    pos = {k: i for i, k in enumerate(hist_keys)}
    for (r, y, m), d in rows.items():
        k = regions.index(r)
        if (y, m) in pos:
            H[pos[(y, m)], k] = d
        elif y in PANDEMIC_YEARS:
            P[12 * PANDEMIC_YEARS.index(y) + m - 1, k] = d
    return SubnationalPanel(country, regions, H, np.array([totals[k] for k in hist_keys]), P)


def _keep_draws(x, S):
    idx = np.linspace(0, len(x) - 1, S).round().astype(int)
    return x[idx]


def stage_subnational(inputs, expected, panel, draws):
    cfg = inputs.cfg["subnational"]
    seed = inputs.cfg["run"]["seed"]
    S = draws.n_draws
    out, diags = {}, {}
    for c in sorted(inputs.subnational):
        rng = child_rng(seed, "subnational", c)
        s = inputs.series[c]
        try:
            sp = subnational_panel(inputs, c)
            Y = _as_float(predict_no_data(draws, expected, panel, c, rng)[1])
            if len(sp.hist_totals) >= 12:
                route, diag = _share_route(sp, Y, expected[c], cfg, S, seed, rng)
            elif s.annual_totals:
                route, diag = _constrained_route(sp, s, Y, cfg, rng)
            else:
                raise ValidationError("subnational data need at least 12 historic months with "
                                      "national totals, or an annual national total")
            if s.observed.any():
                Y[:, s.observed] = _as_float(s.counts)[s.observed]
                route += "; observed months"
        except ExcessEngineError as err:
            raise add_context(err, c) from None
        out[c] = (Y, route)
        diags[c] = diag
    return out, diags


def _share_route(sp, Y, ed, cfg, S, seed, rng):
    share_cfg = ShareConfig(chains=cfg["chains"], warmup=cfg["warmup"], draws=cfg["iterations"],
                            output_draws=S)
    post = fit_share_model(sp, share_cfg, seed=int(child_rng(seed, "share", sp.country).integers(2**31)))
    n_reg = sp.mask.sum(axis=1)
    good = n_reg >= cfg["tail_min_regions"]
    sparse = (n_reg > 0) & ~good
    nat = predict_national(post, sp.counts, rng)
    Y[:, good] = nat[:, good]
    route = "share model"
    last = int(np.flatnonzero(good).max()) if good.any() else -1
    tail = np.flatnonzero(sparse[last + 1:]) + last + 1
    if tail.size and last + 1 >= 12 and np.isfinite(Y[:, :last + 1]).all():
        # trailing months with too few regions: AR1 on log(Y / E) instead
        lead = np.log(np.maximum(Y[:, :last + 1], 0.5) / ed.E_hat[None, :last + 1])
        h = int(tail[-1] - last)
        res = ar1_tail_extrapolate(lead.mean(axis=0), lead.var(axis=0), h, rng,
                                   E=ed.E_hat[last + 1:last + 1 + h], n_draws=S)
        Y[:, tail] = res.Y[:, tail - last - 1]
        sparse[tail] = False
        route += f"; AR1 tail from month {tail[0] + 1}"
    Y[:, sparse] = nat[:, sparse]
    return route, post.diagnostics


def _constrained_route(sp, s, Y, cfg, rng):
    parts = []
    accept = {}
    for year, total in sorted(s.annual_totals.items()):
        v = PANDEMIC_YEARS.index(year)
        sl = slice(12 * v, 12 * (v + 1))
        z = np.nansum(sp.counts[sl], axis=1)
        complete = sp.mask[sl].any(axis=1).all() and z.sum() > 0
        kw = {}
        if complete:
            frac = min(max(z.sum() / max(total, 1), 1e-6), 1 - 1e-6)
            kw = dict(z=z.astype(np.int64),
                      logit_p_prior=(math.log(frac / (1 - frac)), cfg["logit_p_sd"] ** 2))
        # one chain per block of draws, each anchored on that block's first
        # covariate draw, so anchor uncertainty reaches the monthly counts
        rates = []
        blocks = min(cfg["constrained_anchor_blocks"], len(Y))
        for rows in np.array_split(np.arange(len(Y)), blocks):
            anchors = np.maximum(Y[rows[0], sl], 1e-6)
            n_iter = max(cfg["constrained_iterations"], 2 * len(rows))
            res = constrained_count_mcmc(int(total), anchors, rng, n_iter=n_iter, **kw)
            Y[rows, sl] = _keep_draws(res.draws, len(rows))
            rates.append(res.acceptance)
        accept[year] = float(np.mean(rates))
        parts.append(f"constrained counts {year}")
    return "; ".join(parts), accept


def excess_draws(inputs, ydraws, expected):
    seed = inputs.cfg["run"]["seed"]
    deltas, Ys, Es = [], [], []
    S = None
    for c in inputs.countries:
        Y = ydraws[c][0]
        S = S or len(Y)
        E = expected[c].sample(child_rng(seed, "expected-draws", c), S)
        deltas.append(compute_excess(Y, E))
        Ys.append(Y)
        Es.append(E)
    return ExcessDraws(list(inputs.countries), np.array(deltas), np.array(Ys), np.array(Es))


def stage_aggregate(inputs, ydraws, expected):
    cfg = inputs.cfg["run"]
    point = cfg["point"]
    ex = excess_draws(inputs, ydraws, expected)
    summary = SummaryTable(meta={
        "seed": cfg["seed"], "draws": ex.n_draws, "point": point,
        "intervals": "equal-tailed 50/80/95",
    })
    for level in LEVELS:
        for temporal in ("monthly", "cumulative", "annual"):
            summary.extend(aggregate(ex, level, inputs.region, inputs.income, temporal, point))
    rates = SummaryTable(meta={"rate_convention": "cumulative excess / person-years x 100000"})
    country_rates = None
    for level in LEVELS:
        tab, draws = rate_table(ex, inputs.population, level, inputs.region, inputs.income, point)
        rates.rows.extend(tab.rows)
        if level == "country":
            country_rates = draws
    codes, P = rank_countries(country_rates)
    ratios = None
    if inputs.reported is not None:
        ratios = SummaryTable()
        flags = {}
        for level in LEVELS:
            tab, f = ratio_table(ex, inputs.reported, level, inputs.region, inputs.income, point)
            ratios.rows.extend(tab.rows)
            flags.update({f"{level}:{k}": v for k, v in f.items()})
        ratios.meta["undefined"] = ";".join(sorted(flags)) if flags else "none"
    return {"excess": ex, "summary": summary, "rates": rates, "rank_codes": codes, "ranks": P,
            "ratios": ratios}


# --------------------------------------------------------------------------
# orchestration


@dataclass
class RunResult:
    out_dir: Path
    cache: StageCache
    routes: dict
    tiers: dict
    results: dict = field(default_factory=dict)


def stage_keys(inputs):
    """Cache key parts per stage: config, seed, input hashes, upstream stages."""
    cfg, h = inputs.cfg, inputs.hashes
    seed = cfg["run"]["seed"]
    return {
        "expected": {"cfg": cfg["expected"], "mortality": h["mortality"], "region": h["region"],
                     "population": h["population"]},
        "seasonal": {"mortality": h["mortality"], "temperature": h["temperature"]},
        "gamma": {"seed": seed, "S": cfg["expected"]["gamma_samples"],
                  "temperature": h["temperature"]},
        "covariate": {"seed": seed, "cfg": cfg["covariate"], "draws": cfg["run"]["draws"],
                      "covariates": h["covariates"], "region": h["region"],
                      "mortality": h["mortality"], "subnational": h["subnational"]},
        "predict": {"seed": seed},
        "subnational": {"seed": seed, "cfg": cfg["subnational"], "subnational": h["subnational"]},
        "aggregate": {"seed": seed, "point": cfg["run"]["point"], "population": h["population"],
                      "region": h["region"], "reported": h["covid_reported"]},
    }


def run_stages(inputs, cache, until="aggregate"):
    """Run stages in order up to ``until``; returns a dict of stage outputs."""
    parts = stage_keys(inputs)
    res = {}
    res["expected"] = cache.run("expected", parts["expected"], lambda: stage_expected(inputs))
    res["seasonal"] = cache.run("seasonal", parts["seasonal"], lambda: stage_seasonal(inputs))
    up = {"expected": cache.keys["expected"], "seasonal": cache.keys["seasonal"]}
    res["gamma"] = cache.run("gamma", {**parts["gamma"], **up},
                             lambda: stage_gamma(inputs, res["expected"], res["seasonal"]))
    if until == "gamma":
        return res
    up = {"gamma": cache.keys["gamma"]}
    res["covariate"] = cache.run("covariate", {**parts["covariate"], **up},
                                 lambda: stage_covariate(inputs, res["gamma"]))
    if until == "covariate":
        return res
    panel, draws = res["covariate"]
    up = {"gamma": cache.keys["gamma"], "covariate": cache.keys["covariate"]}
    res["predict"] = cache.run("predict", {**parts["predict"], **up, "mortality": inputs.hashes["mortality"]},
                               lambda: stage_predict(inputs, res["gamma"], panel, draws))
    res["subnational"] = cache.run(
        "subnational", {**parts["subnational"], **up, "mortality": inputs.hashes["mortality"]},
        lambda: stage_subnational(inputs, res["gamma"], panel, draws))
    ydraws = dict(res["predict"])
    ydraws.update(res["subnational"][0])
    up = {"gamma": cache.keys["gamma"], "predict": cache.keys["predict"],
          "subnational": cache.keys["subnational"]}
    res["aggregate"] = cache.run("aggregate", {**parts["aggregate"], **up},
                                 lambda: stage_aggregate(inputs, ydraws, res["gamma"]))
    res["ydraws"] = ydraws
    return res


def write_expected_csv(path, fits, expected=None):
    """``iso3,t,eta_hat,sigma_hat,trend_kind,granularity[,E_hat,tau_hat]``.

    ``t`` is the pandemic month; annual fits repeat their year's values.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["iso3", "t", "eta_hat", "sigma_hat", "trend_kind", "granularity"]
        w.writerow(head + (["E_hat", "tau_hat"] if expected else []))
        for c in sorted(fits):
            f = fits[c]
            for t in range(1, N_MONTHS + 1):
                i = t - 1 if f.granularity is Granularity.MONTHLY else (t - 1) // 12
                row = [c, t, repr(float(f.eta_hat[i])), repr(float(f.sigma_hat[i])),
                       f.trend_kind.value, f.granularity.value]
                if expected:
                    ed = expected[c]
                    row += [repr(float(ed.E_hat[t - 1])), repr(float(ed.tau_hat[t - 1]))]
                w.writerow(row)


def write_diagnostics_csv(path, covariate_draws, sub_diags):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "parameter", "rhat", "ess", "ok"])
        for name, rhat, ess, ok in covariate_draws.diagnostics:
            w.writerow(["covariate", name, f"{rhat:.4f}", f"{ess:.0f}", int(ok)])
        for c in sorted(sub_diags):
            d = sub_diags[c]
            if isinstance(d, dict):
                for year, acc in sorted(d.items()):
                    w.writerow([f"constrained:{c}", f"acceptance[{year}]", "", "", int(0.3 <= acc <= 0.6)])
            else:
                for name, rhat, ess, ok in d:
                    w.writerow([f"share:{c}", name, f"{rhat:.4f}", f"{ess:.0f}", int(ok)])


def write_routes_csv(path, inputs, ydraws):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iso3", "tier", "route"])
        for c in inputs.countries:
            w.writerow([c, inputs.series[c].tier.value, ydraws[c][1]])


def write_ranks_csv(path, codes, P):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iso3", "rank", "probability"])
        for i, c in enumerate(codes):
            for r in range(len(codes)):
                w.writerow([c, r + 1, f"{P[i, r]:.4f}"])


def draws_arrays(ex):
    arrays = {"delta": ex.delta, "Y": ex.Y, "E": ex.E}
    axes = {k: ["country", "draw", "month"] for k in arrays}
    labels = {"country": list(ex.countries), "month": _month_labels()}
    return arrays, {"axes": axes, "labels": labels}


def _month_labels():
    from .aggregation import period_labels
    return period_labels()


def run_pipeline(config_path=None, out_dir="run", cache_dir=None, overrides=None, plots=None):
    """Execute the full pipeline and write the run directory.

    Returns
    -------
    RunResult
    """
    cfg = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = load_inputs(cfg)
    cache = StageCache(cache_dir if cache_dir is not None else out / "cache")
    res = run_stages(inputs, cache)
    agg = res["aggregate"]
    ydraws = res["ydraws"]
    panel, draws = res["covariate"]

    (out / "config.toml").write_text(dump_config(cfg))
    agg["summary"].write_csv(out / "summary.csv")
    agg["rates"].write_csv(out / "rates.csv")
    if agg["ratios"] is not None:
        agg["ratios"].write_csv(out / "ratios.csv")
    write_ranks_csv(out / "ranks.csv", agg["rank_codes"], agg["ranks"])
    write_expected_csv(out / "expected.csv", res["expected"], res["gamma"])
    write_routes_csv(out / "routes.csv", inputs, ydraws)
    write_diagnostics_csv(out / "diagnostics.csv", draws, res["subnational"][1])
    arrays, meta = draws_arrays(agg["excess"])
    meta["seed"] = cfg["run"]["seed"]
    write_draws(out / "draws.bin", arrays, meta)
    if cfg["output"]["draws_csv"]:
        export_csv(out / "draws.csv", arrays, meta)
    if plots if plots is not None else cfg["output"]["plots"]:
        from .plotting import write_plots
        write_plots(out / "plots", agg["excess"], inputs.region, agg["rank_codes"], agg["ranks"],
                    cfg["run"]["point"])
    manifest = {
        "version": __version__,
        "seed": cfg["run"]["seed"],
        "inputs": {k: {"path": str(p) if p else None, "sha256": inputs.hashes[k]}
                   for k, p in inputs.paths.items()},
        "stage_keys": cache.keys,
        "stages_run": cache.executed,
        "stages_cached": cache.cached,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tiers = {c: inputs.series[c].tier for c in inputs.countries}
    routes = {c: ydraws[c][1] for c in inputs.countries}
    return RunResult(out, cache, routes, tiers, res)


def run_validation_cv(config_path=None, scheme="country", cache_dir=None, overrides=None,
                      folds=None):
    """Cross-validate the covariate model on the configured inputs.

    Expected numbers come from the (cached) gamma stage and are held fixed
    across folds; every fold is warm-started from the full-data fit.
    """
    from .validation import run_cv
    cfg = load_config(config_path, overrides)
    inputs = load_inputs(cfg)
    cache = StageCache(cache_dir)
    res = run_stages(inputs, cache, until="covariate")
    panel, full = res["covariate"]
    spec = model_spec(cfg, panel)
    conf = mcmc_config(cfg, "validation")
    return run_cv(fitting_series(inputs), res["gamma"], panel, spec, inputs.population,
                  scheme=scheme, config=conf, seed=cfg["run"]["seed"], warm=full, folds=folds)
