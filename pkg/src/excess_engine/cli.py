"""Command-line entry point ``excess-engine``.

Exit codes: 0 success, 2 invalid input or configuration, 3 inference
diagnostics failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import __version__
from .config import DEFAULTS, dump_config, load_config
from .errors import (
    ConvergenceError,
    DiagnosticsError,
    ExcessEngineError,
    ParseError,
    UnidentifiableError,
    ValidationError,
)

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_DIAGNOSTICS = 0, 1, 2, 3

log = logging.getLogger("excess_engine")


def _overrides(args):
    out = {}
    if getattr(args, "seed", None) is not None:
        out.setdefault("run", {})["seed"] = args.seed
    if getattr(args, "draws_count", None) is not None:
        out.setdefault("run", {})["draws"] = args.draws_count
    return out


def _config(args):
    return load_config(getattr(args, "config", None), _overrides(args))


# --------------------------------------------------------------------------
# subcommands


def cmd_expected_fit(args):
    from .data_model import ingest_history, read_temperature
    from .pipeline import stage_expected, stage_gamma, stage_seasonal, write_expected_csv
    cfg = _config(args)
    histories = ingest_history(args.history)
    temps = read_temperature(args.temperature) if args.temperature else {}
    inputs = SimpleNamespace(cfg=cfg, countries=sorted(histories), histories=histories,
                             temperature=temps)
    fits = stage_expected(inputs)
    expected = None
    if args.gamma:
        expected = stage_gamma(inputs, fits, stage_seasonal(inputs) if temps else None)
    write_expected_csv(args.out, fits, expected)
    print(f"wrote {args.out} ({len(fits)} countries)")
    return EXIT_OK


def cmd_seasonal_fit(args):
    from .data_model import ingest_history, read_temperature
    from .seasonal import fit_temperature_model, temperature_groups, verify_poisson_trick
    groups, used = temperature_groups(ingest_history(args.history), read_temperature(args.temperature))
    model = fit_temperature_model(groups, used)
    report = {"beta": model.beta, "sd": model.sd, "country_years": model.n_groups,
              "countries": model.countries}
    if args.verify:
        chk = verify_poisson_trick(groups)
        report["poisson_trick"] = {"beta_poisson": float(chk.beta_poisson),
                                   "beta_multinomial": float(chk.beta_multinomial),
                                   "abs_diff": float(chk.abs_diff), "passed": bool(chk.passed)}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    if args.verify and not report["poisson_trick"]["passed"]:
        return EXIT_DIAGNOSTICS
    return EXIT_OK


def read_expected_csv(path):
    """``expected.csv`` with ``E_hat`` and ``tau_hat`` columns -> distributions."""
    from .data_model import N_MONTHS
    from .gamma_uncertainty import ExpectedDistribution
    E, tau = {}, {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"iso3", "t", "E_hat", "tau_hat"} <= set(reader.fieldnames or []):
            raise ValidationError(f"{path}: E_hat and tau_hat columns are required "
                                  "(run 'expected fit --gamma')")
        for i, rec in enumerate(reader, start=2):
            try:
                t = int(rec["t"])
                e, k = float(rec["E_hat"]), float(rec["tau_hat"])
            except ValueError:
                raise ParseError("non-numeric t, E_hat or tau_hat", path, i) from None
            if not 1 <= t <= N_MONTHS:
                raise ParseError(f"t={t} outside 1..{N_MONTHS}", path, i)
            E.setdefault(rec["iso3"], np.full(N_MONTHS, np.nan))[t - 1] = e
            tau.setdefault(rec["iso3"], np.full(N_MONTHS, np.nan))[t - 1] = k
    out = {}
    for c in E:
        if np.isnan(E[c]).any() or np.isnan(tau[c]).any():
            raise ValidationError(f"{path}: {c} lacks E_hat/tau_hat for some months")
        out[c] = ExpectedDistribution(c, E[c], tau[c])
    return out


def _write_draws(path, csv_path, arrays, meta):
    from .drawsio import export_csv, write_draws
    write_draws(path, arrays, meta)
    if csv_path:
        export_csv(csv_path, arrays, meta)


def cmd_covariate_fit(args):
    from .aggregation import period_labels
    from .data_model import ingest_mortality, read_covariates, read_regions, standardize_covariates
    from .pipeline import mcmc_config, model_spec
    from .covariate import fit_model
    from .diagnostics import format_table
    cfg = _config(args)
    region, _ = read_regions(args.region)
    countries = sorted(region)
    series = ingest_mortality(args.obs, countries=countries)
    expected = read_expected_csv(args.expected)
    raw = read_covariates(args.covariates, countries=countries)
    mask = np.array([series[c].observed for c in raw.countries])
    panel = standardize_covariates(raw, region, fitting_mask=mask)
    fitting = [series[c] for c in countries if series[c].observed.any()]
    try:
        draws = fit_model(fitting, expected, panel, model_spec(cfg, panel), mcmc_config(cfg),
                          seed=cfg["run"]["seed"])
    except DiagnosticsError as err:
        print(format_table(err.table), file=sys.stderr)
        raise
    d = draws.design
    arrays = {"fixed": draws.b[:, :d.n_fixed], "sigma_eps": draws.sigma_eps,
              "sigma_path": draws.sigma_path, "paths": draws.paths}
    meta = {"seed": cfg["run"]["seed"], "countries": sorted({c for c, _ in draws.cells}),
            "axes": {"fixed": ["draw", "coef"], "sigma_eps": ["draw"],
                     "sigma_path": ["draw", "path"], "paths": ["draw", "path", "month"]},
            "labels": {"coef": d.fixed_names, "path": d.path_names, "month": period_labels()}}
    _write_draws(args.draws, args.csv, arrays, meta)
    print(format_table(draws.diagnostics))
    print(f"wrote {args.draws} ({draws.n_draws} draws)")
    return EXIT_OK


def cmd_subnational_fit(args):
    from .aggregation import period_labels
    from .data_model import N_MONTHS, ingest_history, read_subnational_rows
    from .pipeline import _share_route, subnational_panel
    from .rng import child_rng
    cfg = _config(args)
    country = args.country.upper()
    rows = read_subnational_rows(args.panel)
    if country not in rows:
        raise ValidationError(f"{args.panel}: no rows for {country}")
    inputs = SimpleNamespace(subnational=rows, histories=ingest_history(args.national))
    sp = subnational_panel(inputs, country)
    if len(sp.hist_totals) < 12:
        raise ValidationError(f"{country}: fewer than 12 historic months with national totals")
    S = cfg["run"]["draws"]
    seed = cfg["run"]["seed"]
    Y = np.full((S, N_MONTHS), np.nan)
    if args.expected:
        ed = read_expected_csv(args.expected)[country]
    else:
        ed = SimpleNamespace(E_hat=np.ones(N_MONTHS))
        cfg["subnational"]["tail_min_regions"] = 1
    route, diag = _share_route(sp, Y, ed, cfg["subnational"], S, seed,
                               child_rng(seed, "subnational", country))
    meta = {"seed": seed, "country": country, "route": route,
            "axes": {"Y": ["draw", "month"]}, "labels": {"month": period_labels()}}
    _write_draws(args.draws, args.csv, {"Y": Y}, meta)
    from .diagnostics import format_table
    print(format_table(diag))
    print(f"wrote {args.draws}: {route}")
    return EXIT_OK


def cmd_excess_summarize(args):
    from .aggregation import LEVELS, ExcessDraws, SummaryTable, aggregate, rank_countries, rate_table
    from .data_model import read_population
    from .drawsio import read_draws
    arrays, meta = read_draws(args.draws)
    if "delta" not in arrays:
        raise ValidationError(f"{args.draws}: no 'delta' array (write it with 'run')")
    countries = meta.get("labels", {}).get("country")
    if not countries or len(countries) != arrays["delta"].shape[0]:
        raise ValidationError(f"{args.draws}: country labels missing or misaligned")
    pop = read_population(args.population, args.region)
    missing = sorted(set(pop.countries) - set(countries))
    if missing:
        raise ValidationError(f"countries in region.csv without draws: {missing}")
    ex = ExcessDraws(list(countries), arrays["delta"])
    table = SummaryTable(meta={"draws": ex.n_draws, "point": args.point,
                               "intervals": "equal-tailed 50/80/95"})
    for level in LEVELS:
        for temporal in ("monthly", "cumulative", "annual"):
            table.extend(aggregate(ex, level, pop.region, pop.income_group, temporal, args.point))
    table.write_csv(args.out)
    print(f"wrote {args.out} ({len(table.rows)} rows)")
    if args.plots:
        from .plotting import write_plots
        _, rates = rate_table(ex, pop, "country", point=args.point)
        codes, P = rank_countries(rates)
        names = write_plots(args.plots, ex, pop.region, codes, P, args.point)
        print(f"wrote {len(names)} files to {args.plots}")
    return EXIT_OK


def cmd_validate_cv(args):
    from .pipeline import run_validation_cv
    folds = None
    if args.folds:
        folds = [int(f) if args.scheme == "month" else f.upper() for f in args.folds.split(",")]
    report = run_validation_cv(getattr(args, "config", None), args.scheme, args.cache, _overrides(args), folds)
    text = json.dumps(report.as_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    if args.cells:
        with open(args.cells, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["fold", "country", "t", "y", "N", "r", "r_hat", "hit50", "hit80", "hit95"]
            w.writerow(cols)
            for rec in report.records:
                w.writerow([rec[k] if not isinstance(rec[k], bool) else int(rec[k]) for k in cols])
    print(text, end="")
    return EXIT_OK


def cmd_validate_sims(args):
    from .subnational import ShareConfig
    from .validation import run_simulation_suite
    n_sub, n_con = (10, 3) if args.quick else (50, 5)
    checks = run_simulation_suite(seed=args.seed or 0, n_subnational=n_sub, n_constrained=n_con,
                                  share_config=ShareConfig())
    report = [{"name": c.name, "value": c.value, "threshold": c.threshold, "passed": c.passed,
               "detail": c.detail} for c in checks]
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} = {c.value:.4g} ({c.threshold})")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_DIAGNOSTICS


def cmd_run(args):
    from .pipeline import run_pipeline
    res = run_pipeline(getattr(args, "config", None), args.out, args.cache, _overrides(args),
                       plots=False if args.no_plots else None)
    print(f"run directory: {res.out_dir}")
    print(f"stages run: {', '.join(res.cache.executed) or 'none'}; "
          f"cached: {', '.join(res.cache.cached) or 'none'}")
    return EXIT_OK


def cmd_synth(args):
    from .synthetic import write_world
    path, truth = write_world(args.out, seed=args.seed or 1)
    kinds = {}
    for c, k in truth["kind"].items():
        kinds.setdefault(k, []).append(c)
    for k, cs in kinds.items():
        print(f"{k}: {' '.join(cs)}")
    print(f"config: {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="excess-engine",
                                description="Excess mortality estimation with posterior uncertainty.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration (defaults merged with --config) and exit")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command")

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default=argparse.SUPPRESS, help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override run.seed")

    g = sub.add_parser("expected", help="expected-deaths models").add_subparsers(dest="action")
    sp = g.add_parser("fit", help="fit baselines and write expected.csv")
    sp.add_argument("--history", required=True, help="mortality.csv")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gamma", action="store_true", help="add E_hat and tau_hat columns")
    sp.add_argument("--temperature", help="temperature.csv (needed for annual-only histories)")
    common(sp)
    sp.set_defaults(func=cmd_expected_fit)

    g = sub.add_parser("seasonal", help="temperature seasonality").add_subparsers(dest="action")
    sp = g.add_parser("fit", help="fit the temperature coefficient")
    sp.add_argument("--history", required=True)
    sp.add_argument("--temperature", required=True)
    sp.add_argument("--out")
    sp.add_argument("--verify", action="store_true", help="also run the Poisson-trick check")
    sp.set_defaults(func=cmd_seasonal_fit)

    g = sub.add_parser("covariate", help="national covariate model").add_subparsers(dest="action")
    sp = g.add_parser("fit", help="sample the covariate model")
    sp.add_argument("--obs", required=True, help="mortality.csv")
    sp.add_argument("--expected", required=True, help="expected.csv with E_hat,tau_hat")
    sp.add_argument("--covariates", required=True)
    sp.add_argument("--region", required=True)
    sp.add_argument("--draws", required=True, help="output draws.bin")
    sp.add_argument("--csv", help="also export draws as long CSV")
    common(sp)
    sp.add_argument("--draws-count", dest="draws_count", type=int, help="override run.draws")
    sp.set_defaults(func=cmd_covariate_fit)

    g = sub.add_parser("subnational", help="subnational share model").add_subparsers(dest="action")
    sp = g.add_parser("fit", help="predict national totals from region data")
    sp.add_argument("--panel", required=True, help="subnational.csv")
    sp.add_argument("--national", required=True, help="mortality.csv with historic national months")
    sp.add_argument("--country", required=True)
    sp.add_argument("--expected", help="expected.csv with E_hat (enables the AR1 tail rule)")
    sp.add_argument("--draws", required=True)
    sp.add_argument("--csv")
    common(sp)
    sp.add_argument("--draws-count", dest="draws_count", type=int)
    sp.set_defaults(func=cmd_subnational_fit)

    g = sub.add_parser("excess", help="excess summaries").add_subparsers(dest="action")
    sp = g.add_parser("summarize", help="summary table from excess draws")
    sp.add_argument("--draws", required=True, help="draws.bin written by 'run'")
    sp.add_argument("--region", required=True)
    sp.add_argument("--population", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plots", help="directory for tidy plot tables and PNGs")
    sp.add_argument("--point", choices=("median", "mean"), default="median")
    sp.set_defaults(func=cmd_excess_summarize)

    g = sub.add_parser("validate", help="validation").add_subparsers(dest="action")
    sp = g.add_parser("cv", help="leave-one-country/month-out cross-validation")
    sp.add_argument("--scheme", choices=("country", "month"), required=True)
    sp.add_argument("--out", help="JSON report")
    sp.add_argument("--cells", help="per-cell CSV")
    sp.add_argument("--cache", help="stage cache directory")
    sp.add_argument("--folds", help="comma-separated subset of folds")
    common(sp)
    sp.set_defaults(func=cmd_validate_cv)
    sp = g.add_parser("sims", help="simulation suite")
    sp.add_argument("--out")
    sp.add_argument("--quick", action="store_true", help="fewer replications")
    common(sp, config=False)
    sp.set_defaults(func=cmd_validate_sims)

    sp = sub.add_parser("run", help="full pipeline")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--cache", help="stage cache directory (default: <out>/cache)")
    sp.add_argument("--no-plots", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("synth", help="write a synthetic 30-country input set")
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config:
            print(dump_config(load_config(args.config) if args.config else
                              {k: dict(v) for k, v in DEFAULTS.items()}), end="")
            return EXIT_OK
        if not getattr(args, "func", None):
            parser.print_help()
            return EXIT_INVALID
        return args.func(args)
    except (DiagnosticsError, ConvergenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    except (ValidationError, ParseError, UnidentifiableError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except ExcessEngineError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
