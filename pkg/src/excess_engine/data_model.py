"""Canonical data types and CSV ingestion.

Pandemic months are indexed ``t = 1..24`` (January 2020 to December 2021),
with ``t = 12 (v - 1) + m`` for pandemic year ``v`` in {1, 2} and calendar
month ``m``. Historic data are kept on calendar years.

All readers expect UTF-8 files with a header row; an empty field is a
missing value.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

PANDEMIC_YEARS = (2020, 2021)
N_MONTHS = 24
REGIONS = ("AFRO", "AMRO", "EMRO", "EURO", "SEARO", "WPRO")
INCOME_GROUPS = ("High", "LowMiddle")


def month_index(year, month):
    """Pandemic month index ``t`` for a calendar (year, month)."""
    v = year - PANDEMIC_YEARS[0] + 1
    if v not in (1, 2) or not 1 <= month <= 12:
        raise ValueError(f"({year}, {month}) is outside the pandemic period")
    return 12 * (v - 1) + month


def year_month(t):
    """Inverse of :func:`month_index`: ``t -> (v, m)``."""
    if not 1 <= t <= N_MONTHS:
        raise ValueError(f"pandemic month {t} outside 1..{N_MONTHS}")
    v, m = divmod(t - 1, 12)
    return v + 1, m + 1


@dataclass(frozen=True)
class CountryMonthKey:
    country: str
    t: int

    def __post_init__(self):
        year_month(self.t)

    @property
    def year_index(self):
        return year_month(self.t)[0]

    @property
    def month(self):
        return year_month(self.t)[1]

    @classmethod
    def from_year_month(cls, country, v, m):
        return cls(country, 12 * (v - 1) + m)


class Tier(str, enum.Enum):
    FULL = "FullNational"
    PARTIAL = "PartialNational"
    SUBNATIONAL_OR_ANNUAL = "SubnationalOrAnnual"
    NO_DATA = "NoData"


class Granularity(str, enum.Enum):
    MONTHLY = "Monthly"
    ANNUAL = "Annual"


@dataclass(eq=False)
class MortalitySeries:
    """Observed pandemic-period ACM for one country.

    ``counts[t-1]`` is only meaningful where ``observed[t-1]`` is true.
    ``annual_totals`` holds national annual totals for pandemic years that
    have no monthly national data.
    """

    country: str
    counts: np.ndarray
    observed: np.ndarray
    tier: Tier
    completeness_scale: float = 1.0
    annual_totals: dict = field(default_factory=dict)

    @property
    def n_observed_prefix(self):
        """Length of the contiguous observed prefix (T1)."""
        n = 0
        for flag in self.observed:
            if not flag:
                break
            n += 1
        return n

    def __eq__(self, other):
        if not isinstance(other, MortalitySeries):
            return NotImplemented
        return (
            self.country == other.country
            and self.tier == other.tier
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.counts[self.observed], other.counts[other.observed])
            and self.completeness_scale == other.completeness_scale
            and self.annual_totals == other.annual_totals
        )


@dataclass(eq=False)
class HistoricSeries:
    country: str
    granularity: Granularity
    years: np.ndarray
    counts: np.ndarray
    months: np.ndarray | None = None

    @property
    def span(self):
        return int(self.years.min()), int(self.years.max())

    @property
    def n_months(self):
        return len(self.counts) if self.granularity is Granularity.MONTHLY else 0

    @property
    def needs_linear_trend(self):
        """Fewer than three years of history: the trend falls back to linear."""
        if self.granularity is Granularity.MONTHLY:
            return self.n_months < 36
        return len(np.unique(self.years)) < 3

    def __eq__(self, other):
        if not isinstance(other, HistoricSeries):
            return NotImplemented
        same_months = (self.months is None and other.months is None) or (
            self.months is not None
            and other.months is not None
            and np.array_equal(self.months, other.months)
        )
        return (
            self.country == other.country
            and self.granularity == other.granularity
            and np.array_equal(self.years, other.years)
            and np.array_equal(self.counts, other.counts)
            and same_months
        )


# --------------------------------------------------------------------------
# CSV plumbing


def _open_rows(path, required):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file, header row required", path, 1) from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing}", path, 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(row)}", path, line
                )
            yield line, {h: cell.strip() for h, cell in zip(header, row)}


def _int(value, path, line, name, allow_empty=False):
    if value == "":
        if allow_empty:
            return None
        raise ParseError(f"empty {name}", path, line)
    try:
        f = float(value)
    except ValueError:
        raise ParseError(f"{name}={value!r} is not a number", path, line) from None
    if not math.isfinite(f) or f != int(f):
        raise ParseError(f"{name}={value!r} is not an integer", path, line)
    return int(f)


def _float(value, path, line, name, allow_empty=True):
    if value == "":
        if allow_empty:
            return None
        raise ParseError(f"empty {name}", path, line)
    try:
        f = float(value)
    except ValueError:
        raise ParseError(f"{name}={value!r} is not a number", path, line) from None
    if not math.isfinite(f):
        raise ParseError(f"{name}={value!r} is not finite", path, line)
    return f


def _iso3(value, path, line):
    if len(value) != 3 or not value.isalpha():
        raise ParseError(f"iso3={value!r} is not a 3-letter code", path, line)
    return value.upper()


def read_mortality_rows(path):
    """Parse ``mortality.csv`` into ``{iso3: {(year, month|None): deaths|None}}``.

    Also returns per-country completeness scales when the optional
    ``completeness`` column is present.
    """
    rows = {}
    scales = {}
    for line, rec in _open_rows(path, ("iso3", "year", "month", "deaths")):
        iso = _iso3(rec["iso3"], path, line)
        year = _int(rec["year"], path, line, "year")
        month = _int(rec["month"], path, line, "month", allow_empty=True)
        if month is not None and not 1 <= month <= 12:
            raise ParseError(f"month={month} outside 1..12", path, line)
        deaths = _int(rec["deaths"], path, line, "deaths", allow_empty=True)
        if deaths is not None and deaths < 0:
            raise ValidationError(f"{path}:{line}: negative death count {deaths} for {iso}")
        key = (year, month)
        bucket = rows.setdefault(iso, {})
        if key in bucket:
            raise ValidationError(f"{path}:{line}: duplicate row for {iso} {year}-{month}")
        bucket[key] = deaths
        scale = _float(rec.get("completeness", ""), path, line, "completeness")
        if scale is not None:
            if scale <= 0:
                raise ValidationError(f"{path}:{line}: completeness must be positive")
            scales[iso] = scale
    return rows, scales


def _tier_from(counts_obs, annual, has_subnational):
    observed = counts_obs
    n_obs = int(observed.sum())
    if n_obs == N_MONTHS:
        return Tier.FULL
    if n_obs > 0 and observed[0] and not has_subnational and not annual:
        return Tier.PARTIAL
    if annual or has_subnational or n_obs > 0:
        return Tier.SUBNATIONAL_OR_ANNUAL
    return Tier.NO_DATA


def ingest_mortality(path, countries=None, subnational_countries=()):
    """Build one :class:`MortalitySeries` per country from ``mortality.csv``.

    Parameters
    ----------
    path : path-like
        ``mortality.csv`` with columns ``iso3,year,month,deaths``.
    countries : iterable of str, optional
        Countries that must appear in the result; absent ones are NoData.
    subnational_countries : iterable of str
        Countries with a subnational panel; routed to SubnationalOrAnnual
        unless their national monthly data are complete.
    """
    rows, scales = read_mortality_rows(path)
    subnational = {c.upper() for c in subnational_countries}
    wanted = set(rows) if countries is None else {c.upper() for c in countries}
    out = {}
    for iso in sorted(wanted):
        recs = rows.get(iso, {})
        counts = np.zeros(N_MONTHS, dtype=np.int64)
        observed = np.zeros(N_MONTHS, dtype=bool)
        annual = {}
        for (year, month), deaths in recs.items():
            if year not in PANDEMIC_YEARS or deaths is None:
                continue
            if month is None:
                annual[year] = deaths
            else:
                t = month_index(year, month)
                counts[t - 1] = deaths
                observed[t - 1] = True
        tier = _tier_from(observed, annual, iso in subnational)
        if tier is Tier.PARTIAL:
            t1 = int(np.argmin(observed)) if not observed.all() else N_MONTHS
            if observed[t1:].any():
                warnings.warn(
                    f"{iso}: observed months after a gap at t={t1 + 1} are ignored",
                    stacklevel=2,
                )
                observed[t1:] = False
                counts[t1:] = 0
        out[iso] = MortalitySeries(
            country=iso,
            counts=counts,
            observed=observed,
            tier=tier,
            completeness_scale=scales.get(iso, 1.0),
            annual_totals=annual,
        )
    return out


def ingest_history(path):
    """Historic (pre-2020) series per country from ``mortality.csv``.

    Monthly rows are preferred when at least 24 months exist; otherwise the
    annual rows (or monthly rows summed over complete years) are used.
    """
    rows, _ = read_mortality_rows(path)
    out = {}
    for iso, recs in sorted(rows.items()):
        monthly = sorted(
            (y, m, d) for (y, m), d in recs.items()
            if y < PANDEMIC_YEARS[0] and m is not None and d is not None
        )
        annual = {y: d for (y, m), d in recs.items()
                  if y < PANDEMIC_YEARS[0] and m is None and d is not None}
        if len(monthly) >= 24:
            arr = np.array(monthly, dtype=np.int64)
            out[iso] = HistoricSeries(iso, Granularity.MONTHLY, arr[:, 0], arr[:, 2], arr[:, 1])
            continue
        by_year = {}
        for y, m, d in monthly:
            by_year.setdefault(y, []).append(d)
        for y, vals in by_year.items():
            if len(vals) == 12 and y not in annual:
                annual[y] = int(sum(vals))
        if annual:
            years = np.array(sorted(annual), dtype=np.int64)
            counts = np.array([annual[y] for y in years], dtype=np.int64)
            out[iso] = HistoricSeries(iso, Granularity.ANNUAL, years, counts)
    return out


def write_mortality_csv(path, series, history=None):
    """Serialize series (and optional history) back to ``mortality.csv``."""
    path = Path(path)
    with_scale = any(s.completeness_scale != 1.0 for s in series.values())
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["iso3", "year", "month", "deaths"] + (["completeness"] if with_scale else [])
        w.writerow(header)
        for iso in sorted(set(series) | set(history or {})):
            extra = []
            s = series.get(iso)
            if with_scale:
                extra = [repr(s.completeness_scale) if s else ""]
            h = (history or {}).get(iso)
            if h is not None:
                if h.granularity is Granularity.MONTHLY:
                    for y, m, d in zip(h.years, h.months, h.counts):
                        w.writerow([iso, int(y), int(m), int(d)] + extra)
                else:
                    for y, d in zip(h.years, h.counts):
                        w.writerow([iso, int(y), "", int(d)] + extra)
            if s is None:
                continue
            for t in range(1, N_MONTHS + 1):
                if s.observed[t - 1]:
                    v, m = year_month(t)
                    w.writerow([iso, PANDEMIC_YEARS[v - 1], m, int(s.counts[t - 1])] + extra)
            for y in sorted(s.annual_totals):
                w.writerow([iso, y, "", int(s.annual_totals[y])] + extra)


# --------------------------------------------------------------------------
# Regions and population


@dataclass
class PopulationTable:
    """Annual populations, interpolated linearly to pandemic months.

    Annual values are anchored at mid-year and held flat beyond the first
    and last available year.
    """

    annual: dict
    region: dict
    income_group: dict

    def monthly(self, country):
        years, pops = self.annual[country]
        anchor = np.asarray(years, dtype=float) + 6.5 / 12.0
        t = np.arange(1, N_MONTHS + 1)
        when = PANDEMIC_YEARS[0] + (t - 0.5) / 12.0
        n = np.interp(when, anchor, np.asarray(pops, dtype=float))
        if np.any(n <= 0):
            raise ValidationError(f"{country}: non-positive population")
        return n

    def person_years(self, country, months=None):
        n = self.monthly(country)
        idx = np.arange(N_MONTHS) if months is None else np.asarray(months) - 1
        return float(n[idx].sum() / 12.0)

    @property
    def countries(self):
        return sorted(self.region)


_INCOME_ALIASES = {
    "high": "High",
    "hic": "High",
    "lowmiddle": "LowMiddle",
    "low/middle": "LowMiddle",
    "lmic": "LowMiddle",
    "low_middle": "LowMiddle",
}


def read_regions(path):
    region, income = {}, {}
    for line, rec in _open_rows(path, ("iso3", "who_region", "income_group")):
        iso = _iso3(rec["iso3"], path, line)
        reg = rec["who_region"].upper()
        if reg not in REGIONS:
            raise ValidationError(f"{path}:{line}: unknown WHO region {rec['who_region']!r}")
        inc = _INCOME_ALIASES.get(rec["income_group"].replace(" ", "").lower())
        if inc is None:
            raise ValidationError(f"{path}:{line}: unknown income group {rec['income_group']!r}")
        if iso in region:
            raise ValidationError(f"{path}:{line}: {iso} listed twice")
        region[iso], income[iso] = reg, inc
    return region, income


def read_population(path, region_path):
    region, income = read_regions(region_path)
    annual = {}
    for line, rec in _open_rows(path, ("iso3", "year", "population")):
        iso = _iso3(rec["iso3"], path, line)
        year = _int(rec["year"], path, line, "year")
        pop = _float(rec["population"], path, line, "population", allow_empty=False)
        if pop <= 0:
            raise ValidationError(f"{path}:{line}: population must be positive")
        annual.setdefault(iso, {})[year] = pop
    packed = {}
    for iso, d in annual.items():
        ys = sorted(d)
        packed[iso] = (np.array(ys), np.array([d[y] for y in ys]))
    missing = [c for c in region if c not in packed]
    if missing:
        raise ValidationError(f"no population rows for {missing}")
    return PopulationTable(packed, region, income)


def read_monthly_values(path, value_column="deaths"):
    """Generic ``iso3,year,month,<value>`` reader for pandemic months.

    Returns ``{iso3: array(24)}`` with NaN where absent.
    """
    out = {}
    for line, rec in _open_rows(path, ("iso3", "year", "month", value_column)):
        iso = _iso3(rec["iso3"], path, line)
        year = _int(rec["year"], path, line, "year")
        month = _int(rec["month"], path, line, "month")
        val = _float(rec[value_column], path, line, value_column)
        if year not in PANDEMIC_YEARS or val is None:
            continue
        arr = out.setdefault(iso, np.full(N_MONTHS, np.nan))
        arr[month_index(year, month) - 1] = val
    return out


@dataclass
class ReportedCovidDeaths:
    counts: dict

    @classmethod
    def from_csv(cls, path):
        raw = read_monthly_values(path, "deaths")
        for iso, arr in raw.items():
            if np.any(arr[~np.isnan(arr)] < 0):
                raise ValidationError(f"{iso}: negative reported COVID-19 deaths")
        return cls(raw)

    def total(self, countries, months=None):
        idx = slice(None) if months is None else np.asarray(months) - 1
        return float(sum(np.nansum(self.counts[c][idx]) for c in countries if c in self.counts))


def read_temperature(path):
    """``temperature.csv`` -> ``{iso3: {(year, month): temp_c}}`` (all years)."""
    out = {}
    for line, rec in _open_rows(path, ("iso3", "year", "month", "temp_c")):
        iso = _iso3(rec["iso3"], path, line)
        year = _int(rec["year"], path, line, "year")
        month = _int(rec["month"], path, line, "month")
        val = _float(rec["temp_c"], path, line, "temp_c")
        if val is not None:
            out.setdefault(iso, {})[(year, month)] = val
    return out


def read_subnational_rows(path):
    """``subnational.csv`` -> ``{iso3: {(region_id, year, month): deaths}}``."""
    out = {}
    for line, rec in _open_rows(path, ("iso3", "region_id", "year", "month", "deaths")):
        iso = _iso3(rec["iso3"], path, line)
        reg = rec["region_id"]
        if not reg:
            raise ParseError("empty region_id", path, line)
        year = _int(rec["year"], path, line, "year")
        month = _int(rec["month"], path, line, "month")
        deaths = _int(rec["deaths"], path, line, "deaths", allow_empty=True)
        if deaths is None:
            continue
        if deaths < 0:
            raise ValidationError(f"{path}:{line}: negative death count")
        key = (reg, year, month)
        bucket = out.setdefault(iso, {})
        if key in bucket:
            raise ValidationError(f"{path}:{line}: duplicate subnational row")
        bucket[key] = deaths
    return out


# --------------------------------------------------------------------------
# Covariates


@dataclass(eq=False)
class CovariatePanel:
    """Time-varying ``X[c, t, b]`` and constant ``Z[c, g]`` covariates.

    ``stats`` maps a covariate name to the ``(mean, sd)`` used for
    standardization, or ``None`` for indicators and unstandardized panels.
    """

    countries: list
    tv_names: list
    X: np.ndarray
    const_names: list
    Z: np.ndarray
    imputed_X: np.ndarray = None
    imputed_Z: np.ndarray = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.imputed_X is None:
            self.imputed_X = np.zeros(self.X.shape, dtype=bool)
        if self.imputed_Z is None:
            self.imputed_Z = np.zeros(self.Z.shape, dtype=bool)
        self._index = {c: i for i, c in enumerate(self.countries)}

    def index(self, country):
        return self._index[country]

    def tv(self, country, name=None):
        x = self.X[self._index[country]]
        return x if name is None else x[:, self.tv_names.index(name)]

    def const(self, country, name=None):
        z = self.Z[self._index[country]]
        return z if name is None else z[self.const_names.index(name)]

    def subset(self, countries):
        idx = [self._index[c] for c in countries]
        return CovariatePanel(
            list(countries), list(self.tv_names), self.X[idx].copy(),
            list(self.const_names), self.Z[idx].copy(),
            self.imputed_X[idx].copy(), self.imputed_Z[idx].copy(), dict(self.stats),
        )


def read_covariates(path, countries=None):
    """Build a raw (unstandardized) panel from ``covariates.csv``."""
    tv, const = {}, {}
    seen = set()
    for line, rec in _open_rows(path, ("iso3", "year", "month", "name", "value")):
        iso = _iso3(rec["iso3"], path, line)
        seen.add(iso)
        name = rec["name"]
        year = _int(rec["year"], path, line, "year", allow_empty=True)
        month = _int(rec["month"], path, line, "month", allow_empty=True)
        val = _float(rec["value"], path, line, "value")
        if month is None:
            const.setdefault(name, {})[iso] = val
        else:
            if year not in PANDEMIC_YEARS:
                continue
            tv.setdefault(name, {})[(iso, month_index(year, month))] = val
    countries = sorted(seen) if countries is None else list(countries)
    tv_names, const_names = sorted(tv), sorted(const)
    X = np.full((len(countries), N_MONTHS, len(tv_names)), np.nan)
    Z = np.full((len(countries), len(const_names)), np.nan)
    for i, c in enumerate(countries):
        for b, name in enumerate(tv_names):
            for t in range(1, N_MONTHS + 1):
                v = tv[name].get((c, t))
                if v is not None:
                    X[i, t - 1, b] = v
        for g, name in enumerate(const_names):
            v = const[name].get(c)
            if v is not None:
                Z[i, g] = v
    return CovariatePanel(countries, tv_names, X, const_names, Z)


def _is_indicator(values):
    vals = values[~np.isnan(values)]
    return vals.size > 0 and np.all((vals == 0) | (vals == 1))


def _impute(column, regions, label):
    """Fill NaNs in ``column`` (countries x cells) with regional medians."""
    filled = column.copy()
    mask = np.isnan(column)
    if not mask.any():
        return filled, mask
    regions = np.asarray(regions)
    for reg in np.unique(regions):
        rows = regions == reg
        block = column[rows]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(block, axis=0)
        for j in np.flatnonzero(np.isnan(med) & mask[rows].any(axis=0)):
            glob = column[:, j]
            if np.all(np.isnan(glob)):
                raise ValidationError(f"covariate {label}: no values anywhere for cell {j}")
            warnings.warn(
                f"covariate {label}: region {reg} has no values for cell {j}; using global median",
                stacklevel=3,
            )
            med[j] = np.nanmedian(glob)
        sub = filled[rows]
        r, c = np.nonzero(np.isnan(sub))
        sub[r, c] = med[c]
        filled[rows] = sub
    return filled, mask


def standardize_covariates(panel, regions, fitting_mask=None, indicators=None):
    """Impute missing cells with WHO-region medians, then center and scale.

    Parameters
    ----------
    panel : CovariatePanel
        Raw covariates, NaN where missing.
    regions : mapping
        ``iso3 -> WHO region`` for every country in the panel.
    fitting_mask : ndarray of bool, shape (C, 24), optional
        Country-months with observed ACM; the standardization statistics
        are computed over the non-imputed cells of this set. Defaults to all.
    indicators : iterable of str, optional
        Covariates left on their {0, 1} scale. Auto-detected when omitted.

    Notes
    -----
    Scaling uses the sample standard deviation (``ddof=1``).
    Time-varying covariates are imputed per covariate-month.
    """
    C = len(panel.countries)
    reg = [regions[c] for c in panel.countries]
    if fitting_mask is None:
        fitting_mask = np.ones((C, N_MONTHS), dtype=bool)
    fitting_mask = np.asarray(fitting_mask, dtype=bool)
    fitting_countries = fitting_mask.any(axis=1)

    X = panel.X.copy()
    Z = panel.Z.copy()
    imp_X = np.zeros(X.shape, dtype=bool)
    imp_Z = np.zeros(Z.shape, dtype=bool)
    stats = {}

    def is_ind(name, values):
        if indicators is not None:
            return name in indicators
        return _is_indicator(values)

    for b, name in enumerate(panel.tv_names):
        col, mask = _impute(panel.X[:, :, b], reg, name)
        imp_X[:, :, b] = mask
        if is_ind(name, panel.X[:, :, b]):
            stats[name] = None
        else:
            ref = panel.X[:, :, b][fitting_mask & ~mask]
            mu, sd = _moments(ref, name)
            col = (col - mu) / sd
            stats[name] = (mu, sd)
        X[:, :, b] = col
    for g, name in enumerate(panel.const_names):
        col, mask = _impute(panel.Z[:, g][:, None], reg, name)
        col, mask = col[:, 0], mask[:, 0]
        imp_Z[:, g] = mask
        if is_ind(name, panel.Z[:, g]):
            stats[name] = None
        else:
            ref = panel.Z[:, g][fitting_countries & ~mask]
            mu, sd = _moments(ref, name)
            col = (col - mu) / sd
            stats[name] = (mu, sd)
        Z[:, g] = col
    return CovariatePanel(
        list(panel.countries), list(panel.tv_names), X, list(panel.const_names), Z,
        imp_X, imp_Z, stats,
    )


def _moments(ref, name):
    if ref.size < 2:
        raise ValidationError(f"covariate {name}: fewer than 2 fitting cells")
    mu = float(np.mean(ref))
    sd = float(np.std(ref, ddof=1))
    if not sd > 0:
        raise ValidationError(f"covariate {name}: zero variance over the fitting set")
    # one refinement pass keeps |mean| and |sd - 1| at rounding level
    mu += float(np.mean(ref - mu))
    sd *= float(np.std((ref - mu) / sd, ddof=1))
    return mu, sd
