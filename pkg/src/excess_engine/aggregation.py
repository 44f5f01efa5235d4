"""Excess draws, grouped summaries, rates, rankings and reported-death ratios.

Every country's draws share one draw index, so sums across countries are
taken per draw before any quantile is computed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data_model import N_MONTHS, PANDEMIC_YEARS, year_month
from .errors import ValidationError

LEVELS = ("country", "region", "income", "global")
INTERVALS = (0.50, 0.80, 0.95)
SUMMARY_COLUMNS = ("level", "key", "period", "point", "lo50", "hi50", "lo80", "hi80", "lo95", "hi95")
RATE_PER = 100_000


def period_labels(T=N_MONTHS):
    return [f"{PANDEMIC_YEARS[v - 1]}-{m:02d}" for v, m in (year_month(t) for t in range(1, T + 1))]


def draw_expected(ed, S, rng):
    """Draws of expected deaths ``(S, T)`` from ``Gamma(tau, rate = tau / E)``."""
    return ed.sample(rng, S)


def compute_excess(Y, E):
    """``delta = Y - E`` per draw.

    ``Y`` may be ``(T,)`` observed counts (constant across draws) or ``(S, T)``
    draws; ``E`` is ``(S, T)``.
    """
    Y = np.asarray(Y, dtype=float)
    E = np.asarray(E, dtype=float)
    if Y.ndim == 1:
        if Y.shape[0] != E.shape[-1]:
            raise ValidationError("observed series and expected draws cover different months")
        return Y[None, :] - E
    if Y.shape != E.shape:
        raise ValidationError(f"draw arrays are misaligned: {Y.shape} vs {E.shape}")
    return Y - E


@dataclass
class ExcessDraws:
    """Per-country draws ``delta[c, s, t]`` with a shared draw index."""

    countries: list
    delta: np.ndarray
    Y: np.ndarray | None = None
    E: np.ndarray | None = None

    def __post_init__(self):
        if self.delta.ndim != 3 or self.delta.shape[0] != len(self.countries):
            raise ValidationError("excess draws must be (countries, draws, months)")
        self._index = {c: i for i, c in enumerate(self.countries)}

    @property
    def n_draws(self):
        return self.delta.shape[1]

    def country(self, c):
        return self.delta[self._index[c]]

    def group_sum(self, members):
        missing = [m for m in members if m not in self._index]
        if missing:
            raise ValidationError(f"countries missing from draws: {', '.join(missing)}")
        idx = [self._index[m] for m in members]
        return self.delta[idx].sum(axis=0)


def summarize(draws, point="median"):
    """Point estimate and nested equal-tailed intervals over axis 0."""
    x = np.asarray(draws, dtype=float)
    if point == "median":
        pt = np.median(x, axis=0)
    elif point == "mean":
        pt = x.mean(axis=0)
    else:
        raise ValueError(f"unknown point estimate {point!r}")
    qs = []
    for level in INTERVALS:
        a = (1 - level) / 2
        qs.extend(np.quantile(x, [a, 1 - a], axis=0))
    return pt, qs


@dataclass
class SummaryTable:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, level, key, period, point, qs):
        self.rows.append((level, key, period, float(point), *[float(q) for q in qs]))

    def extend(self, other):
        self.rows.extend(other.rows)
        self.meta.update(other.meta)
        return self

    def lookup(self, level, key, period):
        for row in self.rows:
            if row[:3] == (level, key, period):
                return dict(zip(SUMMARY_COLUMNS, row))
        raise KeyError((level, key, period))

    def write_csv(self, path, columns=SUMMARY_COLUMNS):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for k, v in sorted(self.meta.items()):
                fh.write(f"# {k}: {v}\n")
            w.writerow(columns)
            for row in self.rows:
                w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if not np.isfinite(v):
            return ""
        return f"{v:.6g}" if abs(v) < 1e-3 and v != 0 else f"{v:.4f}"
    return str(v)


def group_members(countries, level, region=None, income=None):
    """Mapping group key -> member countries for one aggregation level."""
    if level == "country":
        return {c: [c] for c in countries}
    if level == "global":
        return {"Global": list(countries)}
    lookup = {"region": region, "income": income}.get(level)
    if lookup is None:
        raise ValidationError(f"unknown aggregation level {level!r}")
    groups = {}
    for c in countries:
        if c not in lookup:
            raise ValidationError(f"{c}: no {level} assignment")
        groups.setdefault(lookup[c], []).append(c)
    return dict(sorted(groups.items()))


def aggregate(excess, level, region=None, income=None, temporal="monthly", point="median"):
    """Group summaries of excess deaths.

    ``temporal`` is ``"monthly"`` (one row per month), ``"cumulative"``
    (running totals through each month) or ``"annual"`` (each pandemic year
    plus the full two-year total).
    """
    groups = group_members(excess.countries, level, region, income)
    labels = period_labels(excess.delta.shape[2])
    table = SummaryTable()
    for key, members in groups.items():
        d = excess.group_sum(members)
        if temporal == "monthly":
            series, names = d, labels
        elif temporal == "cumulative":
            series, names = np.cumsum(d, axis=1), [f"through {p}" for p in labels]
        elif temporal == "annual":
            series = np.column_stack([d[:, 12 * i:12 * (i + 1)].sum(axis=1)
                                      for i in range(len(PANDEMIC_YEARS))] + [d.sum(axis=1)])
            names = [str(y) for y in PANDEMIC_YEARS] + ["total"]
        else:
            raise ValueError(f"unknown temporal grouping {temporal!r}")
        pt, qs = summarize(series, point)
        for j, name in enumerate(names):
            table.add(level, key, name, pt[j], [q[j] for q in qs])
    return table


def excess_rate(delta_total, person_years):
    """Annualized excess per 100,000: ``delta_total / person_years * 1e5``."""
    if not person_years > 0:
        raise ValidationError("population must be positive")
    return np.asarray(delta_total, dtype=float) / person_years * RATE_PER


def rate_table(excess, populations, level="country", region=None, income=None, point="median"):
    """Excess-rate summaries over the full pandemic period."""
    groups = group_members(excess.countries, level, region, income)
    table = SummaryTable(meta={"rate_convention": "cumulative excess / person-years x 100000"})
    draws = {}
    for key, members in groups.items():
        py = sum(populations.person_years(c) for c in members)
        r = excess_rate(excess.group_sum(members).sum(axis=1), py)
        draws[key] = r
        pt, qs = summarize(r, point)
        table.add(level, key, "total", pt, qs)
    return table, draws


def rank_countries(rate_draws):
    """Rank probability matrix; rank 1 is the highest rate.

    ``rate_draws`` maps country code to an ``(S,)`` array. Ties are broken by
    country code order. Returns ``(codes, P)`` with ``P[i, r-1]`` the
    probability that country ``codes[i]`` has rank ``r``.
    """
    codes = sorted(rate_draws)
    R = np.array([np.asarray(rate_draws[c], dtype=float) for c in codes])
    n, S = R.shape
    # stable sort on -rate keeps code order among ties
    order = np.argsort(-R, axis=0, kind="stable")
    P = np.zeros((n, n))
    for r in range(n):
        np.add.at(P[:, r], order[r], 1.0)
    return codes, P / S


def ratio_to_reported(delta_total, reported_total, point="median"):
    """Summary of ``sum(delta) / sum(reported)`` per draw.

    Returns ``None`` when the reported total is zero.
    """
    if reported_total is None or reported_total <= 0:
        return None
    ratio = np.asarray(delta_total, dtype=float) / float(reported_total)
    return summarize(ratio, point)


def ratio_table(excess, reported, level="country", region=None, income=None, point="median"):
    groups = group_members(excess.countries, level, region, income)
    table = SummaryTable()
    flags = {}
    for key, members in groups.items():
        total = reported.total(members)
        res = ratio_to_reported(excess.group_sum(members).sum(axis=1), total, point)
        if res is None:
            flags[key] = "reported total is zero"
            table.rows.append((level, key, "total", None, None, None, None, None, None, None))
        else:
            table.add(level, key, "total", res[0], res[1])
    table.meta["undefined"] = ";".join(sorted(flags)) if flags else "none"
    return table, flags
