import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from excess_engine.data_model import (
    CountryMonthKey, CovariatePanel, Granularity, HistoricSeries, PopulationTable, Tier,
    ingest_history, ingest_mortality, month_index, read_covariates, read_population,
    read_regions, standardize_covariates, write_mortality_csv, year_month,
)
from excess_engine.errors import ParseError, ValidationError


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _pandemic_rows(iso, n, start=500):
    rows = []
    for t in range(1, n + 1):
        v, m = year_month(t)
        rows.append([iso, 2019 + v, m, start + t])
    return rows


def test_month_index_roundtrip():
    for t in range(1, 25):
        v, m = year_month(t)
        assert month_index(2019 + v, m) == t
    with pytest.raises(ValueError):
        year_month(25)
    with pytest.raises(ValueError):
        CountryMonthKey("PER", 0)
    key = CountryMonthKey.from_year_month("PER", 2, 3)
    assert key.t == 15 and key.year_index == 2 and key.month == 3


def test_tiers_from_rows(tmp_path):
    rows = _pandemic_rows("PER", 24) + _pandemic_rows("AAA", 18)
    path = _write(tmp_path / "m.csv", ["iso3", "year", "month", "deaths"], rows)
    series = ingest_mortality(path, countries=["PER", "AAA", "BBB"])
    assert series["PER"].tier is Tier.FULL
    assert series["AAA"].tier is Tier.PARTIAL
    assert series["AAA"].n_observed_prefix == 18
    assert series["BBB"].tier is Tier.NO_DATA


def test_annual_and_subnational_tier(tmp_path):
    rows = [["CCC", 2020, "", 12000], ["CCC", 2021, "", 12500]] + _pandemic_rows("DDD", 10)
    path = _write(tmp_path / "m.csv", ["iso3", "year", "month", "deaths"], rows)
    series = ingest_mortality(path, countries=["CCC", "DDD"], subnational_countries=["DDD"])
    assert series["CCC"].tier is Tier.SUBNATIONAL_OR_ANNUAL
    assert series["CCC"].annual_totals == {2020: 12000, 2021: 12500}
    assert series["DDD"].tier is Tier.SUBNATIONAL_OR_ANNUAL


def test_gap_after_prefix_is_dropped(tmp_path):
    rows = _pandemic_rows("AAA", 10) + [["AAA", 2021, 6, 700]]
    path = _write(tmp_path / "m.csv", ["iso3", "year", "month", "deaths"], rows)
    with pytest.warns(UserWarning, match="gap"):
        s = ingest_mortality(path)["AAA"]
    assert s.tier is Tier.PARTIAL
    assert s.observed.sum() == 10


@pytest.mark.parametrize("row, err", [
    (["PER", 2020, 13, 5], ParseError),
    (["PER", 2020, 1, -5], ValidationError),
    (["PER", "x", 1, 5], ParseError),
    (["PE", 2020, 1, 5], ParseError),
])
def test_malformed_rows(tmp_path, row, err):
    path = _write(tmp_path / "m.csv", ["iso3", "year", "month", "deaths"], [row])
    with pytest.raises(err):
        ingest_mortality(path)


def test_parse_error_carries_line(tmp_path):
    rows = _pandemic_rows("PER", 3) + [["PER", 2020, 99, 5]]
    path = _write(tmp_path / "m.csv", ["iso3", "year", "month", "deaths"], rows)
    with pytest.raises(ParseError) as info:
        ingest_mortality(path)
    assert info.value.line == 5


def test_missing_column_and_file(tmp_path):
    path = _write(tmp_path / "m.csv", ["iso3", "year", "deaths"], [["PER", 2020, 5]])
    with pytest.raises(ParseError, match="missing columns"):
        ingest_mortality(path)
    with pytest.raises(ValidationError, match="not found"):
        ingest_mortality(tmp_path / "absent.csv")


def test_duplicate_row(tmp_path):
    rows = [["PER", 2020, 1, 5], ["PER", 2020, 1, 6]]
    path = _write(tmp_path / "m.csv", ["iso3", "year", "month", "deaths"], rows)
    with pytest.raises(ValidationError, match="duplicate"):
        ingest_mortality(path)


def test_history_monthly_and_annual(tmp_path):
    rows = [["AAA", y, m, 100 + m] for y in range(2015, 2020) for m in range(1, 13)]
    rows += [["BBB", y, "", 12000] for y in range(2010, 2020)]
    rows += [["CCC", 2019, m, 10] for m in range(1, 13)]
    path = _write(tmp_path / "m.csv", ["iso3", "year", "month", "deaths"], rows)
    h = ingest_history(path)
    assert h["AAA"].granularity is Granularity.MONTHLY and h["AAA"].n_months == 60
    assert h["BBB"].granularity is Granularity.ANNUAL and h["BBB"].span == (2010, 2019)
    # fewer than 24 months: complete years are summed to annual totals
    assert h["CCC"].granularity is Granularity.ANNUAL and list(h["CCC"].counts) == [120]


counts = st.lists(st.integers(0, 10**6), min_size=24, max_size=24)


@settings(max_examples=30, deadline=None)
@given(full=counts, n_partial=st.integers(1, 23), annual=st.integers(0, 10**6))
def test_ingest_serialize_roundtrip(tmp_path_factory, full, n_partial, annual):
    path = tmp_path_factory.mktemp("rt") / "m.csv"
    rows = [["AAA", 2019 + year_month(t)[0], year_month(t)[1], full[t - 1]] for t in range(1, 25)]
    rows += [["BBB", 2019 + year_month(t)[0], year_month(t)[1], full[t - 1]]
             for t in range(1, n_partial + 1)]
    rows += [["CCC", 2020, "", annual]]
    rows += [["AAA", 2019, m, 50] for m in range(1, 13)] + [["AAA", 2018, m, 40] for m in range(1, 13)]
    _write(path, ["iso3", "year", "month", "deaths"], rows)
    series = ingest_mortality(path, countries=["AAA", "BBB", "CCC", "DDD"])
    hist = ingest_history(path)
    path2 = path.with_name("m2.csv")
    write_mortality_csv(path2, series, hist)
    again = ingest_mortality(path2, countries=["AAA", "BBB", "CCC", "DDD"])
    assert again == series
    assert ingest_history(path2) == hist
    # every country gets exactly one tier
    assert {s.tier for s in series.values()} <= set(Tier)
    assert len(series) == 4


def test_standardize_example_and_indicator():
    Z = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 1.0]])
    panel = CovariatePanel(["A", "B", "C"], [], np.zeros((3, 24, 0)), ["x", "inc"], Z)
    out = standardize_covariates(panel, {"A": "AFRO", "B": "AFRO", "C": "AFRO"})
    # sample sd of {1, 2, 3} is 1
    np.testing.assert_allclose(out.Z[:, 0], [-1.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_array_equal(out.Z[:, 1], [0.0, 1.0, 1.0])
    assert out.stats["inc"] is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=8, max_size=8).filter(lambda v: np.ptp(v) > 1e-3))
def test_standardize_moments(values):
    v = np.array(values)
    X = np.repeat(v[:, None, None], 24, axis=1) + np.linspace(0, 1, 24)[None, :, None]
    panel = CovariatePanel([f"C{i}" for i in range(8)], ["x"], X, [], np.zeros((8, 0)))
    out = standardize_covariates(panel, {f"C{i}": "EURO" for i in range(8)})
    col = out.X[:, :, 0].ravel()
    assert abs(col.mean()) < 1e-12
    assert abs(col.std(ddof=1) - 1) < 1e-12


def test_regional_median_imputation():
    vals = np.array([10.0, 12.0, 14.0, 20.0, np.nan, 100.0])
    X = np.repeat(vals[:, None, None], 24, axis=1)
    codes = ["A", "B", "C", "D", "E", "F"]
    reg = {"A": "AFRO", "B": "AFRO", "C": "AFRO", "D": "AFRO", "E": "AFRO", "F": "EURO"}
    panel = CovariatePanel(codes, ["temp"], X, [], np.zeros((6, 0)))
    out = standardize_covariates(panel, reg)
    mu, sd = out.stats["temp"]
    assert out.imputed_X[4].all() and not out.imputed_X[:4].any()
    np.testing.assert_allclose(out.X[4, :, 0] * sd + mu, 13.0)


def test_region_without_values_falls_back_to_global():
    X = np.array([1.0, 2.0, 3.0, np.nan])[:, None, None].repeat(24, axis=1)
    panel = CovariatePanel(list("ABCD"), ["x"], X, [], np.zeros((4, 0)))
    reg = {"A": "AFRO", "B": "AFRO", "C": "AFRO", "D": "WPRO"}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = standardize_covariates(panel, reg)
    assert any("global median" in str(w.message) for w in caught)
    mu, sd = out.stats["x"]
    np.testing.assert_allclose(out.X[3, :, 0] * sd + mu, 2.0)


def test_regions_population(tmp_path):
    reg = _write(tmp_path / "r.csv", ["iso3", "who_region", "income_group"],
                 [["AAA", "EURO", "High"], ["BBB", "AFRO", "Low/Middle"]])
    region, income = read_regions(reg)
    assert income == {"AAA": "High", "BBB": "LowMiddle"}
    pop = _write(tmp_path / "p.csv", ["iso3", "year", "population"],
                 [["AAA", 2020, 1_000_000], ["AAA", 2021, 1_000_000], ["BBB", 2020, 500]])
    table = read_population(pop, reg)
    assert table.person_years("AAA") == pytest.approx(2_000_000)
    bad = _write(tmp_path / "r2.csv", ["iso3", "who_region", "income_group"], [["AAA", "MARS", "High"]])
    with pytest.raises(ValidationError):
        read_regions(bad)


def test_population_missing_country(tmp_path):
    reg = _write(tmp_path / "r.csv", ["iso3", "who_region", "income_group"],
                 [["AAA", "EURO", "High"], ["BBB", "AFRO", "High"]])
    pop = _write(tmp_path / "p.csv", ["iso3", "year", "population"], [["AAA", 2020, 10]])
    with pytest.raises(ValidationError, match="no population"):
        read_population(pop, reg)


def test_read_covariates(tmp_path):
    rows = [["AAA", 2020, 1, "x", 1.5], ["AAA", "", "", "z", 2.0], ["BBB", 2021, 12, "x", 3.0]]
    path = _write(tmp_path / "c.csv", ["iso3", "year", "month", "name", "value"], rows)
    panel = read_covariates(path, countries=["AAA", "BBB"])
    assert panel.tv("AAA", "x")[0] == 1.5 and np.isnan(panel.tv("AAA", "x")[1])
    assert panel.tv("BBB", "x")[23] == 3.0
    assert panel.const("AAA", "z") == 2.0 and np.isnan(panel.const("BBB", "z"))


def test_historic_linear_fallback_flag():
    h = HistoricSeries("A", Granularity.MONTHLY, np.repeat([2018, 2019], 12),
                       np.ones(24, int), np.tile(np.arange(1, 13), 2))
    assert h.needs_linear_trend
    p = PopulationTable({"A": (np.array([2020]), np.array([10.0]))}, {"A": "EURO"}, {"A": "High"})
    assert p.monthly("A").shape == (24,)
