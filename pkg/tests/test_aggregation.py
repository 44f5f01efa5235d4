import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from excess_engine.aggregation import (
    ExcessDraws, aggregate, compute_excess, excess_rate, rank_countries, ratio_table,
    ratio_to_reported, summarize,
)
from excess_engine.data_model import ReportedCovidDeaths
from excess_engine.errors import ValidationError

S, T = 400, 24


def test_compute_excess_examples():
    E = np.full((S, T), 80.0)
    np.testing.assert_array_equal(compute_excess(np.full(T, 100.0), E), 20.0)
    rng = np.random.default_rng(0)
    E = rng.gamma(50, 2, size=(S, T))
    np.testing.assert_array_equal(compute_excess(E, E), 0.0)
    Y = rng.poisson(120, size=(S, T))
    d = compute_excess(Y, E)
    assert d.mean() == pytest.approx(Y.mean() - E.mean(), abs=1e-9)
    with pytest.raises(ValidationError):
        compute_excess(Y[:, :10], E)


def _excess(codes, rng, loc=0.0):
    delta = rng.normal(loc, 100, size=(len(codes), S, T))
    return ExcessDraws(list(codes), delta)


def test_cancellation():
    delta = np.stack([np.full((S, T), 10.0), np.full((S, T), -10.0)])
    ex = ExcessDraws(["A", "B"], delta)
    row = aggregate(ex, "global").lookup("global", "Global", "2020-01")
    assert row["point"] == 0 and row["lo95"] == 0 and row["hi95"] == 0


def test_partition_additivity():
    rng = np.random.default_rng(1)
    codes = [f"C{i:02d}" for i in range(12)]
    region = {c: ["AFRO", "AMRO", "EMRO", "EURO", "SEARO", "WPRO"][i % 6] for i, c in enumerate(codes)}
    ex = _excess(codes, rng)
    regional = sum(ex.group_sum([c for c in codes if region[c] == r]) for r in set(region.values()))
    np.testing.assert_allclose(regional, ex.group_sum(codes), rtol=0, atol=1e-9)


def test_group_quantiles_are_not_sums_of_quantiles():
    rng = np.random.default_rng(2)
    ex = _excess(["A", "B"], rng)
    group = aggregate(ex, "global", temporal="annual").lookup("global", "Global", "total")
    members = [aggregate(ex, "country", temporal="annual").lookup("country", c, "total") for c in "AB"]
    assert group["hi95"] < sum(m["hi95"] for m in members)


def test_interval_nesting_and_cumulative():
    rng = np.random.default_rng(3)
    ex = _excess(["A", "B", "C"], rng, loc=5)
    for temporal in ("monthly", "cumulative", "annual"):
        for row in aggregate(ex, "country", temporal=temporal).rows:
            _, _, _, pt, l50, h50, l80, h80, l95, h95 = row
            assert l95 <= l80 <= l50 <= h50 <= h80 <= h95
    cum = aggregate(ex, "country", temporal="cumulative").lookup("country", "A", "through 2021-12")
    ann = aggregate(ex, "country", temporal="annual").lookup("country", "A", "total")
    assert cum["point"] == pytest.approx(ann["point"])


def test_unknown_group():
    ex = _excess(["A"], np.random.default_rng(4))
    with pytest.raises(ValidationError):
        aggregate(ex, "continent")
    with pytest.raises(ValidationError):
        aggregate(ex, "region", region={})


def test_rate_convention():
    assert excess_rate(10_000, 1_000_000 * 2) == pytest.approx(500.0)
    assert excess_rate(0, 5.0) == 0
    assert excess_rate(300, 2e6) == pytest.approx(2 * excess_rate(300, 4e6))
    with pytest.raises(ValidationError):
        excess_rate(1, 0)


def test_rank_dominance_and_symmetry():
    rng = np.random.default_rng(5)
    codes, P = rank_countries({"A": rng.normal(10, 1, 1000), "B": rng.normal(-10, 1, 1000)})
    np.testing.assert_array_equal(P, [[1, 0], [0, 1]])
    draws = {c: rng.normal(0, 1, 30_000) for c in "XYZ"}
    _, P = rank_countries(draws)
    np.testing.assert_allclose(P, 1 / 3, atol=0.015)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_rank_matrix_sums(n, S_, seed):
    rng = np.random.default_rng(seed)
    # integer draws force ties
    draws = {f"C{i}": rng.integers(0, 3, S_).astype(float) for i in range(n)}
    _, P = rank_countries(draws)
    np.testing.assert_allclose(P.sum(axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-12)


def test_rank_ties_broken_by_code():
    _, P = rank_countries({"B": np.zeros(5), "A": np.zeros(5)})
    np.testing.assert_array_equal(P, [[1, 0], [0, 1]])


def test_ratio_examples():
    pt, qs = ratio_to_reported(np.full(100, 275.0), 100)
    assert pt == 2.75 and all(q == 2.75 for q in qs)
    d = np.random.default_rng(6).normal(500, 50, 1000)
    pt, _ = ratio_to_reported(d, 500.0)
    assert pt == pytest.approx(np.median(d) / 500)
    assert ratio_to_reported(d, 0) is None


@settings(max_examples=100, deadline=None)
@given(st.floats(1, 1e6), st.integers(0, 2**32 - 1))
def test_ratio_monotone_in_delta(reported, seed):
    d = np.random.default_rng(seed).normal(0, 1000, 200)
    pt, qs = ratio_to_reported(d, reported)
    dpt, dqs = summarize(d)
    assert pt == pytest.approx(dpt / reported, rel=1e-12, abs=1e-15)
    for a, b in zip(qs, dqs):
        assert a == pytest.approx(b / reported, rel=1e-12, abs=1e-15)


def test_ratio_table_flags_zero():
    delta = np.ones((2, S, T))
    ex = ExcessDraws(["A", "B"], delta)
    rep = ReportedCovidDeaths({"A": np.full(T, 1.0), "B": np.zeros(T)})
    table, flags = ratio_table(ex, rep)
    assert flags == {"B": "reported total is zero"}
    assert table.lookup("country", "A", "total")["point"] == pytest.approx(1.0)
    assert table.lookup("country", "B", "total")["point"] is None


def test_fully_observed_width_from_expected_only():
    rng = np.random.default_rng(7)
    y = np.full(T, 1000.0)
    for tau, wide in ((50.0, True), (1e12, False)):
        E = rng.gamma(tau, 900 / tau, size=(S, T))
        ex = ExcessDraws(["A"], compute_excess(y, E)[None])
        row = aggregate(ex, "country").lookup("country", "A", "2020-01")
        assert (row["hi95"] - row["lo95"] > 1) == wide
