import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from excess_engine.errors import UnidentifiableError
from excess_engine.seasonal import (
    fit_multinomial_beta, fit_poisson_nuisance, fit_temperature_model, month_shares,
    month_shares_batch, multinomial_loglik, verify_poisson_trick,
)


def test_two_cell_closed_form():
    groups = [([3, 7], [0.0, 1.0])]
    beta, _ = fit_multinomial_beta(groups)
    assert abs(beta - math.log(7 / 3)) < 1e-8
    rep = verify_poisson_trick(groups)
    assert rep.passed and rep.abs_diff < 1e-8
    assert abs(rep.beta_poisson - math.log(7 / 3)) < 1e-8
    assert abs(rep.beta_multinomial - math.log(7 / 3)) < 1e-8


def test_constant_temperatures_unidentifiable():
    groups = [([10, 20, 30], [5.0, 5.0, 5.0]), ([1, 2, 3], [7.0, 7.0, 7.0])]
    with pytest.raises(UnidentifiableError):
        fit_temperature_model(groups)
    with pytest.raises(UnidentifiableError):
        fit_poisson_nuisance(groups)


def test_single_active_month_degenerate():
    rep = verify_poisson_trick([([12], [3.0]), ([40], [9.0])])
    assert rep.degenerate and rep.passed


def test_simulated_beta_recovered():
    rng = np.random.default_rng(7)
    groups = []
    for _ in range(50):
        z = 15 + 8 * np.cos(2 * np.pi * np.arange(12) / 12 + rng.uniform(0, 6)) + rng.normal(0, 1, 12)
        p = month_shares(0.05, z)
        groups.append((rng.multinomial(12000, p), z))
    model = fit_temperature_model(groups)
    assert abs(model.beta - 0.05) < 3 * model.sd


def test_share_examples():
    np.testing.assert_allclose(month_shares(0.7, np.full(12, 4.0)), 1 / 12, rtol=1e-15)
    np.testing.assert_allclose(month_shares(0.0, np.arange(12.0)), 1 / 12, rtol=1e-15)
    z = np.zeros(12)
    z[-1] = 10
    p = month_shares(0.1, z)
    e = math.e
    assert p[-1] == pytest.approx(e / (11 + e), rel=1e-14)
    np.testing.assert_allclose(p[:-1], 1 / (11 + e), rtol=1e-14)
    assert p[-1] == pytest.approx(0.1982, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(beta=st.floats(-2, 2), shift=st.floats(-50, 50),
       z=st.lists(st.floats(-30, 40), min_size=12, max_size=12))
def test_softmax_translation_invariance(beta, shift, z):
    z = np.array(z)
    np.testing.assert_allclose(month_shares(beta, z + shift), month_shares(beta, z),
                               rtol=1e-9, atol=1e-300)
    assert month_shares(beta, z).sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(beta=st.floats(0.01, 1.0), m=st.integers(0, 11), bump=st.floats(0.1, 5),
       z=st.lists(st.floats(-10, 10), min_size=12, max_size=12))
def test_share_increases_with_temperature(beta, m, bump, z):
    z = np.array(z)
    up = z.copy()
    up[m] += bump
    assert month_shares(beta, up)[m] > month_shares(beta, z)[m]


def test_batch_matches_scalar():
    z = np.linspace(-5, 20, 12)
    betas = np.array([-0.1, 0.0, 0.05, 0.3])
    P = month_shares_batch(betas, z)
    for b, row in zip(betas, P):
        np.testing.assert_allclose(row, month_shares(b, z), rtol=1e-13)


group = st.tuples(
    st.integers(2, 12).flatmap(lambda n: st.tuples(
        st.lists(st.integers(1, 500), min_size=n, max_size=n),
        st.lists(st.floats(-3, 3), min_size=n, max_size=n, unique=True),
    )),
)


@settings(max_examples=150, deadline=None)
@given(st.lists(group, min_size=1, max_size=6))
def test_poisson_trick_property(groups):
    groups = [g[0] for g in groups]
    spread = max(np.ptp(z) for _, z in groups)
    if spread < 1e-3:
        return
    rep = verify_poisson_trick(groups, tol=1e-6)
    assert rep.passed, rep
    # the estimate maximizes the multinomial likelihood
    b = rep.beta_multinomial
    assert multinomial_loglik(b, groups) >= multinomial_loglik(b + 1e-4, groups)
    assert multinomial_loglik(b, groups) >= multinomial_loglik(b - 1e-4, groups)


def test_poisson_trick_three_countries_two_years():
    rng = np.random.default_rng(11)
    groups = [(rng.integers(50, 300, 12), rng.normal(15, 6, 12)) for _ in range(6)]
    rep = verify_poisson_trick(groups, tol=1e-6)
    assert rep.passed
