"""Temperature-driven month shares for countries with annual data only.

Within a country-year the monthly counts are multinomial given their total,
with probabilities proportional to ``exp(beta * temperature)``. A single
global ``beta`` is learned from countries with monthly history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .data_model import Granularity
from .errors import ConvergenceError, UnidentifiableError


@dataclass
class TemperatureModel:
    """Posterior summary of the log-linear temperature coefficient."""

    beta: float
    sd: float
    n_groups: int = 0
    countries: list = field(default_factory=list)

    def sample_beta(self, rng, size):
        return self.beta + self.sd * rng.standard_normal(size)


def _groups(groups):
    out = []
    for counts, temps in groups:
        y = np.asarray(counts, dtype=float)
        z = np.asarray(temps, dtype=float)
        if y.shape != z.shape or y.ndim != 1:
            raise ValueError("counts and temperatures must be matching 1-d arrays")
        out.append((y, z))
    return out


def multinomial_loglik(beta, groups):
    """Multinomial log-likelihood of ``beta`` (up to a beta-free constant)."""
    total = 0.0
    for y, z in _groups(groups):
        total += float(y @ (beta * z)) - y.sum() * logsumexp(beta * z)
    return total


def _score_info(beta, groups):
    score, info = 0.0, 0.0
    for y, z in groups:
        p = np.exp(beta * z - logsumexp(beta * z))
        ez = p @ z
        score += float(y @ z) - y.sum() * ez
        info += y.sum() * float(p @ (z - ez) ** 2)
    return score, info


def _identified(groups):
    """Within-group temperature variation above rounding level."""
    _, info0 = _score_info(0.0, groups)
    scale = sum(y.sum() * (1.0 + float(z @ z) / len(z)) for y, z in groups)
    return info0 > 1e-12 * scale


def fit_multinomial_beta(groups, tol=1e-13, max_iter=100):
    """Maximum-likelihood ``beta`` and observed information (Newton)."""
    groups = _groups(groups)
    if not _identified(groups):
        raise UnidentifiableError(
            "temperature coefficient is unidentifiable: no within-year temperature variation"
        )
    beta = 0.0
    for _ in range(max_iter):
        score, info = _score_info(beta, groups)
        step = score / info
        new = beta + step
        # the log-likelihood is concave; damp only when a step overshoots
        while multinomial_loglik(new, groups) < multinomial_loglik(beta, groups) - 1e-12:
            step *= 0.5
            new = beta + step
        beta = new
        if abs(step) < tol * (1.0 + abs(beta)):
            score, info = _score_info(beta, groups)
            return beta, info
    raise ConvergenceError("multinomial temperature fit did not converge", beta, abs(score))


def fit_temperature_model(groups, countries=()):
    """Fit the global temperature coefficient.

    Parameters
    ----------
    groups : iterable of (counts, temperatures)
        One pair per country-year; arrays hold the active months of that
        year (normally all 12).
    """
    groups = _groups(groups)
    if not groups:
        raise UnidentifiableError("no country-years with monthly counts and temperatures")
    beta, info = fit_multinomial_beta(groups)
    return TemperatureModel(beta=beta, sd=float(1.0 / np.sqrt(info)),
                            n_groups=len(groups), countries=list(countries))


def temperature_groups(histories, temperatures):
    """Country-years with 12 observed months and 12 temperatures."""
    groups, countries = [], []
    for iso, h in sorted(histories.items()):
        if h.granularity is not Granularity.MONTHLY or iso not in temperatures:
            continue
        temps = temperatures[iso]
        for year in np.unique(h.years):
            sel = h.years == year
            if sel.sum() != 12:
                continue
            months = h.months[sel]
            order = np.argsort(months)
            z = [temps.get((int(year), int(m))) for m in months[order]]
            if any(v is None for v in z):
                continue
            groups.append((h.counts[sel][order], np.array(z, dtype=float)))
            countries.append(iso)
    return groups, sorted(set(countries))


def month_shares(model_or_beta, temps):
    """Softmax of ``beta * temps``; sums to one."""
    beta = getattr(model_or_beta, "beta", model_or_beta)
    z = np.asarray(temps, dtype=float)
    a = beta * z
    p = np.exp(a - a.max())
    return p / p.sum()


def month_shares_batch(betas, temps):
    """Shares for many ``beta`` draws at once: returns ``(len(betas), len(temps))``."""
    a = np.outer(np.asarray(betas, dtype=float), np.asarray(temps, dtype=float))
    a -= a.max(axis=1, keepdims=True)
    p = np.exp(a)
    return p / p.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Poisson-multinomial equivalence check


def fit_poisson_nuisance(groups, tol=1e-14, max_iter=200):
    """Fit ``y ~ Poisson(lambda_g exp(beta z))`` jointly over beta and all
    ``log lambda_g`` (the 1/lambda prior is flat on ``log lambda``).

    Returns ``(beta, log_lambdas, profile_info)``; ``profile_info`` is the
    information about beta after eliminating the nuisance intensities.
    """
    groups = _groups(groups)
    G = len(groups)
    kappa = np.array([np.log(max(y.sum(), 1e-300) / len(y)) for y, _ in groups])
    beta = 0.0

    def loglik(beta, kappa):
        return sum(float(y @ (k + beta * z) - np.exp(k + beta * z).sum())
                   for (y, z), k in zip(groups, kappa))

    for _ in range(max_iter):
        grad = np.zeros(G + 1)
        H = np.zeros((G + 1, G + 1))
        for g, (y, z) in enumerate(groups):
            mu = np.exp(kappa[g] + beta * z)
            grad[0] += float((y - mu) @ z)
            grad[g + 1] = float((y - mu).sum())
            H[0, 0] += float(mu @ z**2)
            H[0, g + 1] = H[g + 1, 0] = float(mu @ z)
            H[g + 1, g + 1] = float(mu.sum())
        schur = H[0, 0] - H[0, 1:] @ (H[0, 1:] / np.diag(H)[1:])
        if not schur > 1e-12 * max(H[0, 0], 1.0):
            raise UnidentifiableError("beta carries no information once intensities are eliminated")
        step = np.linalg.solve(H, grad)
        t = 1.0
        base = loglik(beta, kappa)
        while loglik(beta + t * step[0], kappa + t * step[1:]) < base - 1e-12 * abs(base):
            t *= 0.5
            if t < 1e-12:
                break
        beta += t * step[0]
        kappa = kappa + t * step[1:]
        if np.max(np.abs(t * step)) < tol * (1.0 + abs(beta)):
            return beta, kappa, schur
    raise ConvergenceError("Poisson nuisance fit did not converge", beta, float(np.abs(grad).max()))


def _multinomial_root(groups):
    """Independent route: bracket and solve the multinomial score equation."""
    def score(b):
        return _score_info(b, groups)[0]
    lo, hi = -1.0, 1.0
    while score(lo) < 0:
        lo *= 2
        if lo < -1e6:
            break
    while score(hi) > 0:
        hi *= 2
        if hi > 1e6:
            break
    return optimize.brentq(score, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


@dataclass
class PoissonTrickReport:
    beta_poisson: float | None
    beta_multinomial: float | None
    abs_diff: float
    degenerate: bool
    passed: bool


def verify_poisson_trick(groups, tol=1e-8):
    """Fit the same data by the Poisson-with-nuisance route and by direct
    multinomial maximization, and compare the two estimates of beta."""
    groups = _groups(groups)
    degenerate = []
    try:
        b_pois = fit_poisson_nuisance(groups)[0]
        degenerate.append(False)
    except UnidentifiableError:
        b_pois = None
        degenerate.append(True)
    if _identified(groups):
        b_mult = _multinomial_root(groups)
        degenerate.append(False)
    else:
        b_mult = None
        degenerate.append(True)
    if all(degenerate):
        return PoissonTrickReport(None, None, 0.0, True, True)
    if any(degenerate):
        return PoissonTrickReport(b_pois, b_mult, np.inf, False, False)
    diff = abs(b_pois - b_mult)
    return PoissonTrickReport(float(b_pois), float(b_mult), float(diff), False, bool(diff < tol))
