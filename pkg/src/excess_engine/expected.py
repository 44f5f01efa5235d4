"""Expected (no-crisis) deaths from historic data.

Monthly histories are fitted with a negative-binomial additive model

    log mu[t] = f_year(year[t]) + f_month(month[t])

where ``f_year`` is a cubic P-spline with a second-order difference penalty
(null space: linear functions) and ``f_month`` is a centred cyclic cubic
spline. Annual histories use the trend term alone. Smoothing parameters
maximize a Laplace-approximate restricted marginal likelihood, and the NB
overdispersion is profiled by maximum likelihood at every candidate.
Predictive summaries for the pandemic months come from the delta method
applied to the Bayesian coefficient covariance ``(X'WX + S)^-1``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .data_model import PANDEMIC_YEARS, Granularity, HistoricSeries
from .errors import ConvergenceError, ValidationError
from .splines import (
    bspline_basis,
    cyclic_bspline_basis,
    cyclic_difference_penalty,
    difference_penalty,
    sum_to_zero_reparam,
)

PHI_BOUNDS = (1e-3, 1e8)
SEASONAL_KNOTS = 8
LOG_LAMBDA_GRID = np.arange(-4.0, 18.0, 2.0)


class TrendKind(str, enum.Enum):
    SPLINE = "Spline"
    LINEAR = "Linear"


@dataclass(eq=False)
class ExpectedFit:
    """Fitted baseline model for one country.

    ``eta_hat`` and ``sigma_hat`` hold the log-mean prediction and its
    standard error for each pandemic period: 24 months for monthly fits,
    two years for annual fits.
    """

    country: str
    granularity: Granularity
    trend_kind: TrendKind
    coef: np.ndarray
    cov: np.ndarray
    phi: float
    smoothing: dict
    eta_hat: np.ndarray
    sigma_hat: np.ndarray
    loglik: float
    penalized_loglik: float
    reml: float
    n_trend: int
    seasonal_curve: np.ndarray | None = None
    pred_design: np.ndarray | None = field(default=None, repr=False)

    @property
    def seasonal_amplitude(self):
        if self.seasonal_curve is None:
            return 0.0
        return float(self.seasonal_curve.max() - self.seasonal_curve.min())

    @property
    def n_periods(self):
        return len(self.eta_hat)


def _nb_kernel(y, mu, phi):
    # mean-dependent part of the NB log pmf; stable as phi -> infinity
    return float(np.sum(y * np.log(mu) - (y + phi) * np.log1p(mu / phi)))


def nb_loglik(y, mu, phi):
    """Negative-binomial log pmf summed, variance ``mu (1 + mu / phi)``."""
    y = np.asarray(y, dtype=float)
    const = gammaln(y + phi) - gammaln(phi) - gammaln(y + 1.0) - y * np.log(phi)
    return float(np.sum(const)) + _nb_kernel(y, mu, phi)


# --------------------------------------------------------------------------
# design construction


@dataclass
class _Design:
    X: np.ndarray
    X_pred: np.ndarray
    penalties: list  # (name, column slice, S_block, rank)
    n_trend: int
    season_rows: np.ndarray | None = None  # 12 x p, seasonal part only


def _trend_columns(rel_years, rel_pred, kind):
    if kind is TrendKind.LINEAR:
        centre = rel_years.mean()
        span = max(rel_years.max() - rel_years.min(), 1.0)
        def lin(r):
            return np.column_stack([np.ones_like(r), (r - centre) / span])
        return lin(rel_years), lin(rel_pred), None
    hi = float(max(rel_pred.max(), rel_years.max()))
    n_seg = int(max(3, min(round(hi), 10)))
    B = bspline_basis(rel_years, 0.0, hi, n_seg)
    Bp = bspline_basis(rel_pred, 0.0, hi, n_seg)
    return B, Bp, difference_penalty(B.shape[1], 2)


def _build_design(rel_years, months, rel_pred, months_pred, kind):
    Xt, Xt_pred, St = _trend_columns(rel_years, rel_pred, kind)
    penalties = []
    p_t = Xt.shape[1]
    if St is not None:
        penalties.append(("trend", slice(0, p_t), St, p_t - 2))
    if months is None:
        return _Design(Xt, Xt_pred, penalties, p_t)
    full12 = cyclic_bspline_basis(np.arange(12.0), 12.0, SEASONAL_KNOTS)
    Q = sum_to_zero_reparam(full12)
    Sm = Q.T @ cyclic_difference_penalty(SEASONAL_KNOTS) @ Q
    Xs = cyclic_bspline_basis(months - 1.0, 12.0, SEASONAL_KNOTS) @ Q
    Xs_pred = cyclic_bspline_basis(months_pred - 1.0, 12.0, SEASONAL_KNOTS) @ Q
    p_s = Xs.shape[1]
    penalties.append(("season", slice(p_t, p_t + p_s), Sm, p_s))
    season_rows = np.zeros((12, p_t + p_s))
    season_rows[:, p_t:] = full12 @ Q
    return _Design(
        np.hstack([Xt, Xs]), np.hstack([Xt_pred, Xs_pred]), penalties, p_t, season_rows
    )


def _penalty_matrix(design, lambdas):
    p = design.X.shape[1]
    S = np.zeros((p, p))
    for name, sl, Sb, _ in design.penalties:
        S[sl, sl] += lambdas[name] * Sb
    return S


# --------------------------------------------------------------------------
# inner fit


@dataclass
class _Inner:
    beta: np.ndarray
    phi: float
    H: np.ndarray  # X'WX at the optimum
    S: np.ndarray
    loglik: float
    pen_loglik: float


def _observed_weight(y, mu, phi):
    """Negative second derivative of the NB log pmf in ``log mu`` (always >= 0)."""
    return (y + phi) * mu * phi / (phi + mu) ** 2


def _pirls(X, y, S, phi, beta, max_iter=200, tol=1e-12):
    """Penalized Newton iterations for the NB log-linear model at fixed ``phi``.

    Stops on the Newton decrement, which is scale free and robust to the
    rounding noise of very large penalties.
    """
    def pen_ll(b):
        return _nb_kernel(y, np.exp(X @ b), phi) - 0.5 * b @ S @ b

    current = pen_ll(beta)
    grad_norm = np.inf
    for _ in range(max_iter):
        mu = np.exp(X @ beta)
        w = _observed_weight(y, mu, phi)
        score = X.T @ ((y - mu) / (1.0 + mu / phi)) - S @ beta
        H = X.T @ (w[:, None] * X) + S
        grad_norm = float(np.linalg.norm(score))
        step = np.linalg.solve(H, score)
        decrement = float(score @ step)
        if decrement <= tol * (1.0 + abs(current)):
            return beta, grad_norm
        t = 1.0
        while True:
            cand = beta + t * step
            val = pen_ll(cand)
            if np.isfinite(val) and val >= current:
                break
            t *= 0.5
            if t < 1e-10:
                if decrement <= 1e-8 * (1.0 + abs(current)):
                    return beta, grad_norm
                raise ConvergenceError("step halving failed in penalized NB fit", beta, grad_norm)
        beta, current = cand, val
    raise ConvergenceError("penalized NB fit did not converge", beta, grad_norm)


def _profile_phi(y, mu):
    def neg(logphi):
        return -nb_loglik(y, mu, math.exp(logphi))
    lo, hi = np.log(PHI_BOUNDS)
    res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-7})
    # the likelihood can be monotone increasing in phi (no overdispersion)
    if neg(hi) <= res.fun:
        return PHI_BOUNDS[1]
    return float(math.exp(res.x))


def _fit_inner(X, y, S, beta0, phi0=None, fixed_phi=None, max_rounds=100):
    beta = beta0.copy()
    phi = fixed_phi if fixed_phi is not None else (phi0 or 100.0)
    beta, grad = _pirls(X, y, S, phi, beta)
    if fixed_phi is None:
        prev = -np.inf
        for _ in range(max_rounds):
            phi = _profile_phi(y, np.exp(X @ beta))
            beta, grad = _pirls(X, y, S, phi, beta)
            cur = nb_loglik(y, np.exp(X @ beta), phi) - 0.5 * beta @ S @ beta
            if abs(cur - prev) <= 1e-9 * (1.0 + abs(cur)):
                break
            prev = cur
        else:
            raise ConvergenceError("NB overdispersion profiling did not converge", beta, grad)
    mu = np.exp(X @ beta)
    w = _observed_weight(y, mu, phi)
    ll = nb_loglik(y, mu, phi)
    return _Inner(beta, phi, X.T @ (w[:, None] * X), S, ll, ll - 0.5 * beta @ S @ beta)


def _logdet_pos(S, rank):
    ev = np.linalg.eigvalsh(S)
    ev = np.sort(ev)[::-1][:rank]
    return float(np.sum(np.log(ev)))


def _reml(inner, design, lambdas, logdets):
    """Laplace-approximate restricted log marginal likelihood (up to constants)."""
    val = inner.pen_loglik
    for name, _, _, rank in design.penalties:
        val += 0.5 * (rank * math.log(lambdas[name]) + logdets[name])
    sign, ld = np.linalg.slogdet(inner.H + inner.S)
    if sign <= 0:
        return -np.inf
    return val - 0.5 * ld


def _start_beta(design, y):
    beta = np.zeros(design.X.shape[1])
    # trend columns of both bases reproduce a constant
    level = math.log(max(float(np.mean(y)), 0.5))
    if design.penalties and design.penalties[0][0] == "trend":
        beta[: design.n_trend] = level
    else:
        beta[0] = level
    return beta


def _fit_design(design, y, smoothing=None):
    names = [p[0] for p in design.penalties]
    logdets = {n: _logdet_pos(Sb, r) for n, _, Sb, r in design.penalties}
    beta0 = _start_beta(design, y)
    cache = {}
    state = {"beta": beta0, "phi": None}

    def evaluate(loglams):
        key = tuple(round(v, 10) for v in loglams)
        if key in cache:
            return cache[key]
        lambdas = {n: math.exp(v) for n, v in zip(names, loglams)}
        S = _penalty_matrix(design, lambdas)
        inner = _fit_inner(design.X, y, S, state["beta"], state["phi"])
        state["beta"], state["phi"] = inner.beta, inner.phi
        out = (_reml(inner, design, lambdas, logdets), inner, lambdas)
        cache[key] = out
        return out

    if smoothing is not None:
        loglams = [math.log(smoothing[n]) for n in names]
        reml, inner, lambdas = evaluate(loglams)
        return inner, lambdas, reml
    if not names:
        inner = _fit_inner(design.X, y, np.zeros((len(beta0), len(beta0))), beta0)
        return inner, {}, inner.pen_loglik

    grid = LOG_LAMBDA_GRID
    if len(names) == 1:
        points = [(g,) for g in grid]
    else:
        points = [(a, b) for a in grid for b in grid]
    best = max(points, key=lambda pt: evaluate(pt)[0])
    best = list(best)
    for _ in range(2):
        for i in range(len(names)):
            j = int(np.argmin(np.abs(grid - best[i])))
            if j in (0, len(grid) - 1):
                continue

            def f(v, i=i):
                trial = list(best)
                trial[i] = v
                return -evaluate(trial)[0]

            a, c = grid[j - 1], grid[j + 1]
            if not (f(best[i]) <= f(a) and f(best[i]) <= f(c)):
                continue
            res = optimize.minimize_scalar(f, bracket=(a, best[i], c), method="golden", tol=1e-4)
            if -res.fun >= evaluate(best)[0]:
                best[i] = float(res.x)
    reml, inner, lambdas = evaluate(best)
    return inner, lambdas, reml


def _finish(country, granularity, kind, design, inner, lambdas, reml):
    Hp = inner.H + inner.S
    cov = np.linalg.inv(Hp)
    cov = 0.5 * (cov + cov.T)
    eta = design.X_pred @ inner.beta
    var = np.einsum("ij,jk,ik->i", design.X_pred, cov, design.X_pred)
    seasonal = None
    if design.season_rows is not None:
        seasonal = design.season_rows @ inner.beta
    return ExpectedFit(
        country=country,
        granularity=granularity,
        trend_kind=kind,
        coef=inner.beta,
        cov=cov,
        phi=inner.phi,
        smoothing=lambdas,
        eta_hat=eta,
        sigma_hat=np.sqrt(np.maximum(var, 0.0)),
        loglik=inner.loglik,
        penalized_loglik=inner.pen_loglik,
        reml=reml,
        n_trend=design.n_trend,
        seasonal_curve=seasonal,
        pred_design=design.X_pred,
    )


def _check_counts(y, country):
    if np.any(y < 0):
        raise ValidationError(f"{country}: negative historic counts")
    if not np.any(y > 0):
        raise ValidationError(f"{country}: all-zero history, no baseline can be fitted")


def fit_monthly_expected(history, trend_kind=TrendKind.SPLINE, smoothing=None,
                         pandemic_years=PANDEMIC_YEARS):
    """Fit the monthly NB spline model and predict the 24 pandemic months.

    Parameters
    ----------
    history : HistoricSeries
        Monthly history, at least 24 months.
    trend_kind : TrendKind
        Requested trend; forced to ``LINEAR`` below 36 months.
    smoothing : dict, optional
        Fixed smoothing parameters (``{"trend": .., "season": ..}``);
        selected by REML when omitted.
    """
    if history.granularity is not Granularity.MONTHLY:
        raise ValidationError(f"{history.country}: monthly fit needs monthly history")
    y = np.asarray(history.counts, dtype=float)
    if len(y) < 24:
        raise ValidationError(f"{history.country}: need >= 24 historic months, have {len(y)}")
    _check_counts(y, history.country)
    kind = TrendKind(trend_kind)
    if history.needs_linear_trend:
        kind = TrendKind.LINEAR
    first = int(history.years.min())
    rel = np.asarray(history.years, dtype=float) - first
    months = np.asarray(history.months, dtype=float)
    pred_years = np.repeat(np.asarray(pandemic_years, dtype=float), 12) - first
    pred_months = np.tile(np.arange(1.0, 13.0), len(pandemic_years))
    design = _build_design(rel, months, pred_years, pred_months, kind)
    if smoothing is not None:
        smoothing = {k: v for k, v in smoothing.items() if k in {p[0] for p in design.penalties}}
    inner, lambdas, reml = _fit_design(design, y, smoothing)
    return _finish(history.country, Granularity.MONTHLY, kind, design, inner, lambdas, reml)


def fit_annual_expected(history, trend_kind=TrendKind.SPLINE, smoothing=None,
                        pandemic_years=PANDEMIC_YEARS):
    """Fit the NB trend model to annual totals and predict each pandemic year."""
    if history.granularity is not Granularity.ANNUAL:
        raise ValidationError(f"{history.country}: annual fit needs annual history")
    y = np.asarray(history.counts, dtype=float)
    n_years = len(np.unique(history.years))
    if n_years < 2:
        raise ValidationError(f"{history.country}: need >= 2 historic years")
    _check_counts(y, history.country)
    kind = TrendKind(trend_kind)
    if n_years < 3:
        kind = TrendKind.LINEAR
    first = int(history.years.min())
    rel = np.asarray(history.years, dtype=float) - first
    pred = np.asarray(pandemic_years, dtype=float) - first
    design = _build_design(rel, None, pred, None, kind)
    inner, lambdas, reml = _fit_design(design, y, smoothing)
    return _finish(history.country, Granularity.ANNUAL, kind, design, inner, lambdas, reml)


def fit_expected(history, trend_kind=TrendKind.SPLINE, smoothing=None):
    """Dispatch on the history's granularity."""
    if history.granularity is Granularity.MONTHLY:
        return fit_monthly_expected(history, trend_kind, smoothing)
    return fit_annual_expected(history, trend_kind, smoothing)


def predict_log_expected(fit, period):
    """``(eta_hat, sigma_hat)`` for pandemic month ``t`` (or year ``v``)."""
    n = fit.n_periods
    if not 1 <= period <= n:
        raise IndexError(f"period {period} outside 1..{n}")
    return float(fit.eta_hat[period - 1]), float(fit.sigma_hat[period - 1])
