"""Hierarchical negative-binomial covariate model for national monthly deaths.

For observed country-months

    Y[c,t] ~ NegBin(mean = E[c,t] * theta[c,t], size = tau[c,t])
    log theta[c,t] = alpha + sum_g gamma_g F[c,t,g] + sum_j beta[j,t] X[c,t,j] + eps[c,t]

where ``F`` holds constant covariates and the overall-effect column of every
time-varying term, ``beta[j]`` is a second-order random walk deviation with
sum-to-zero constraint, and ``eps ~ N(0, sigma_eps^2)``.

The sampler is a centred Gibbs scheme over four chains:

* regression block (alpha, gamma, all paths) drawn exactly from its Gaussian
  conditional given ``u = log theta``;
* ``u`` updated cell-wise by an independence Metropolis step whose proposal
  is the Laplace approximation of the cell conditional;
* ``sigma_eps`` by slice sampling under an exponential penalized-complexity
  prior;
* each path ``sigma`` by slice sampling with its path integrated out, followed
  by a fresh draw of that path (a partially collapsed step that avoids the
  funnel between a path and its scale).

Paths are stored as ``beta = C eta`` with ``C`` an orthonormal basis of the
sum-to-zero subspace, so the constraint holds by construction.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data_model import N_MONTHS
from .diagnostics import diagnostics_table, format_table, keep_indices
from .errors import DiagnosticsError, ValidationError
from .rng import child_rng
from .splines import difference_penalty

log = logging.getLogger(__name__)

FIXED_SD = 31.6


def pc_rate(u=1.0, alpha=0.01):
    """Exponential rate giving ``P(sigma > u) = alpha``."""
    return -math.log(alpha) / u


@dataclass
class ModelSpec:
    """Covariate structure and prior settings.

    Every time-varying covariate enters as a fixed overall-effect column plus
    an RW2 deviation path. When ``interaction`` names a 0/1 constant
    covariate, each time-varying covariate is split into one term per level.
    """

    tv_names: list
    const_names: list
    interaction: str | None = None
    pc_u: float = 1.0
    pc_alpha: float = 0.01
    fixed_sd: float = FIXED_SD

    @property
    def rate(self):
        return pc_rate(self.pc_u, self.pc_alpha)


@dataclass
class McmcConfig:
    chains: int = 4
    warmup: int = 5000
    draws: int = 5000
    output_draws: int = 1000
    rhat_max: float = 1.02
    min_ess: float = 400.0
    check: bool = True


def sum_to_zero_basis(T):
    """Orthonormal ``T x (T-1)`` basis of vectors summing to zero."""
    q, _ = np.linalg.qr(np.ones((T, 1)), mode="complete")
    return q[:, 1:]


class Design:
    """Maps a covariate panel to regression rows in ``b`` coordinates.

    ``b = [alpha, gamma (fixed columns), eta_1, ..., eta_J]`` with each
    ``eta_j`` of length ``T - 1``.
    """

    def __init__(self, spec, panel, T=N_MONTHS):
        self.spec = spec
        self.T = T
        self.C = sum_to_zero_basis(T)
        missing = [n for n in spec.tv_names if n not in panel.tv_names]
        missing += [n for n in spec.const_names if n not in panel.const_names]
        if spec.interaction and spec.interaction not in panel.const_names:
            missing.append(spec.interaction)
        if missing:
            raise ValidationError(f"covariates not in panel: {', '.join(missing)}")
        self.terms = []  # (term name, tv name, level or None)
        for name in spec.tv_names:
            if spec.interaction:
                for level in (0, 1):
                    self.terms.append((f"{name}:{spec.interaction}={level}", name, level))
            else:
                self.terms.append((name, name, None))
        self.fixed_names = ["alpha"] + [t[0] for t in self.terms] + list(spec.const_names)
        self.path_names = [t[0] for t in self.terms]
        self.n_fixed = len(self.fixed_names)
        self.J = len(self.terms)
        self.p = self.n_fixed + self.J * (T - 1)

    def path_slice(self, j):
        start = self.n_fixed + j * (self.T - 1)
        return slice(start, start + self.T - 1)

    def term_values(self, panel, country):
        """``(T, J)`` values of every time-varying term for one country."""
        X = panel.tv(country)[: self.T]
        cols = []
        for _, name, level in self.terms:
            x = X[:, panel.tv_names.index(name)]
            if level is not None:
                ind = panel.const(country, self.spec.interaction)
                x = x * float(ind == level)
            cols.append(x)
        return np.column_stack(cols) if cols else np.zeros((self.T, 0))

    def rows(self, panel, country):
        """``(T, p)`` design rows for one country."""
        V = self.term_values(panel, country)
        z = np.array([panel.const(country, n) for n in self.spec.const_names], dtype=float)
        out = np.zeros((self.T, self.p))
        out[:, 0] = 1.0
        out[:, 1:1 + self.J] = V
        out[:, 1 + self.J:self.n_fixed] = z
        for j in range(self.J):
            out[:, self.path_slice(j)] = V[:, j:j + 1] * self.C
        if not np.all(np.isfinite(out)):
            raise ValidationError(f"{country}: missing covariate value after imputation")
        return out

    def prior_blocks(self):
        R = difference_penalty(self.T, 2)
        K = self.C.T @ R @ self.C
        rank = self.T - 2
        return K, rank


# --------------------------------------------------------------------------
# likelihood pieces


def nb_logpmf(y, mean, size):
    """Negative-binomial log pmf with mean/size parametrization."""
    from scipy.special import gammaln
    y = np.asarray(y, dtype=float)
    return (gammaln(y + size) - gammaln(size) - gammaln(y + 1)
            + size * np.log(size / (size + mean)) + y * np.log(mean / (size + mean)))


def _cell_logpost(u, y, E, tau, m, s2):
    mu = E * np.exp(u)
    return y * u - (y + tau) * np.log1p(mu / tau) - 0.5 * (u - m) ** 2 / s2


def _cell_mode(u, y, E, tau, m, s2, iters=30):
    for _ in range(iters):
        mu = E * np.exp(u)
        w = mu / (tau + mu)
        g = y - (y + tau) * w - (u - m) / s2
        h = (y + tau) * w * (1.0 - w) + 1.0 / s2
        step = np.clip(g / h, -2.0, 2.0)
        u = u + step
        if np.max(np.abs(step)) < 1e-10:
            break
    mu = E * np.exp(u)
    w = mu / (tau + mu)
    h = (y + tau) * w * (1.0 - w) + 1.0 / s2
    return u, h


def _slice_log(logf, x0, rng, w=1.0, max_steps=50):
    """Univariate slice sampler (stepping out, shrinkage) on the real line."""
    f0 = logf(x0)
    level = f0 + math.log(rng.random())
    lo = x0 - w * rng.random()
    hi = lo + w
    j = max_steps
    while j > 0 and logf(lo) > level:
        lo -= w
        j -= 1
    j = max_steps
    while j > 0 and logf(hi) > level:
        hi += w
        j -= 1
    while True:
        x = lo + (hi - lo) * rng.random()
        if logf(x) > level:
            return x
        if x < x0:
            lo = x
        else:
            hi = x


def _log_sigma_target(log_s, ss, dof, rate):
    """log density of ``log sigma`` given a Gaussian sum of squares ``ss``
    with ``dof`` degrees of freedom and an exponential prior on sigma."""
    s = math.exp(log_s)
    return -dof * log_s - 0.5 * ss / (s * s) - rate * s + log_s


@dataclass
class FitData:
    countries: list
    A: np.ndarray  # (n_obs, p)
    y: np.ndarray
    E: np.ndarray
    tau: np.ndarray
    cells: list  # (country, t) with t in 1..T


def assemble(series, expected, panel, design):
    """Stack observed cells of all fitting countries."""
    rows, ys, Es, taus, cells, countries = [], [], [], [], [], []
    for s in series:
        if s.country not in expected:
            raise ValidationError(f"{s.country}: expected-number distribution missing")
        obs = np.asarray(s.observed[: design.T], dtype=bool)
        if not obs.any():
            continue
        ed = expected[s.country]
        R = design.rows(panel, s.country)
        idx = np.flatnonzero(obs)
        rows.append(R[idx])
        ys.append(np.asarray(s.counts, dtype=float)[idx])
        Es.append(ed.E_hat[idx])
        taus.append(ed.tau_hat[idx])
        cells.extend((s.country, int(t) + 1) for t in idx)
        countries.append(s.country)
    if len(countries) < 2:
        raise ValidationError("at least 2 countries with observed months are required")
    return FitData(countries, np.vstack(rows), np.concatenate(ys),
                   np.concatenate(Es), np.concatenate(taus), cells)


# --------------------------------------------------------------------------
# sampler


@dataclass
class PosteriorDraws:
    """Joint posterior draws (all chains pooled, thinned to ``output_draws``)."""

    design: Design
    b: np.ndarray  # (S, p)
    sigma_eps: np.ndarray  # (S,)
    sigma_path: np.ndarray  # (S, J)
    u: np.ndarray  # (S, n_obs) log theta of fitted cells
    cells: list
    diagnostics: list = field(default_factory=list)
    acceptance: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return len(self.sigma_eps)

    @property
    def alpha(self):
        return self.b[:, 0]

    @property
    def gamma(self):
        return self.b[:, 1:self.design.n_fixed]

    @property
    def paths(self):
        """RW2 deviations ``beta[s, j, t]``."""
        d = self.design
        eta = np.stack([self.b[:, d.path_slice(j)] for j in range(d.J)], axis=1)
        return eta @ d.C.T

    def fixed_summary(self, level=0.95):
        q = (1 - level) / 2
        fx = self.b[:, :self.design.n_fixed]
        return {name: (float(fx[:, i].mean()), float(np.quantile(fx[:, i], q)),
                       float(np.quantile(fx[:, i], 1 - q)))
                for i, name in enumerate(self.design.fixed_names)}


class _Chain:
    def __init__(self, data, design, spec, rng):
        self.data = data
        self.d = design
        self.rng = rng
        self.rate = spec.rate
        self.prior_prec_fixed = 1.0 / spec.fixed_sd**2
        self.K, self.rank = design.prior_blocks()
        self.kappa, self.V = np.linalg.eigh(self.K)
        self.kappa = np.maximum(self.kappa, 0.0)
        self.AtA = data.A.T @ data.A
        self.A_path = [np.ascontiguousarray(data.A[:, design.path_slice(j)]) for j in range(design.J)]
        self.AtA_path = [self.V.T @ self.AtA[design.path_slice(j), design.path_slice(j)] @ self.V
                         for j in range(design.J)]
        self.u = np.log(np.maximum(data.y, 0.5) / data.E)
        self.sigma_eps = 0.2 * math.exp(rng.normal(0, 0.3))
        self.sigma_path = 0.1 * np.exp(rng.normal(0, 0.3, size=design.J))
        self.b = np.zeros(design.p)
        self.draw_b()
        self.accept_u = 0.0
        self.n_u = 0

    def prior_precision(self):
        d = self.d
        P = np.zeros((d.p, d.p))
        P[np.arange(d.n_fixed), np.arange(d.n_fixed)] = self.prior_prec_fixed
        for j in range(d.J):
            sl = d.path_slice(j)
            P[sl, sl] = self.K / self.sigma_path[j] ** 2 + self.prior_prec_fixed * np.eye(d.T - 1)
        return P

    def draw_b(self):
        s2 = self.sigma_eps**2
        Q = self.AtA / s2 + self.prior_precision()
        L = linalg.cholesky(Q, lower=True)
        rhs = self.data.A.T @ self.u / s2
        mean = linalg.cho_solve((L, True), rhs)
        z = self.rng.standard_normal(self.d.p)
        self.b = mean + linalg.solve_triangular(L, z, lower=True, trans="T")

    def draw_u(self):
        dt = self.data
        m = dt.A @ self.b
        s2 = self.sigma_eps**2
        mode, h = _cell_mode(self.u, dt.y, dt.E, dt.tau, m, s2)
        sd = 1.0 / np.sqrt(h)
        prop = mode + sd * self.rng.standard_normal(len(mode))
        lp_new = _cell_logpost(prop, dt.y, dt.E, dt.tau, m, s2)
        lp_old = _cell_logpost(self.u, dt.y, dt.E, dt.tau, m, s2)
        lq_new = -0.5 * ((prop - mode) / sd) ** 2
        lq_old = -0.5 * ((self.u - mode) / sd) ** 2
        accept = np.log(self.rng.random(len(mode))) < (lp_new - lp_old) - (lq_new - lq_old)
        self.u = np.where(accept, prop, self.u)
        self.accept_u += accept.mean()
        self.n_u += 1

    def draw_sigma_eps(self):
        r = self.u - self.data.A @ self.b
        ss = float(r @ r)
        n = len(r)
        x = _slice_log(lambda v: _log_sigma_target(v, ss, n, self.rate),
                       math.log(self.sigma_eps), self.rng, w=0.5)
        self.sigma_eps = math.exp(x)

    def draw_paths(self):
        """Partially collapsed update of each ``(sigma_j, eta_j)``.

        ``sigma_j`` is slice-sampled with ``eta_j`` integrated out of the
        Gaussian regression of ``u``, then ``eta_j`` is drawn given it.
        """
        d = self.d
        s2 = self.sigma_eps**2
        A = self.data.A
        r = self.u - A @ self.b
        rho = self.prior_prec_fixed
        V = self.V
        for j in range(d.J):
            sl = d.path_slice(j)
            Aj = self.A_path[j]
            r = r + Aj @ self.b[sl]
            # Q(sigma) = diag(kappa) / sigma^2 + B in the eigenbasis of the RW2
            # structure; a generalized eigendecomposition makes every
            # evaluation over sigma diagonal.
            h = V.T @ (Aj.T @ r) / s2
            B = self.AtA_path[j] / s2
            B[np.diag_indices_from(B)] += rho
            Lb = np.linalg.cholesky(B)
            Li = linalg.solve_triangular(Lb, np.eye(d.T - 1), lower=True, check_finite=False)
            lam, U = np.linalg.eigh((Li * self.kappa) @ Li.T)
            lam = np.maximum(lam, 0.0)
            g = U.T @ (Li @ h)
            g2 = g * g
            k = self.kappa

            def logf(log_s):
                inv_s2 = math.exp(-2.0 * log_s)
                dq = lam * inv_s2 + 1.0
                return (0.5 * float(np.log(k * inv_s2 + rho).sum()) - 0.5 * float(np.log(dq).sum())
                        + 0.5 * float((g2 / dq).sum()) - self.rate * math.exp(log_s) + log_s)

            x = _slice_log(logf, math.log(self.sigma_path[j]), self.rng, w=1.0)
            self.sigma_path[j] = math.exp(x)
            dq = lam * math.exp(-2.0 * x) + 1.0
            z = self.rng.standard_normal(d.T - 1)
            eta = V @ (Li.T @ (U @ ((g + np.sqrt(dq) * z) / dq)))
            self.b[sl] = eta
            r = r - Aj @ eta

    def step(self):
        self.draw_u()
        self.draw_b()
        self.draw_sigma_eps()
        if self.d.J:
            self.draw_paths()


def fit_model(series, expected, panel, spec, config=None, seed=0, init=None):
    """Sample the covariate model posterior.

    Parameters
    ----------
    series : list of MortalitySeries
        Countries whose observed months enter the likelihood.
    expected : dict
        Country code to ``ExpectedDistribution``.
    panel : CovariatePanel
        Standardized covariates (must cover every fitting country).
    init : PosteriorDraws, optional
        Warm start; chains start from its last draws and warmup may be short.

    Raises
    ------
    DiagnosticsError
        When split-R-hat or effective sample size checks fail.
    """
    config = config or McmcConfig()
    design = Design(spec, panel)
    data = assemble(series, expected, panel, design)
    total = config.chains * config.draws
    keep = keep_indices(total, config.output_draws)

    trace = {"alpha": [], "sigma_eps": []}
    for name in design.fixed_names[1:]:
        trace[f"gamma[{name}]"] = []
    for name in design.path_names:
        trace[f"sigma[{name}]"] = []
    kept_b, kept_se, kept_sp, kept_u = [], [], [], []
    acc_u = []

    for c in range(config.chains):
        rng = child_rng(seed, "covariate", c)
        ch = _Chain(data, design, spec, rng)
        if init is not None:
            i = (c + 1) * init.n_draws // config.chains - 1
            ch.b = init.b[i].copy()
            ch.sigma_eps = float(init.sigma_eps[i])
            ch.sigma_path = init.sigma_path[i].copy()
            if init.u.shape[1] == len(data.y) and init.cells == data.cells:
                ch.u = init.u[i].copy()
        for _ in range(config.warmup):
            ch.step()
        ch.accept_u = 0.0
        ch.n_u = 0
        rows = {k: np.empty(config.draws) for k in trace}
        for it in range(config.draws):
            ch.step()
            rows["alpha"][it] = ch.b[0]
            rows["sigma_eps"][it] = ch.sigma_eps
            for g, name in enumerate(design.fixed_names[1:]):
                rows[f"gamma[{name}]"][it] = ch.b[1 + g]
            for j, name in enumerate(design.path_names):
                rows[f"sigma[{name}]"][it] = ch.sigma_path[j]
            if c * config.draws + it in keep:
                kept_b.append(ch.b.copy())
                kept_se.append(ch.sigma_eps)
                kept_sp.append(ch.sigma_path.copy())
                kept_u.append(ch.u.copy())
        for k in trace:
            trace[k].append(rows[k])
        acc_u.append(ch.accept_u / max(ch.n_u, 1))

    table = diagnostics_table({k: np.array(v) for k, v in trace.items()},
                              config.rhat_max, config.min_ess)
    draws = PosteriorDraws(
        design=design, b=np.array(kept_b), sigma_eps=np.array(kept_se),
        sigma_path=np.array(kept_sp).reshape(len(kept_se), design.J), u=np.array(kept_u),
        cells=data.cells, diagnostics=table,
        acceptance={"u": float(np.mean(acc_u))},
    )
    bad = [row for row in table if not row[3]]
    if bad and config.check:
        raise DiagnosticsError("covariate model failed convergence checks:\n" + format_table(table),
                               table)
    return draws


# --------------------------------------------------------------------------
# prediction


def nb_draw(rng, mean, size):
    """Negative-binomial draws with the given mean and size (shape)."""
    mean = np.asarray(mean, dtype=float)
    size = np.broadcast_to(np.asarray(size, dtype=float), mean.shape)
    return rng.negative_binomial(size, size / (size + mean))


def linear_predictor(draws, panel, country):
    """``(S, T)`` regression part of ``log theta`` (no overdispersion term)."""
    return draws.b @ draws.design.rows(panel, country).T


def theta_draws(draws, panel, country, rng, fresh_eps=True):
    eta = linear_predictor(draws, panel, country)
    if fresh_eps:
        eta = eta + draws.sigma_eps[:, None] * rng.standard_normal(eta.shape)
    return np.exp(eta)


def predict_no_data(draws, expected, panel, country, rng):
    """Posterior predictive ACM for a country with no pandemic data.

    Returns ``(theta, Y)`` each of shape ``(S, T)``.
    """
    ed = expected[country] if isinstance(expected, dict) else expected
    theta = theta_draws(draws, panel, country, rng)
    Y = nb_draw(rng, ed.E_hat[None, :] * theta, ed.tau_hat[None, :])
    return theta, Y


def benchmark_factor(y_last, E_last, theta_last):
    """Per-draw ratio of the last observed count to its model mean."""
    return y_last / (E_last * np.asarray(theta_last, dtype=float))


def benchmark_partial(draws, series, expected, panel, rng):
    """Predict the missing months of a partial series with benchmarking.

    ``theta`` at the last observed month uses the regression part only; the
    predicted months use fresh overdispersion draws. Returns ``(theta, f, Y)``
    where ``Y`` has observed counts in the observed prefix.
    """
    ed = expected[series.country] if isinstance(expected, dict) else expected
    T1 = series.n_observed_prefix
    if T1 < 1:
        raise ValidationError(f"{series.country}: partial series needs at least one observed month")
    eta = linear_predictor(draws, panel, series.country)
    y_last = float(series.counts[T1 - 1])
    if y_last > 0:
        f = benchmark_factor(y_last, ed.E_hat[T1 - 1], np.exp(eta[:, T1 - 1]))
    else:
        warnings.warn(f"{series.country}: last observed count is 0; prediction is not benchmarked")
        f = np.ones(len(eta))
    theta = np.exp(eta + draws.sigma_eps[:, None] * rng.standard_normal(eta.shape))
    T = eta.shape[1]
    Y = np.tile(np.asarray(series.counts[:T], dtype=float), (len(eta), 1))
    miss = np.arange(T) >= T1
    mean = ed.E_hat[None, miss] * theta[:, miss] * f[:, None]
    Y[:, miss] = nb_draw(rng, mean, ed.tau_hat[None, miss])
    return theta, f, Y


def apportion_annual_country(draws, annual_totals, expected, panel, country, rng):
    """Split observed annual totals into months, per draw.

    Month probabilities within each year are proportional to ``E * theta``.
    ``annual_totals`` is a sequence (year 1, year 2, ...) or a mapping from
    zero-based year index to total; months of years without a total are 0.
    """
    if not isinstance(annual_totals, dict):
        annual_totals = dict(enumerate(annual_totals))
    totals = {int(v): int(tot) for v, tot in annual_totals.items()}
    if any(v < 0 for v in totals.values()):
        raise ValidationError(f"{country}: annual total must be non-negative")
    ed = expected[country] if isinstance(expected, dict) else expected
    theta = theta_draws(draws, panel, country, rng)
    weights = ed.E_hat[None, :] * theta
    S, T = weights.shape
    Y = np.zeros((S, T), dtype=np.int64)
    for v, tot in sorted(totals.items()):
        sl = slice(12 * v, 12 * (v + 1))
        p = weights[:, sl] / weights[:, sl].sum(axis=1, keepdims=True)
        Y[:, sl] = rng.multinomial(tot, p)
    return Y


def in_sample_predictive(draws, expected, rng):
    """Predictive draws for every fitted cell: ``(S, n_obs)``."""
    E = np.array([expected[c].E_hat[t - 1] for c, t in draws.cells])
    tau = np.array([expected[c].tau_hat[t - 1] for c, t in draws.cells])
    return nb_draw(rng, E[None, :] * np.exp(draws.u), tau[None, :])
