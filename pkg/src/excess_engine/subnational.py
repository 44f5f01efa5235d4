"""National monthly deaths inferred from region-level data.

Three tools live here:

* a multinomial share model for regions with month-varying availability,
  fitted on historic months where the national total is known, and used to
  predict the unobserved remainder of pandemic months;
* an AR1 model on ``log(Y / E)`` for trailing months that are too sparse;
* a Metropolis sampler over integer monthly counts constrained to an annual
  total, combining binomial surveillance counts with a multinomial prior.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .covariate import _log_sigma_target, _slice_log, pc_rate
from .diagnostics import diagnostics_table, format_table, keep_indices
from .errors import DiagnosticsError, ValidationError
from .rng import child_rng

FIXED_SD = 31.6


@dataclass
class SubnationalPanel:
    """Region counts with missing cells as NaN.

    ``hist_counts`` is ``(H, K)`` with national totals ``hist_totals`` (H,);
    ``counts`` is ``(T, K)`` for the pandemic months.
    """

    country: str
    regions: list
    hist_counts: np.ndarray
    hist_totals: np.ndarray
    counts: np.ndarray | None = None

    def __post_init__(self):
        self.hist_counts = np.asarray(self.hist_counts, dtype=float)
        self.hist_totals = np.asarray(self.hist_totals, dtype=float)
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=float)
        if self.hist_counts.shape != (len(self.hist_totals), len(self.regions)):
            raise ValidationError(f"{self.country}: historic panel shape mismatch")
        observed_sum = np.nansum(self.hist_counts, axis=1)
        bad = np.flatnonzero(observed_sum > self.hist_totals)
        if bad.size:
            raise ValidationError(
                f"{self.country}: region counts exceed the national total in historic month {bad[0] + 1}")
        if np.any(self.hist_counts < 0) or (self.counts is not None and np.any(self.counts < 0)):
            raise ValidationError(f"{self.country}: negative region counts")

    @property
    def hist_mask(self):
        return ~np.isnan(self.hist_counts)

    @property
    def mask(self):
        return ~np.isnan(self.counts)


# --------------------------------------------------------------------------
# share model


def _share_loglik(alpha, e, y, mask, totals):
    a = alpha[None, :] + e[:, None]
    amax = np.maximum(a.max(axis=1, keepdims=True), 0.0)
    ea = np.exp(a - amax)
    ref = np.exp(-amax[:, 0])
    logD = np.log(ref + ea.sum(axis=1))
    N = ref + (ea * ~mask).sum(axis=1)
    r = totals - y.sum(axis=1)
    return float((y * (a - amax)).sum() - (y.sum(axis=1) * logD).sum()
                 + (r * (np.log(N) - logD)).sum())


def _share_terms(alpha, e, y, mask, totals, observed=False):
    """Log-likelihood, gradient in ``a = alpha + e`` and Fisher information
    for the collapsed multinomial of every month."""
    a = alpha[None, :] + e[:, None]
    amax = np.maximum(a.max(axis=1, keepdims=True), 0.0)
    ea = np.exp(a - amax)
    ref = np.exp(-amax[:, 0])
    D = ref + ea.sum(axis=1)
    q = ea / D[:, None]
    U = ~mask
    N = ref + (ea * U).sum(axis=1)
    p_rem = N / D
    yo = np.where(mask, y, 0.0)
    r = totals - yo.sum(axis=1)
    ll = float((yo * np.log(np.where(mask, q, 1.0))).sum() + (r * np.log(p_rem)).sum())
    s = np.where(U, ea / N[:, None], 0.0)
    grad = np.where(mask, yo - totals[:, None] * q, r[:, None] * s - totals[:, None] * q)
    qo = q * mask
    so = qo.sum(axis=1)
    info = (np.einsum("hk,kj->hkj", qo, np.eye(q.shape[1]))
            - qo[:, :, None] * q[:, None, :] - q[:, :, None] * qo[:, None, :]
            + so[:, None, None] * q[:, :, None] * q[:, None, :])
    v = (U.astype(float) - p_rem[:, None]) * q
    info += v[:, :, None] * v[:, None, :] / p_rem[:, None, None]
    info *= totals[:, None, None]
    if observed:
        # negative Hessian of the log-likelihood in a
        obs = totals[:, None, None] * (np.einsum("hk,kj->hkj", q, np.eye(q.shape[1]))
                                       - q[:, :, None] * q[:, None, :])
        obs -= r[:, None, None] * (np.einsum("hk,kj->hkj", s, np.eye(q.shape[1]))
                                   - s[:, :, None] * s[:, None, :])
        return ll, grad, obs
    return ll, grad, info


class _ShareTarget:
    def __init__(self, y, mask, totals):
        self.y, self.mask, self.totals = y, mask, totals
        self.H, self.K = y.shape
        self.prec_alpha = 1.0 / FIXED_SD**2

    def split(self, x):
        return x[: self.K], x[self.K:]

    def logpost(self, x, sigma_e):
        alpha, e = self.split(x)
        ll = _share_loglik(alpha, e, self.y, self.mask, self.totals)
        return ll - 0.5 * self.prec_alpha * alpha @ alpha - 0.5 * (e @ e) / sigma_e**2

    def grad_info(self, x, sigma_e, observed=False):
        alpha, e = self.split(x)
        ll, g, info = _share_terms(alpha, e, self.y, self.mask, self.totals, observed)
        K, H = self.K, self.H
        grad = np.concatenate([g.sum(axis=0) - self.prec_alpha * alpha,
                               g.sum(axis=1) - e / sigma_e**2])
        Q = np.zeros((K + H, K + H))
        Q[:K, :K] = info.sum(axis=0) + self.prec_alpha * np.eye(K)
        cross = info.sum(axis=2)  # (H, K)
        Q[K:, :K] = cross
        Q[:K, K:] = cross.T
        Q[np.arange(K, K + H), np.arange(K, K + H)] = info.sum(axis=(1, 2)) + 1.0 / sigma_e**2
        return grad, Q

    def mode(self, x, sigma_e, max_iter=50):
        f = self.logpost(x, sigma_e)
        for _ in range(max_iter):
            g, Q = self.grad_info(x, sigma_e)
            step = linalg.solve(Q, g, assume_a="pos")
            t = 1.0
            while True:
                xn = x + t * step
                fn = self.logpost(xn, sigma_e)
                if fn >= f - 1e-10 or t < 1e-8:
                    break
                t *= 0.5
            x, f_old, f = xn, f, fn
            if abs(f - f_old) < 1e-10 * (1 + abs(f)) and np.max(np.abs(t * step)) < 1e-8:
                break
        g, Q = self.grad_info(x, sigma_e, observed=True)
        try:
            linalg.cholesky(Q, lower=True)
        except linalg.LinAlgError:
            g, Q = self.grad_info(x, sigma_e)
        return x, Q


class _ProposalGrid:
    """Laplace proposals cached on a grid of ``log sigma_e``.

    The proposal centre interpolates grid modes linearly and the precision is
    taken from the nearest grid point, so the proposal is a fixed function of
    ``sigma_e`` and the independence Metropolis step stays exact.
    """

    def __init__(self, target, x0, lo=math.log(1e-3), hi=math.log(5.0), n=120):
        self.target = target
        self.grid = np.linspace(lo, hi, n)
        self.x0 = x0
        self.cache = {}

    def _point(self, i):
        if i not in self.cache:
            near = [j for j in self.cache if abs(j - i) <= 3]
            start = self.cache[min(near, key=lambda j: abs(j - i))][0] if near else self.x0
            mode, Q = self.target.mode(start.copy(), math.exp(self.grid[i]))
            self.cache[i] = (mode, Q, linalg.cholesky(Q, lower=True))
        return self.cache[i]

    def __call__(self, sigma):
        ls = min(max(math.log(sigma), self.grid[0]), self.grid[-1])
        pos = (ls - self.grid[0]) / (self.grid[1] - self.grid[0])
        i = min(int(pos), len(self.grid) - 2)
        w = pos - i
        m0, m1 = self._point(i)[0], self._point(i + 1)[0]
        _, Q, L = self._point(i if w < 0.5 else i + 1)
        return (1 - w) * m0 + w * m1, Q, L


@dataclass
class ShareConfig:
    chains: int = 4
    warmup: int = 500
    draws: int = 1000
    output_draws: int = 1000
    df: float = 8.0
    rhat_max: float = 1.02
    min_ess: float = 400.0
    check: bool = True


@dataclass
class SharePosterior:
    """Posterior draws of region log-share parameters and month-effect sd."""

    country: str
    regions: list
    alpha: np.ndarray  # (S, K)
    sigma_e: np.ndarray  # (S,)
    diagnostics: list = field(default_factory=list)
    acceptance: float = float("nan")

    @property
    def n_draws(self):
        return len(self.sigma_e)


def _mvt_logq(x, mode, Q, df):
    d = x - mode
    return -0.5 * (df + len(x)) * math.log1p(float(d @ Q @ d) / df)


def fit_share_model(panel, config=None, seed=0, rate=None):
    """Sample the share-model posterior from the historic months.

    The latent ``(alpha, e)`` block is updated by an independence Metropolis
    step whose proposal is a multivariate t centred at the conditional mode;
    ``sigma_e`` is slice-sampled under an exponential prior.
    """
    config = config or ShareConfig()
    rate = pc_rate() if rate is None else rate
    mask = panel.hist_mask
    H, K = mask.shape
    if H < 12:
        raise ValidationError(f"{panel.country}: at least 12 historic months are required")
    never = [panel.regions[k] for k in range(K) if not mask[:, k].any()]
    if never:
        raise ValidationError(f"{panel.country}: region never observed historically: {', '.join(never)}")
    y = np.where(mask, panel.hist_counts, 0.0)
    target = _ShareTarget(y, mask, panel.hist_totals)

    # starting point: empirical log ratios to the remainder
    share = (y.sum(axis=0) + 0.5) / (mask * panel.hist_totals[:, None]).sum(axis=0)
    rem = max(1.0 - share.sum(), 0.05)
    x0 = np.concatenate([np.log(share / rem), np.zeros(H)])

    total = config.chains * config.draws
    keep = keep_indices(total, config.output_draws)
    trace = {f"alpha[{r}]": [] for r in panel.regions}
    trace["sigma_e"] = []
    kept_a, kept_s = [], []
    accepted = 0
    proposal = _ProposalGrid(target, x0)
    for c in range(config.chains):
        rng = child_rng(seed, "share", panel.country, c)
        sigma = 0.3 * math.exp(rng.normal(0, 0.3))
        mode, Q, L = proposal(sigma)
        x = mode + linalg.solve_triangular(L, rng.standard_normal(K + H), lower=True, trans="T")
        rows = np.empty((config.draws, K + 1))
        for it in range(config.warmup + config.draws):
            mode, Q, L = proposal(sigma)
            z = rng.standard_normal(K + H) * math.sqrt(config.df / rng.chisquare(config.df))
            prop = mode + linalg.solve_triangular(L, z, lower=True, trans="T")
            log_r = (target.logpost(prop, sigma) - target.logpost(x, sigma)
                     - _mvt_logq(prop, mode, Q, config.df) + _mvt_logq(x, mode, Q, config.df))
            if math.log(rng.random()) < log_r:
                x = prop
                if it >= config.warmup:
                    accepted += 1
            # exact draw along alpha + c, e - c: the likelihood is flat there
            prec = H / sigma**2 + K * target.prec_alpha
            mean = (x[K:].sum() / sigma**2 - target.prec_alpha * x[:K].sum()) / prec
            shift = mean + rng.standard_normal() / math.sqrt(prec)
            x[:K] += shift
            x[K:] -= shift
            e = x[K:]
            ss = float(e @ e)
            sigma = math.exp(_slice_log(lambda v: _log_sigma_target(v, ss, H, rate),
                                        math.log(sigma), rng, w=0.5))
            # rescale e with sigma: the e prior term is invariant along this move,
            # which breaks the sigma/e funnel that slows the conditional update
            step = math.exp(0.3 * rng.standard_normal())
            prop = x.copy()
            prop[K:] *= step
            log_r = (target.logpost(prop, sigma * step) - target.logpost(x, sigma)
                     - rate * sigma * (step - 1.0) + math.log(step))
            if math.log(rng.random()) < log_r:
                x, sigma = prop, sigma * step
            if it >= config.warmup:
                i = it - config.warmup
                rows[i, :K] = x[:K]
                rows[i, K] = sigma
                if c * config.draws + i in keep:
                    kept_a.append(x[:K].copy())
                    kept_s.append(sigma)
        for k, r in enumerate(panel.regions):
            trace[f"alpha[{r}]"].append(rows[:, k])
        trace["sigma_e"].append(rows[:, K])
    table = diagnostics_table({k: np.array(v) for k, v in trace.items()},
                              config.rhat_max, config.min_ess)
    post = SharePosterior(panel.country, list(panel.regions), np.array(kept_a), np.array(kept_s),
                          table, accepted / total)
    if config.check and not all(row[3] for row in table):
        raise DiagnosticsError(f"{panel.country}: share model failed convergence checks:\n"
                               + format_table(table), table)
    return post


def observed_fraction(alpha, e, mask_row):
    """``p_t``: probability that a death falls in an observed region."""
    a = alpha + e[:, None]
    amax = np.maximum(a.max(axis=1, keepdims=True), 0.0)
    ea = np.exp(a - amax)
    D = np.exp(-amax[:, 0]) + ea.sum(axis=1)
    return (ea * mask_row).sum(axis=1) / D


def draw_remainder(rng, y1, p):
    """Unobserved deaths given observed ``y1`` and observed fraction ``p``.

    Under the ``1/Y`` prior on the national total the remainder is
    negative binomial with ``y1`` successes and success probability ``p``.
    """
    p = np.asarray(p, dtype=float)
    if y1 <= 0:
        if np.all(p >= 1.0):
            return np.zeros(p.shape, dtype=np.int64)
        raise ValidationError("no deaths observed in the reporting regions; "
                              "the national posterior is improper, use the covariate model")
    out = np.zeros(p.shape, dtype=np.int64)
    inner = p < 1.0
    out[inner] = rng.negative_binomial(y1, p[inner])
    return out


def predict_national(post, counts, rng, fresh_effect=True):
    """Posterior draws of national totals for months with region data.

    ``counts`` is ``(T, K)`` with NaN for missing regions. Months where no
    region reports produce NaN columns.
    """
    counts = np.asarray(counts, dtype=float)
    mask = ~np.isnan(counts)
    S = post.n_draws
    out = np.full((S, counts.shape[0]), np.nan)
    for t in range(counts.shape[0]):
        if not mask[t].any():
            continue
        y1 = float(np.nansum(counts[t]))
        e = post.sigma_e * rng.standard_normal(S) if fresh_effect else np.zeros(S)
        p = observed_fraction(post.alpha, e, mask[t])
        out[:, t] = y1 + draw_remainder(rng, int(round(y1)), p)
    return out


# --------------------------------------------------------------------------
# AR1 tail model


def _ar1_loglik(mu, rho, s, x, v):
    """Kalman-filter log-likelihood of a stationary AR1 observed with noise."""
    m = mu
    P = s * s / (1.0 - rho * rho)
    ll = 0.0
    for xt, vt in zip(x, v):
        F = P + vt
        resid = xt - m
        ll -= 0.5 * (math.log(2 * math.pi * F) + resid * resid / F)
        K = P / F
        m = m + K * resid
        P = (1 - K) * P
        m = mu + rho * (m - mu)
        P = rho * rho * P + s * s
    return ll


def _ar1_filter(mu, rho, s, x, v):
    """Filtered mean and variance of the state at the last observed month."""
    m = mu
    P = s * s / (1.0 - rho * rho)
    for t, (xt, vt) in enumerate(zip(x, v)):
        if t:
            m = mu + rho * (m - mu)
            P = rho * rho * P + s * s
        K = P / (P + vt)
        m = m + K * (xt - m)
        P = (1 - K) * P
    return m, P


@dataclass
class Ar1Result:
    ratio: np.ndarray  # (S, h) draws of log(Y/E)
    Y: np.ndarray | None
    params: np.ndarray  # (S, 3): mu, rho, marginal sd
    acceptance: float


def ar1_tail_extrapolate(log_ratio, variances, horizon, rng, E=None, n_iter=6000, burn=2000,
                         n_draws=1000, rate=None):
    """Predict ``log(Y/E)`` for ``horizon`` months after the supplied series.

    Priors: ``mu ~ N(0, 1)``, ``rho ~ Uniform(-1, 1)``, marginal sd
    exponential with rate ``-log(0.01)``. Random-walk Metropolis on
    ``(mu, atanh rho, log sd)`` with scale adapted during burn-in.
    """
    x = np.asarray(log_ratio, dtype=float)
    v = np.asarray(variances, dtype=float)
    if len(x) < 12 or len(v) != len(x):
        raise ValidationError("AR1 tail model needs at least 12 months with matching variances")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v)) and np.all(v >= 0)):
        raise ValidationError("AR1 tail model inputs must be finite with non-negative variances")
    if horizon < 1:
        raise ValidationError("horizon must be at least 1")
    rate = pc_rate() if rate is None else rate
    xs, vs = list(x), list(np.maximum(v, 1e-12))

    def logpost(th):
        mu, z, ls = th
        rho = math.tanh(z)
        sm = math.exp(ls)
        s = sm * math.sqrt(1 - rho * rho)
        if s <= 0:
            return -np.inf
        lp = -0.5 * mu * mu
        lp += math.log(1 - rho * rho)  # uniform prior on rho through atanh
        lp += -rate * sm + ls
        return lp + _ar1_loglik(mu, rho, s, xs, vs)

    th = np.array([float(np.mean(x)), 0.0, math.log(max(np.std(x), 0.05))])
    lp = logpost(th)
    scale = np.array([0.1, 0.3, 0.2])
    kept = []
    acc = 0
    for it in range(n_iter):
        prop = th + scale * rng.standard_normal(3)
        lpp = logpost(prop)
        ok = math.log(rng.random()) < lpp - lp
        if ok:
            th, lp = prop, lpp
        if it < burn:
            scale *= math.exp((float(ok) - 0.3) / math.sqrt(it + 10))
        else:
            acc += ok
            kept.append(th.copy())
    kept = np.array(kept)
    idx = np.linspace(0, len(kept) - 1, n_draws).round().astype(int)
    kept = kept[idx]
    ratio = np.empty((n_draws, horizon))
    params = np.empty((n_draws, 3))
    for i, (mu, z, ls) in enumerate(kept):
        rho = math.tanh(z)
        sm = math.exp(ls)
        s = sm * math.sqrt(1 - rho * rho)
        m, P = _ar1_filter(mu, rho, s, xs, vs)
        state = m + math.sqrt(max(P, 0.0)) * rng.standard_normal()
        for k in range(horizon):
            state = mu + rho * (state - mu) + s * rng.standard_normal()
            ratio[i, k] = state
        params[i] = (mu, rho, sm)
    Y = None
    if E is not None:
        Y = np.asarray(E, dtype=float)[None, :horizon] * np.exp(ratio)
    return Ar1Result(ratio, Y, params, acc / max(n_iter - burn, 1))


# --------------------------------------------------------------------------
# constrained-count sampler


@dataclass
class ConstrainedResult:
    draws: np.ndarray  # (S, n) integer counts
    acceptance_trace: np.ndarray  # cumulative post-burn-in acceptance rate
    acceptance: float
    j_max: int
    p_draws: np.ndarray | None = None


def _count_term(y, z, c):
    return -math.lgamma(y - z + 1) + y * c


def constrained_count_mcmc(total, anchors, rng, z=None, p=None, logit_p_prior=None,
                           start=None, n_iter=10_000, burn=None, thin=1, j_max=None,
                           k_max=6, target_accept=0.45):
    """Sample integer monthly counts that sum to ``total``.

    Target: product of ``Binomial(z_t | Y_t, p_t)`` and
    ``Multinomial(Y | total, anchors / sum(anchors))``.

    Parameters
    ----------
    z : array, optional
        Surveillance counts; omitted means no binomial term.
    p : array, optional
        Known surveillance fractions. When omitted and ``z`` is given,
        ``logit p_t ~ N(mean, variance)`` from ``logit_p_prior`` and the
        fractions are updated by random-walk Metropolis.
    j_max : int, optional
        Largest step size; ``J`` is uniform on ``1..j_max``. When omitted
        it is adapted during burn-in toward ``target_accept``.
    """
    a = np.asarray(anchors, dtype=float)
    n = len(a)
    if np.any(a <= 0):
        raise ValidationError("anchors must be positive")
    total = int(total)
    if start is None:
        start = np.floor(a / a.sum() * total).astype(np.int64)
        start[np.argmax(a)] += total - start.sum()
    Y = np.asarray(start, dtype=np.int64).copy()
    if Y.sum() != total:
        raise ValidationError(f"start sums to {int(Y.sum())}, not the total {total}")
    zz = np.zeros(n, dtype=np.int64) if z is None else np.asarray(z, dtype=np.int64)
    if np.any(Y < zz):
        raise ValidationError("start is below the surveillance counts")
    log_pi = np.log(a / a.sum())
    update_p = z is not None and p is None
    if z is None:
        pv = np.zeros(n)
    elif p is not None:
        pv = np.asarray(p, dtype=float)
    else:
        if logit_p_prior is None:
            raise ValidationError("surveillance fractions need either p or a logit prior")
        pm, pvar = logit_p_prior
        pv = np.full(n, 1.0 / (1.0 + math.exp(-pm)))
    burn = n_iter // 2 if burn is None else burn
    kmax = max(1, min(k_max, n // 2))
    adapt = j_max is None
    jm = max(1, int(round(math.sqrt(total / n)))) if adapt else int(j_max)

    c = np.log1p(-pv) + log_pi
    zl, cl, Yl = zz.tolist(), c.tolist(), Y.tolist()
    idx = list(range(n))
    kept, trace, pk = [], [], []
    acc_after = 0
    acc_window = 0
    # a stdlib generator seeded from ``rng`` keeps the scalar loop fast
    py = random.Random(int(rng.integers(2**63)))
    rnd = py.random
    for it in range(n_iter):
        K = 1 + int(rnd() * kmax)
        J = 1 + int(rnd() * jm)
        cells = py.sample(idx, 2 * K) if K > 1 else _two_distinct(rnd, n)
        down, up = cells[:K], cells[K:]
        ok = all(Yl[i] - J >= zl[i] for i in down)
        accepted = False
        if ok:
            delta = 0.0
            for i in down:
                delta += _count_term(Yl[i] - J, zl[i], cl[i]) - _count_term(Yl[i], zl[i], cl[i])
            for i in up:
                delta += _count_term(Yl[i] + J, zl[i], cl[i]) - _count_term(Yl[i], zl[i], cl[i])
            if delta >= 0 or math.log(rnd()) < delta:
                for i in down:
                    Yl[i] -= J
                for i in up:
                    Yl[i] += J
                accepted = True
        if update_p:
            pv = _update_p(rng, pv, np.array(Yl), zz, pm, pvar)
            cl = (np.log1p(-pv) + log_pi).tolist()
        if it < burn:
            acc_window += accepted
            if adapt and (it + 1) % 200 == 0:
                rate_w = acc_window / 200
                if rate_w > target_accept + 0.05:
                    jm = max(1, int(math.ceil(jm * 1.25)))
                elif rate_w < target_accept - 0.05 and jm > 1:
                    jm = max(1, int(jm / 1.25))
                acc_window = 0
        else:
            acc_after += accepted
            k = it - burn + 1
            trace.append(acc_after / k)
            if (it - burn) % thin == 0:
                kept.append(list(Yl))
                if update_p:
                    pk.append(pv.copy())
    draws = np.array(kept, dtype=np.int64)
    tr = np.array(trace)
    return ConstrainedResult(draws, tr, float(tr[-1]) if len(tr) else float("nan"), jm,
                             np.array(pk) if pk else None)


def _two_distinct(rnd, n):
    i = int(rnd() * n)
    j = int(rnd() * (n - 1))
    if j >= i:
        j += 1
    return [i, j]


def _update_p(rng, p, Y, z, mean, var, step=0.15):
    """Componentwise random-walk update of ``logit p`` under its normal prior."""
    lp = np.log(p) - np.log1p(-p)
    prop = lp + step * rng.standard_normal(len(p))
    pp = 1.0 / (1.0 + np.exp(-prop))

    def lt(l, q):
        return z * np.log(q) + (Y - z) * np.log1p(-q) - 0.5 * (l - mean) ** 2 / var

    accept = np.log(rng.random(len(p))) < lt(prop, pp) - lt(lp, p)
    return np.where(accept, pp, p)
