"""Convergence diagnostics for multi-chain MCMC output."""

from __future__ import annotations

import numpy as np


def _as_chains(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 4:
        raise ValueError("expected an array of shape (chains, draws) with at least 4 draws")
    return x


def _split(x):
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, -n:]], axis=0)


def split_rhat(chains):
    """Potential scale reduction on split chains (each chain halved)."""
    x = _split(_as_chains(chains))
    m, n = x.shape
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0:
        return 1.0 if B <= 0 else np.inf
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x):
    n = len(x)
    y = x - x.mean()
    f = np.fft.rfft(y, n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    return ac / n


def effective_sample_size(chains):
    """Multi-chain ESS with Geyer's initial monotone sequence."""
    x = _split(_as_chains(chains))
    m, n = x.shape
    acov = np.array([_autocov(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    var_plus = W * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative and made monotone
    total = 0.0
    prev = np.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        total += pair
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def diagnostics_table(named_chains, rhat_max=1.02, min_ess=400):
    """Rows ``(name, rhat, ess, ok)`` for a dict of name -> (chains, draws)."""
    rows = []
    for name, chains in named_chains.items():
        r = split_rhat(chains)
        e = effective_sample_size(chains)
        rows.append((name, r, e, bool(r < rhat_max and e >= min_ess)))
    return rows


def format_table(rows):
    lines = [f"{'parameter':<28}{'rhat':>8}{'ess':>10}  ok"]
    for name, r, e, ok in rows:
        lines.append(f"{name:<28}{r:>8.4f}{e:>10.1f}  {'yes' if ok else 'NO'}")
    return "\n".join(lines)


def keep_indices(total, n):
    """Evenly spaced positions of ``min(n, total)`` kept draws out of ``total``."""
    n = max(1, min(int(n), int(total)))
    return set(np.linspace(0, total - 1, n).round().astype(int).tolist())
