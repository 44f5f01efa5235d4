"""Plot-ready tidy tables and matplotlib figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .aggregation import aggregate, period_labels  # noqa: E402

SERIES_COLUMNS = ("level", "key", "period", "month", "point", "lo95", "hi95")


def _tidy(excess, level, region, temporal, point):
    table = aggregate(excess, level, region, None, temporal, point)
    rows = []
    labels = period_labels(excess.delta.shape[2])
    for i, r in enumerate(table.rows):
        level_, key, period, pt, lo50, hi50, lo80, hi80, lo95, hi95 = r
        rows.append((level_, key, period, labels[i % len(labels)], pt, lo95, hi95))
    return rows


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in r])


def _band_plot(path, rows, title, ylabel):
    fig, ax = plt.subplots(figsize=(9, 5))
    keys = sorted({r[1] for r in rows})
    for key in keys:
        sel = [r for r in rows if r[1] == key]
        x = np.arange(1, len(sel) + 1)
        pt = np.array([r[4] for r in sel])
        ax.plot(x, pt, label=key)
        ax.fill_between(x, [r[5] for r in sel], [r[6] for r in sel], alpha=0.2)
    ax.axhline(0, color="grey", lw=0.8)
    ticks = list(range(1, len(period_labels()) + 1, 3))
    ax.set_xticks(ticks)
    ax.set_xticklabels([period_labels()[t - 1] for t in ticks], rotation=45, ha="right")
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_plots(out_dir, excess, region, rank_codes, ranks, point="median", top=20):
    """Write tidy CSVs and PNG figures into ``out_dir``.

    Files: ``timeseries.csv/png`` (monthly excess by region and global),
    ``cumulative.csv/png`` (running totals by region) and
    ``rank_heatmap.csv/png`` (rank probabilities of the highest-rate countries).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    monthly = _tidy(excess, "global", region, "monthly", point) + \
        _tidy(excess, "region", region, "monthly", point)
    monthly += _tidy(excess, "country", region, "monthly", point)
    _write(out / "timeseries.csv", SERIES_COLUMNS, monthly)
    _band_plot(out / "timeseries.png", [r for r in monthly if r[0] != "country"],
               "Monthly excess deaths", "excess deaths")

    cumulative = _tidy(excess, "global", region, "cumulative", point) + \
        _tidy(excess, "region", region, "cumulative", point)
    cumulative += _tidy(excess, "country", region, "cumulative", point)
    _write(out / "cumulative.csv", SERIES_COLUMNS, cumulative)
    _band_plot(out / "cumulative.png", [r for r in cumulative if r[0] == "region"],
               "Cumulative excess deaths by region", "cumulative excess deaths")

    rows = [(c, r + 1, float(ranks[i, r])) for i, c in enumerate(rank_codes)
            for r in range(len(rank_codes))]
    _write(out / "rank_heatmap.csv", ("iso3", "rank", "probability"), rows)
    expected_rank = ranks @ np.arange(1, len(rank_codes) + 1)
    order = np.argsort(expected_rank, kind="stable")[:top]
    k = len(order)
    fig, ax = plt.subplots(figsize=(8, 0.3 * k + 2))
    im = ax.imshow(ranks[order][:, :k], aspect="auto", cmap="viridis", vmin=0, vmax=1)
    ax.set_yticks(range(k))
    ax.set_yticklabels([rank_codes[i] for i in order])
    ax.set_xticks(range(k))
    ax.set_xticklabels(range(1, k + 1))
    ax.set_xlabel("rank (1 = highest excess rate)")
    ax.set_title("Posterior rank probabilities")
    fig.colorbar(im, ax=ax, label="probability")
    fig.tight_layout()
    fig.savefig(out / "rank_heatmap.png", dpi=100)
    plt.close(fig)
    return sorted(p.name for p in out.iterdir())
