"""Static SVG charts rendered from a campaign's summary CSVs."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .campaign import SCHEMAS, read_table  # noqa: E402

# fixed salt and no timestamp so reruns produce identical files
plt.rcParams["svg.hashsalt"] = "dmsgd"
SVG_META = {"Date": None}


def _series(rows, ycol):
    out = defaultdict(lambda: ([], []))
    for r in rows:
        key = f"m={r['m']} alpha={r['alpha']} {r['schedule']}"
        y = float(r[ycol])
        if math.isfinite(y) and y > 0:
            out[key][0].append(int(r["n"]))
            out[key][1].append(y)
    return out


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def _line_chart(rows, ycol, ylabel, title, path):
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for key, (x, y) in sorted(_series(rows, ycol).items()):
        ax.plot(x, y, label=key, lw=1.2)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("iteration n")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if ax.lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def _ccdf_chart(rows, path):
    groups = defaultdict(list)
    for r in rows:
        key = f"m={r['m']} alpha={r['alpha']} a0={float(r['a0']):.3g}"
        groups[key].append(math.inf if r["censored"] == "true" else float(r["partial_sum_at_tau"]))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for key, vals in sorted(groups.items()):
        finite = sorted(v for v in vals if math.isfinite(v))
        total = len(vals)
        xs, ps = [], []
        for j, v in enumerate(finite):
            xs.append(v)
            ps.append((total - j) / total)
        if xs:
            ax.step(xs, ps, where="post", label=key, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("partial step-size sum up to n")
    ax.set_ylabel("P(tau >= n)")
    ax.set_title("hitting-time tail")
    if ax.lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def render_charts(out_dir) -> list[Path]:
    """Write loss, gradient-norm and (when present) hitting-time CCDF charts."""
    out = Path(out_dir)
    charts = out / "charts"
    charts.mkdir(exist_ok=True)
    ens = read_table(out / "ensemble.csv", SCHEMAS["ensemble"])
    made = []
    p = charts / "loss.svg"
    _line_chart(ens, "mean_loss_avg_iterate", "g(average iterate)", "loss vs iteration", p)
    made.append(p)
    p = charts / "grad_norm.svg"
    _line_chart(ens, "mean_grad_norm_sq", "|grad g(average iterate)|^2",
                "squared gradient norm vs iteration", p)
    made.append(p)
    hit = read_table(out / "hitting.csv", SCHEMAS["hitting"])
    if hit:
        p = charts / "ccdf.svg"
        _ccdf_chart(hit, p)
        made.append(p)
    return made
