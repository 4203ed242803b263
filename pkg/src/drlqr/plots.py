"""Static figures rendered from the CSVs an experiment writes.

Each function reads only files in the artifact directory, so every plotted
series has a CSV behind it.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (10.5, 3.2),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "svg.hashsalt": "drlqr",
}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return path


def _band(ax, rows, metric, label_key="m", log=True):
    groups = defaultdict(list)
    for r in rows:
        if r["metric"] == metric:
            groups[r[label_key]].append(r)
    for label, rs in sorted(groups.items(), key=lambda kv: float(kv[0])):
        n = np.array([float(r["n"]) for r in rs])
        med = np.array([float(r["median"]) for r in rs])
        lo = np.array([float(r["q25"]) for r in rs])
        hi = np.array([float(r["q75"]) for r in rs])
        ok = np.isfinite(med)
        (line,) = ax.plot(n[ok], med[ok], label=f"M = {label}")
        ax.fill_between(n[ok], lo[ok], hi[ok], color=line.get_color(), alpha=0.25, linewidth=0)
    if log:
        ax.set_yscale("log")


def plot_verify(out_dir) -> Path:
    out_dir = Path(out_dir)
    q = read_csv(out_dir / "quantiles_iter.csv")
    gap = read_csv(out_dir / "gap_vs_m.csv")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3)
        _band(axes[0], q, "k_dist")
        axes[0].set(xlabel="iteration", ylabel=r"$\|K_n - K^\star_{SA}\|_F$")
        _band(axes[1], q, "excess_j_sa")
        axes[1].set(xlabel="iteration", ylabel=r"$J_{SA}(K_n) - J_{SA}(K^\star_{SA})$")
        m = np.array([float(r["m"]) for r in gap])
        med = np.array([float(r["median"]) for r in gap])
        lo = np.array([float(r["q25"]) for r in gap])
        hi = np.array([float(r["q75"]) for r in gap])
        axes[2].errorbar(m, med, yerr=np.vstack([med - lo, hi - med]), fmt="o-", capsize=3)
        axes[2].set(xscale="log", xlabel="M", ylabel=r"MC $J_{DR}(K) - J_{DR}(K_{ref})$")
        axes[0].legend()
        return _save(fig, out_dir / "verify.svg")


def plot_entropic(out_dir) -> Path:
    out_dir = Path(out_dir)
    rows = read_csv(out_dir / "entropic.csv")
    by_run = defaultdict(list)
    for r in rows:
        by_run[r["run_id"]].append(r)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3)
        for run_id, rs in by_run.items():
            n = [int(r["n"]) for r in rs]
            axes[0].plot(n, [float(r["j_er"]) for r in rs], lw=0.8)
            axes[1].plot(n, [float(r["j_sa"]) for r in rs], lw=0.8)
            axes[2].semilogy(n, [float(r["grad_norm"]) for r in rs], lw=0.8)
        axes[0].set(xlabel="iteration", ylabel=r"$J_{ER}^t(K)$")
        axes[1].set(xlabel="iteration", ylabel=r"$J_{SA}(K)$")
        axes[2].set(xlabel="iteration", ylabel="weighted gradient norm")
        return _save(fig, out_dir / "entropic.svg")


def plot_sgd(out_dir) -> Path:
    out_dir = Path(out_dir)
    rows = read_csv(out_dir / "sgd_summary.csv")
    n = np.array([float(r["n"]) for r in rows])
    mean = np.array([float(r["mean_j_dr"]) for r in rows])
    std = np.array([float(r["std_j_dr"]) for r in rows])
    base = [r for r in read_csv(out_dir / "summary.csv") if r["algo"] == "anneal"]
    with plt.rc_context({**STYLE, "figure.figsize": (4.5, 3.2)}):
        fig, ax = plt.subplots()
        ok = np.isfinite(mean)
        ax.plot(n[ok], mean[ok], label="SGD mean")
        ax.fill_between(n[ok], (mean - std)[ok], (mean + std)[ok], alpha=0.25, linewidth=0)
        for r in base:
            ax.axhline(float(r["j_dr"]), color="k", ls="--", lw=0.8, label=f"batch M = {r['m']}")
        ax.set(xlabel="iteration", ylabel=r"MC $J_{DR}(K)$", yscale="log")
        ax.legend()
        return _save(fig, out_dir / "sgd.svg")
