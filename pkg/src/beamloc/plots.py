"""Optional SVG line charts of experiment tables (requires matplotlib)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "beamloc"


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_rmse(rows, path):
    by = defaultdict(list)
    for s, p, peb, rmse, *_ in rows:
        by[s].append((p, peb, rmse))
    fig, ax = plt.subplots(figsize=(6, 4))
    for s, v in by.items():
        v = np.array(sorted(v))
        line, = ax.semilogy(v[:, 0], v[:, 2], "-o", label=f"{s} RMSE")
        ax.semilogy(v[:, 0], v[:, 1], "--", color=line.get_color(), label=f"{s} PEB")
    ax.set_xlabel("P_RE [dBm]")
    ax.set_ylabel("position error [m]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_cdf(rows, path):
    by = defaultdict(list)
    for s, _, e, st, _ in rows:
        by[s].append(e if st == "ok" else np.inf)
    fig, ax = plt.subplots(figsize=(6, 4))
    for s, e in by.items():
        e = np.sort(np.array(e))
        ax.semilogx(e, np.arange(1, e.size + 1) / e.size, label=s)
    ax.set_xlabel("position error [m]")
    ax.set_ylabel("empirical CDF")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_qlos(rows, path):
    by = defaultdict(list)
    for n_rx, s, u, _, q, peb, *_ in rows:
        by[(s, n_rx)].append((u, q, peb))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    for (s, n_rx), v in by.items():
        v = np.array(sorted(v))
        a1.semilogx(v[:, 0], v[:, 1], "-o", label=f"{s}, N_R={n_rx}")
        a2.loglog(v[:, 0], v[:, 2], "-o", label=f"{s}, N_R={n_rx}")
    a1.set_xlabel("sigma_clk [1/(N df)]")
    a1.set_ylabel("q_LOS")
    a2.set_xlabel("sigma_clk [1/(N df)]")
    a2.set_ylabel("E[PEB] [m]")
    for a in (a1, a2):
        a.grid(True, which="both", alpha=0.3)
    a1.legend(fontsize=6)
    _save(fig, path)


def plot_report(report, out: Path):
    t = report.tables
    if "rmse.csv" in t:
        plot_rmse(t["rmse.csv"], out / "rmse.svg")
    if "cdf.csv" in t:
        plot_cdf(t["cdf.csv"], out / "cdf.svg")
    if "qlos.csv" in t:
        plot_qlos(t["qlos.csv"], out / "qlos.svg")
