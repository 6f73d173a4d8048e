"""Figure rendering for the CLI report paths.

Each function takes the in-memory rows that were just written to CSV and
renders a PNG next to them. Figures are a convenience view; the CSVs remain
the reproducible contract.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, out_dir, name: str) -> Path:
    path = Path(out_dir) / name
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def render_results(out_dir, rows) -> Path:
    """Accuracy over rounds; one line per (method, seed)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    series: dict[tuple, list[tuple[int, float]]] = {}
    for row in rows:
        series.setdefault((row["method"], row["seed"]), []).append(
            (row["round"], row["test_accuracy"])
        )
    for (method, seed), points in sorted(series.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points],
                marker="o", ms=3, label=f"{method} seed {seed}")
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, out_dir, "results.png")


def render_ledger(out_dir, rows) -> Path:
    """Cumulative transmitted bytes over rounds, summed across clients."""
    fig, ax = plt.subplots(figsize=(6, 4))
    per_round: dict[tuple, dict[int, int]] = {}
    for row in rows:
        key = (row["method"], row["seed"])
        per_round.setdefault(key, {})
        per_round[key][row["round"]] = per_round[key].get(row["round"], 0) + row["bytes"]
    for (method, seed), by_round in sorted(per_round.items()):
        rounds = sorted(by_round)
        total = 0
        ys = []
        for r in rounds:
            total += by_round[r]
            ys.append(total / 1e6)
        ax.plot(rounds, ys, marker="o", ms=3, label=f"{method} seed {seed}")
    ax.set_xlabel("round")
    ax.set_ylabel("cumulative MB transmitted")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, out_dir, "ledger.png")


def render_energy(out_dir, rows) -> Path:
    """Mean cumulative-energy curves, one panel per ordering."""
    orderings = sorted({row["ordering"] for row in rows})
    fig, axes = plt.subplots(1, len(orderings), figsize=(5 * len(orderings), 4), squeeze=False)
    for ax, ordering in zip(axes[0], orderings):
        for domain in sorted({row["domain"] for row in rows}):
            points = sorted(
                (row["k"], row["ratio"])
                for row in rows
                if row["ordering"] == ordering and row["domain"] == domain
            )
            ax.plot([p[0] for p in points], [p[1] for p in points], label=domain)
        ax.set_title(ordering)
        ax.set_xlabel("coefficients kept")
        ax.set_ylabel("cumulative energy ratio")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    return _save(fig, out_dir, "energy.png")


def render_contraction(out_dir, rows) -> Path:
    """Observed worst per-step ratio against the guaranteed factor."""
    fig, ax = plt.subplots(figsize=(6, 4))
    kappas = [row["kappa"] for row in rows]
    maxima = [row["max_ratio"] for row in rows]
    ax.scatter(kappas, maxima, s=18, label="runs")
    lim = [0, 1.05]
    ax.plot(lim, lim, ls="--", c="gray", label="bound")
    ax.set_xlabel("contraction factor")
    ax.set_ylabel("max observed step ratio")
    ax.set_xlim(*lim)
    ax.set_ylim(*lim)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, out_dir, "contraction.png")
