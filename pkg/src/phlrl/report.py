"""Figures and a CSV summary rendered from a training metrics stream."""
from __future__ import annotations

import csv
import os
from typing import Dict, List, Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .env import TYPE_NAMES
from .harness import read_metrics

COLUMNS = ("iteration", "episodes", "win_rate", "win_rate_ma5", "frontier_beta", "beta_all",
           "beta_drone", "beta_missile", "beta_gun", "mean_priority", "league_size",
           "loss_surrogate", "loss_critic_loss", "loss_entropy", "loss_grad_norm", "loss_clip_fraction",
           "wall_clock")


def moving_average(x, window: int = 5) -> np.ndarray:
    """Trailing mean over up to ``window`` points; the first entries use what exists."""
    x = np.asarray(x, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    n = np.minimum(np.arange(1, len(x) + 1), window)
    return (c[1:] - c[np.arange(1, len(x) + 1) - n]) / n


def _nan(v):
    return np.nan if v is None else float(v)


def table(records: Sequence[dict]) -> List[Dict[str, float]]:
    ma = moving_average([r["win_rate"] for r in records])
    rows = []
    for r, m in zip(records, ma):
        row = {k: _nan(r.get(k)) for k in COLUMNS if k not in ("win_rate_ma5",) and not k.startswith("beta_")}
        row["win_rate_ma5"] = float(m)
        row["beta_all"] = _nan(r.get("beta_all"))
        for d, name in enumerate(TYPE_NAMES):
            bt = r.get("beta_types") or [None] * len(TYPE_NAMES)
            row[f"beta_{name}"] = _nan(bt[d])
        rows.append({k: row[k] for k in COLUMNS})
    return rows


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if np.isnan(v) else f"{v:.6g}") for k, v in row.items()})


def _col(rows, key):
    return np.array([r[key] for r in rows])


def plot_win_rate(rows, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = _col(rows, "episodes")
    ax.plot(x, _col(rows, "win_rate"), color="0.7", lw=1, label="per iteration")
    ax.plot(x, _col(rows, "win_rate_ma5"), color="k", lw=1.5, label="5-iteration mean")
    ax.plot(x, _col(rows, "frontier_beta"), color="tab:blue", lw=1, ls="--", label="frontier (pure episodes)")
    ax.set_xlabel("training episodes")
    ax.set_ylabel("win rate vs scripted")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_league(rows, path):
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    x = _col(rows, "iteration")
    ax1.plot(x, _col(rows, "beta_all"), color="k", label="all types")
    for name in TYPE_NAMES:
        ax1.plot(x, _col(rows, f"beta_{name}"), lw=1, label=name)
    ax1.set_ylabel("league-mixed win rate")
    ax1.legend(frameon=False, fontsize=8, ncol=2)
    ax2.step(x, _col(rows, "league_size"), where="post", color="k")
    ax2.set_ylabel("league size")
    ax2.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_losses(rows, path):
    keys = [("loss_surrogate", "surrogate"), ("loss_critic_loss", "critic loss"),
            ("loss_entropy", "entropy"), ("mean_priority", "mean priority")]
    fig, axes = plt.subplots(2, 2, figsize=(7, 5), sharex=True)
    x = _col(rows, "iteration")
    for ax, (key, label) in zip(axes.flat, keys):
        ax.plot(x, _col(rows, key), color="k", lw=1)
        ax.set_title(label, fontsize=9)
    for ax in axes[1]:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render(metrics_path: str, out_dir: str) -> Dict[str, str]:
    """Write ``summary.csv`` and three PNG figures; returns their paths by name."""
    records = read_metrics(metrics_path)
    if not records:
        raise ValueError(f"no metrics records in {metrics_path}")
    os.makedirs(out_dir, exist_ok=True)
    rows = table(records)
    paths = {name: os.path.join(out_dir, name) for name in
             ("summary.csv", "win_rate.png", "league.png", "losses.png")}
    write_csv(rows, paths["summary.csv"])
    plot_win_rate(rows, paths["win_rate.png"])
    plot_league(rows, paths["league.png"])
    plot_losses(rows, paths["losses.png"])
    return paths
