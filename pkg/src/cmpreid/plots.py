"""Static plots rendered from the emitted CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curves(metrics_csv: str | Path, out_png: str | Path) -> None:
    lines = Path(metrics_csv).read_text().strip().splitlines()
    header = lines[0].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    fig, ax = plt.subplots(figsize=(8, 5))
    step = np.arange(len(data))
    for col in ("l_id", "l_hctri", "l_pose", "l_kd", "total"):
        ax.plot(step, data[:, header.index(col)], label=col, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_cmc_curve(cmc_csv: str | Path, out_png: str | Path) -> None:
    lines = Path(cmc_csv).read_text().strip().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    ranks = [int(r[0]) for r in rows]
    rates = [float(r[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ranks, rates, marker="o", markersize=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0.0, 1.02)
    ax.set_title("CMC")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
