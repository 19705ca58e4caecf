"""PNG figures for the report path. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .objective import tukey_rho  # noqa: E402


def plot_learning_curve(curve: Sequence[dict], path) -> Path:
    epochs = [r["epoch"] for r in curve]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r["train_loss"] for r in curve], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.set_yscale("log")
    ax2.plot(epochs, [r["val_ccc_mean"] for r in curve], marker="o", label="CCC")
    ax2.plot(epochs, [r["val_rmse_mean"] for r in curve], marker="s", label="RMSE")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation (mean of targets)")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    labels = [r["config"] for r in rows]
    ccc = [r.get("ccc_mean", np.nan) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 2), 3.8))
    ax.bar(range(len(rows)), ccc, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean validation CCC")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_losses(path, c: float = 4.685, span: float = 8.0) -> Path:
    """Tukey biweight against squared error, for the README and reports."""
    r = np.linspace(-span, span, 401)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(r, 0.5 * r ** 2, label="0.5 r^2")
    ax.plot(r, tukey_rho(r, c), label=f"Tukey (c={c})")
    ax.set_ylim(0, c * c / 3)
    ax.set_xlabel("residual")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
