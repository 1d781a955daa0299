"""Figures written next to the delimited reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from esci_rank.ensemble import CorrelationReport  # noqa: E402
from esci_rank.ranker_eval import EvalResult  # noqa: E402
from esci_rank.trainer import TrainReport  # noqa: E402

# Fixed metadata keeps PNG bytes independent of the matplotlib build.
_PNG_METADATA = {"Software": None}


def _save(fig, path: Union[str, Path]) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_training(report: TrainReport, path: Union[str, Path]) -> None:
    """Epoch-mean loss, and validation NDCG on a twin axis when it was measured."""
    epochs = [s.epoch for s in report.epochs]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, report.losses, "o-", color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:blue")
    ax.set_xticks(epochs)
    val = [s.val_ndcg for s in report.epochs]
    if not all(np.isnan(v) for v in val):
        ax2 = ax.twinx()
        ax2.plot(epochs, val, "s--", color="tab:orange", label="val NDCG")
        ax2.set_ylabel("validation NDCG", color="tab:orange")
    fig.tight_layout()
    _save(fig, path)


def plot_ndcg_histogram(result: EvalResult, path: Union[str, Path], bins: int = 20) -> None:
    values = np.array(list(result.per_query.values()))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(values, bins=np.linspace(0.0, 1.0, bins + 1), color="tab:green", edgecolor="black")
    ax.axvline(result.mean_ndcg, color="black", linestyle="--", label=f"mean {result.mean_ndcg:.4f}")
    ax.set_xlabel("per-query NDCG")
    ax.set_ylabel("queries")
    ax.legend(loc="upper left")
    fig.tight_layout()
    _save(fig, path)


def plot_correlation(report: CorrelationReport, names: Sequence[str], path: Union[str, Path]) -> None:
    M = report.matrix.shape[0]
    fig, ax = plt.subplots(figsize=(1.2 * M + 2.5, 1.2 * M + 1.5), constrained_layout=True)
    names = [Path(n).name for n in names]
    im = ax.imshow(np.ma.masked_invalid(report.matrix), vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(M))
    ax.set_yticks(range(M))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_yticklabels(names)
    for a in range(M):
        for b in range(M):
            v = report.matrix[a, b]
            ax.text(b, a, "n/a" if np.isnan(v) else f"{v:.3f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, label="score correlation")
    _save(fig, path)
