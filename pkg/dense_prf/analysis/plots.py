"""
dense_prf/analysis/plots.py

Static SVG figures. The Agg backend is forced and SVG ids are salted with a
fixed string, so the same inputs give byte-identical files.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dense_prf.evaluation import TIE_EPS, QueryDiff  # noqa: E402

log = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "dense_prf"


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    log.info("Wrote plot: %s", path)
    return path


def plot_geometry(records: Sequence[Mapping], path: Union[str, Path]) -> Path:
    """Mean dot products of the PRF query embedding against training step; null entries leave gaps."""
    steps = [r["step"] for r in records]

    def series(key):
        return [float("nan") if r[key] is None else r[key] for r in records]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, series("query_dot"), marker="o", label="original query")
    ax.plot(steps, series("relevant_dot"), marker="s", label="relevant docs")
    ax.plot(steps, series("irrelevant_dot"), marker="^", label="irrelevant docs")
    ax.set_xlabel("training step")
    ax.set_ylabel("mean dot product")
    ax.grid(True, linestyle="--", alpha=0.5)
    ax.legend()
    return _save(fig, path)


def plot_group_attention(records: Sequence[Mapping], path: Union[str, Path], positions: Sequence[int] = (1, 2, 3)) -> Path:
    """
    records are eval log entries carrying a "group_attention" summary. One
    panel for the query span and every tracked feedback position.
    """
    rows = [r for r in records if r.get("group_attention")]
    steps = [r["step"] for r in rows]
    fig, axes = plt.subplots(1, len(positions) + 1, figsize=(4 * (len(positions) + 1), 3.5), sharey=True)
    axes[0].plot(steps, [r["group_attention"]["query"] for r in rows], marker="o", color="black")
    axes[0].set_title("query")
    for ax, p in zip(axes[1:], positions):
        per = [r["group_attention"]["by_position"].get(str(p), {}) for r in rows]
        for key, style in (("all", "o-"), ("relevant", "s-"), ("irrelevant", "^-")):
            ys = [d.get(key) for d in per]
            pts = [(s, y) for s, y in zip(steps, ys) if y is not None]
            if pts:
                ax.plot([s for s, _ in pts], [y for _, y in pts], style, label=key)
        ax.set_title(f"feedback doc {p}")
        ax.legend(fontsize=8)
    for ax in axes:
        ax.set_xlabel("training step")
        ax.grid(True, linestyle="--", alpha=0.5)
    axes[0].set_ylabel("[CLS] attention")
    return _save(fig, path)


def win_loss_colors(deltas: Sequence[float]) -> List[str]:
    """Bar colours under the same tie band per_query_diff counts with."""
    return ["tab:green" if d >= TIE_EPS else "tab:red" if d <= -TIE_EPS else "tab:gray" for d in deltas]


def plot_win_loss(diff: QueryDiff, path: Union[str, Path]) -> Path:
    """Per-query metric differences sorted descending; wins green, losses red."""
    deltas = sorted((d for _, d in diff.deltas), reverse=True)
    colors = win_loss_colors(deltas)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(deltas)), deltas, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("query")
    ax.set_ylabel(f"delta {diff.metric}")
    ax.set_title(f"{diff.wins} wins / {diff.losses} losses / {diff.ties} ties")
    return _save(fig, path)


def plot_training_loss(records: Sequence[Mapping], path: Union[str, Path]) -> Path:
    rows = [r for r in records if r.get("kind") == "loss"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["step"] for r in rows], [r["loss"] for r in rows])
    ax.set_xlabel("training step")
    ax.set_ylabel("NLL loss")
    ax.grid(True, linestyle="--", alpha=0.5)
    return _save(fig, path)
