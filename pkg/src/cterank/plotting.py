"""Report figures. Rendered off-screen with PNG metadata stripped so reruns are byte-stable."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def training_curve(history: Sequence[Mapping], path: str | Path, optimum: float | None = None,
                   title: str = "policy training") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pts = [(h["iteration"], h["eval_cte"]) for h in history if h.get("eval_cte") is not None]
        ret = [(h["iteration"], h["mean_return"]) for h in history if h.get("mean_return") is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", ms=3, label="greedy eval CTE")
        if ret:
            ax.plot(*zip(*ret), lw=1, alpha=0.7, label="mean sampled return")
        if optimum is not None:
            ax.axhline(optimum, color="k", ls="--", lw=1, label="enumerated optimum")
        ax.set_xlabel("iteration")
        ax.set_ylabel("expected clicks")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def env_loss_curve(history: Sequence[Mapping], path: str | Path, bayes: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        tr = [(h["epoch"], h["train_loss"]) for h in history if h.get("train_loss") is not None]
        va = [(h["epoch"], h["val_loss"]) for h in history]
        if tr:
            ax.plot(*zip(*tr), marker="o", ms=3, label="train")
        ax.plot(*zip(*va), marker="s", ms=3, label="validation")
        if bayes is not None:
            ax.axhline(bayes, color="k", ls="--", lw=1, label="true-model loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("log-loss per session")
        ax.legend()
        return _save(fig, path)


def method_bars(values: Mapping[str, Mapping[str, float]], metrics: Sequence[str], path: str | Path,
                title: str = "") -> Path:
    """Grouped bars: one group per metric, one bar per method."""
    methods = list(values)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(metrics), squeeze=False,
                                 figsize=(2.4 * len(metrics) + 1.0, 3.6))
        for ax, metric in zip(axes[0], metrics):
            ys = [values[m].get(metric, float("nan")) for m in methods]
            ax.bar(range(len(methods)), ys, color=[f"C{i}" for i in range(len(methods))])
            ax.set_xticks(range(len(methods)))
            ax.set_xticklabels(methods, rotation=45, ha="right")
            ax.set_title(metric)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def scaling_plot(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Per-session decode time of naive vs incremental decoding against k."""
    ks = [r["k"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.4))
        ax1.plot(ks, [r["naive_s"] * 1e3 for r in rows], marker="o", label="naive")
        ax1.plot(ks, [r["incremental_s"] * 1e3 for r in rows], marker="s", label="incremental")
        ax1.set_xlabel("k")
        ax1.set_ylabel("ms per session")
        ax1.legend()
        ax2.plot(ks, [r["ratio"] for r in rows], marker="o", color="C2")
        ax2.set_xlabel("k")
        ax2.set_ylabel("naive / incremental")
        return _save(fig, path)
