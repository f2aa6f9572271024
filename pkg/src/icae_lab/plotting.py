"""PNG figures for the report path. CSV files stay the source of truth."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricRecord  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def steps_boxplot(records: Sequence[MetricRecord], path: str | Path) -> Path:
    """Trajectory length at termination per (model, policy); triangles mark means."""
    groups: dict[str, list[int]] = {}
    for r in records:
        groups.setdefault(f"{r.model}\n{r.policy}", []).append(r.steps)
    labels = list(groups)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.boxplot([groups[k] for k in labels], showmeans=True,
               meanprops={"marker": "^", "markerfacecolor": "tab:green"})
    ax.set_xticks(range(1, len(labels) + 1), labels, fontsize=7)
    ax.set_ylabel("steps")
    ax.set_title("Trajectory length at termination")
    fig.tight_layout()
    return _save(fig, path)


def welch_means(rows, path: str | Path, metric: str = "resolved") -> Path:
    """Per-group means with 95% intervals from per-run samples."""
    from .sweep import per_run_means

    groups = per_run_means(rows, metric)
    labels = [f"{m}\n{p}" for m, p in groups]
    means, half = [], []
    for vals in groups.values():
        vals = [v for v in vals if not math.isnan(v)]
        n = len(vals)
        mu = sum(vals) / n if n else float("nan")
        if n >= 2:
            var = sum((v - mu) ** 2 for v in vals) / (n - 1)
            half.append(1.96 * math.sqrt(var / n))
        else:
            half.append(0.0)
        means.append(mu)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.errorbar(range(len(labels)), means, yerr=half, fmt="o", capsize=4)
    ax.set_xticks(range(len(labels)), labels, fontsize=7)
    ax.set_ylabel(metric)
    ax.set_title(f"Mean {metric} per run (95% CI)")
    fig.tight_layout()
    return _save(fig, path)


def loss_curve(rows, path: str | Path) -> Path:
    """Training loss rows ``(step, objective, loss)``, one line per objective."""
    series: dict[str, tuple[list[int], list[float]]] = {}
    for r in rows:
        xs, ys = series.setdefault(r.objective, ([], []))
        xs.append(r.step)
        ys.append(r.loss)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if series:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)
