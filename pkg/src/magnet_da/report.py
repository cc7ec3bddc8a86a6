"""CSV tables and matplotlib figures for training runs and experiments."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import Aggregate, ExperimentResult, RunResult  # noqa: E402

RESULT_COLUMNS = ("task", "method", "seed", "source_acc", "target_acc", "wall_s")
SUMMARY_COLUMNS = ("task", "method", "mean", "std", "n")


def loss_rows(run: RunResult) -> tuple[list[str], list[list]]:
    """Header and rows of the per-iteration loss trace."""
    taps = len(run.reports[0].mmd_per_tap) if run.reports else 0
    header = ["iter", "nll", "entropy", *(f"mmd_{i}" for i in range(taps)), "total", "lr"]
    rows = []
    for it, rep, lr in zip(run.iterations_logged, run.reports, run.lrs):
        rows.append([it, rep.source_nll, rep.target_entropy, *rep.mmd_per_tap, rep.total, lr])
    return header, rows


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_loss_csv(run: RunResult, path) -> None:
    _write(path, *loss_rows(run))


def write_results_csv(result: ExperimentResult, path) -> None:
    rows = [[getattr(r, c) for c in RESULT_COLUMNS] for r in result.rows]
    _write(path, RESULT_COLUMNS, rows)


def write_summary_csv(aggregates: Sequence[Aggregate], path) -> None:
    rows = [[getattr(a, c) for c in SUMMARY_COLUMNS] for a in aggregates]
    _write(path, SUMMARY_COLUMNS, rows)


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or len(values) < width:
        return values
    kernel = np.ones(width) / width
    return np.convolve(values, kernel, mode="valid")


def plot_loss_curves(run: RunResult, path, title: str = "") -> None:
    """Source NLL, target entropy, per-tap MMD and learning rate against iteration."""
    header, rows = loss_rows(run)
    data = np.array(rows, dtype=np.float64)
    it = data[:, 0]
    width = max(1, len(it) // 50)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), constrained_layout=True)
    panels = [
        (axes[0, 0], [("nll", 1)], "source NLL"),
        (axes[0, 1], [("entropy", 2)], "target entropy (nats)"),
        (axes[1, 0], [(header[j], j) for j in range(3, len(header) - 2)], "MMD per tap"),
    ]
    for ax, series, label in panels:
        for name, j in series:
            y = _smooth(data[:, j], width)
            ax.plot(it[len(it) - len(y):], y, label=name, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(label)
        if len(series) > 1:
            ax.legend(fontsize=8)
    ax = axes[1, 1]
    ax.plot(it, data[:, -1], color="tab:gray")
    ax.set_xlabel("iteration")
    ax.set_ylabel("learning rate")
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_accuracy_bars(aggregates: Sequence[Aggregate], path, title: str = "target accuracy") -> None:
    """Grouped bars of mean target accuracy (± sample std) per task and method."""
    tasks = list(dict.fromkeys(a.task for a in aggregates))
    methods = list(dict.fromkeys(a.method for a in aggregates))
    lookup = {(a.task, a.method): a for a in aggregates}
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(tasks))
    fig, ax = plt.subplots(figsize=(max(5, 2.2 * len(tasks) + 1), 4.2), constrained_layout=True)
    for k, method in enumerate(methods):
        means = [lookup[(t, method)].mean if (t, method) in lookup else np.nan for t in tasks]
        stds = [lookup[(t, method)].std if (t, method) in lookup else 0.0 for t in tasks]
        ax.bar(x + (k - (len(methods) - 1) / 2) * width, means, width, yerr=stds, capsize=3, label=method)
    ax.set_xticks(x)
    ax.set_xticklabels(tasks)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_entropy_traces(result: ExperimentResult, path, task: str | None = None) -> None:
    """Target entropy over training for every stored run, one line per (method, seed)."""
    fig, ax = plt.subplots(figsize=(7, 4.2), constrained_layout=True)
    colours: dict[str, str] = {}
    for (t, method, _seed), run in result.runs.items():
        if task is not None and t != task:
            continue
        ent = np.array([r.target_entropy for r in run.reports])
        y = _smooth(ent, max(1, len(ent) // 50))
        it = np.asarray(run.iterations_logged)[len(ent) - len(y):]
        first = method not in colours
        colour = colours.setdefault(method, f"C{len(colours)}")
        ax.plot(it, y, color=colour, lw=1, alpha=0.8, label=method if first else None)
    ax.set_xlabel("iteration")
    ax.set_ylabel("target entropy (nats)")
    ax.legend(fontsize=8)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def experiment_figures(result: ExperimentResult, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [out_dir / "accuracy.png", out_dir / "entropy.png"]
    plot_accuracy_bars(result.aggregates(), paths[0])
    plot_entropy_traces(result, paths[1])
    return paths
