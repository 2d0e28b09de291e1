"""Artifact writers: metrics CSV, JSON documents, selection histograms, figures.

All writers are deterministic: JSON keys are sorted, floats use ``repr``, and
PNGs are rendered with the Agg backend without timestamp metadata.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

METRIC_COLUMNS = [
    "round", "sim_clock", "server_loss", "grad_norm_sq", "selected_clients",
    "mean_staleness", "max_staleness", "mean_delay", "effective_lr",
    "max_drift_norm", "aggregate_update_norm",
]


def metric_rows(log):
    for r in log.records:
        yield [
            r.round, r.sim_clock, r.server_loss, r.grad_norm_sq,
            ";".join(str(c) for c in r.clients),
            r.mean_staleness, r.max_staleness, r.mean_delay, r.effective_lr,
            r.max_drift_norm, r.aggregate_update_norm,
        ]


def write_metrics_csv(log, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in metric_rows(log):
            w.writerow(row)
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")
    return path


def emit_selection_histogram(log) -> list[int]:
    """Number of times each client id was selected (duplicates counted)."""
    counts = [0] * log.config.C
    for r in log.records:
        for c in r.clients:
            counts[c] += 1
    return counts


def write_histogram_csv(counts, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client", "count"])
        for c, n in enumerate(counts):
            w.writerow([c, n])
    return path


# -- figures -------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams.update({"svg.hashsalt": "asyncfl", "figure.dpi": 100})
    return plt


def _save(fig, path):
    fig.savefig(path, format="png", metadata={"Software": None})
    import matplotlib.pyplot as plt
    plt.close(fig)
    return Path(path)


def plot_loss_curves(curves: dict, path, title="Server loss", ylabel="server loss", logy=False) -> Path:
    """One line per labelled series; ``curves`` maps label -> (rounds, values)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in curves.items():
        ax.plot(x, y, label=str(label), linewidth=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_histogram(counts, path, title="Client selection frequency") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(len(counts)), counts, color="tab:blue")
    ax.set_xlabel("client id")
    ax.set_ylabel("rounds selected")
    ax.set_xticks(np.arange(len(counts)))
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_bound_comparison(rounds, empirical, bound, path, title, ylabel) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, empirical, label="measured (seed mean)", linewidth=1.2)
    ax.plot(rounds, bound, label="bound", linestyle="--", linewidth=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_points(x, y, path, title, xlabel, ylabel) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, y, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def write_dataset_csv(dataset, path) -> Path:
    """Columns ``x0..x{d-1}, label``; one row per sample in global index order."""
    path = Path(path)
    d = dataset.features.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(d)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([float(v) for v in x] + [int(y)])
    return path


def write_partition_csv(plan, labels, path) -> Path:
    """Columns ``index, client, label`` sorted by global sample index."""
    path = Path(path)
    owner = {i: c for c, idx in plan.assignment.items() for i in idx}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "client", "label"])
        for i in sorted(owner):
            w.writerow([i, owner[i], int(labels[i])])
    return path
