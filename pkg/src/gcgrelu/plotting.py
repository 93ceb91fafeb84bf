"""Figures rendered from metrics files.

Kept apart from the numerical core: matplotlib is imported only when one
of these functions is called, with the non-interactive Agg backend.
"""
from __future__ import annotations

import csv
import json


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def read_metrics_csv(path: str) -> dict[str, list[float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) for r in rows] for k in (rows[0].keys() if rows else [])}


def plot_error_curves(metrics_csv: str, out_png: str, title: str | None = None) -> str:
    """Train and test error against epoch, in percent."""
    m = read_metrics_csv(metrics_csv)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(m.get("epoch", []), [100 * v for v in m.get("train_err", [])], label="train")
    ax.plot(m.get("epoch", []), [100 * v for v in m.get("test_err", [])], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("error rate (%)")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_compare(compare_csv: str, out_png: str) -> str:
    """Test error of the globally connected net against the conventional baseline."""
    m = read_metrics_csv(compare_csv)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(m["epoch"], [100 * v for v in m["gc_err"]], label="GC-Net + GReLU")
    ax.plot(m["epoch"], [100 * v for v in m["conv_err"]], label="conventional CNN + ReLU")
    ax.set_xlabel("epoch")
    ax.set_ylabel("test error rate (%)")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_grelu_trajectories(metrics_jsonl: str, out_png: str) -> str | None:
    """Endpoints and slopes of every GReLU parameter set over the recorded epochs.

    Returns None (and writes nothing) when the run has no GReLU layers.
    """
    with open(metrics_jsonl) as f:
        recs = [json.loads(line) for line in f if line.strip()]
    if not recs or not recs[0]["grelu"]:
        return None
    epochs = [r["epoch"] for r in recs]
    sets = len(recs[0]["grelu"])
    plt = _pyplot()
    fig, axes = plt.subplots(2, sets, figsize=(3.2 * sets, 5), squeeze=False, sharex=True)
    for s in range(sets):
        name = recs[0]["grelu"][s]["layer"]
        for row, key in enumerate(("endpoints", "slopes")):
            ax = axes[row][s]
            series = list(zip(*[r["grelu"][s][key] for r in recs]))
            for j, ys in enumerate(series):
                ax.plot(epochs, ys, label=str(j))
            ax.set_title(f"{name} {key}", fontsize=8)
            ax.grid(True, alpha=0.3)
            if row == 1:
                ax.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
