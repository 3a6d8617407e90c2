"""Figure rendering. Every plot writes a PNG and a CSV of the same series."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .eval_analysis import FrequencyTable  # noqa: E402


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def plot_frequencies(table: FrequencyTable, out_dir, stem="op_frequency"):
    """Activation and pooling frequency bars (one file pair per panel)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    panels = [("activations", table.activations),
              ("poolings", table.poolings)]
    for name, freqs in panels:
        labels = list(freqs)
        values = [freqs[k] for k in labels]
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.bar(range(len(labels)), values, color="steelblue")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels([l.replace("CONV_", "").lower() for l in labels],
                           rotation=30, ha="right")
        ax.set_ylabel("frequency")
        ax.set_title(f"{name} over {table.n_samples} sampled architectures")
        fig.tight_layout()
        png = out_dir / f"{stem}_{name}.png"
        fig.savefig(png, dpi=150)
        plt.close(fig)
        csv_path = out_dir / f"{stem}_{name}.csv"
        _write_csv(csv_path, ["operation", "frequency"],
                   list(zip(labels, values)))
        written.extend([png, csv_path])
    return written


def plot_search_curves(logs: dict, out_dir, stem="search_accuracy"):
    """Per-epoch mean sampled accuracy, one line per labeled search log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = []
    warmup_end = None
    for label, records in logs.items():
        epochs, means, stds = [], [], []
        for rec in records:
            if rec.get("record") != "epoch":
                continue
            epochs.append(rec["epoch"])
            means.append(rec["mean_acc"])
            stds.append(rec["std_acc"])
            if rec["phase"] == "warmup":
                warmup_end = max(warmup_end or 0, rec["epoch"])
            rows.append([label, rec["epoch"], rec["phase"],
                         rec["mean_acc"], rec["std_acc"]])
        ax.plot(epochs, means, marker="o", markersize=3, label=label)
        lo = [m - s for m, s in zip(means, stds)]
        hi = [m + s for m, s in zip(means, stds)]
        ax.fill_between(epochs, lo, hi, alpha=0.15)
    if warmup_end:
        ax.axvline(warmup_end + 0.5, color="gray", linestyle="--",
                   linewidth=1, label="end of warm-up")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean accuracy of sampled architectures")
    ax.legend()
    fig.tight_layout()
    png = out_dir / f"{stem}.png"
    fig.savefig(png, dpi=150)
    plt.close(fig)
    csv_path = out_dir / f"{stem}.csv"
    _write_csv(csv_path, ["label", "epoch", "phase", "mean_acc", "std_acc"],
               rows)
    return [png, csv_path]


def plot_budget_curves(records: list, out_dir, stem="accuracy_vs_budget"):
    """Accuracy against epsilon, one line per component/arch label."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series: dict = {}
    for rec in records:
        label = rec.get("component") or rec.get("arch_id", "model")
        eps = rec.get("epsilon")
        if eps is None:
            continue
        series.setdefault(label, []).append(
            (eps, rec["mean_accuracy"], rec.get("std_accuracy") or 0.0))
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = []
    for label, pts in sorted(series.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        es = [p[2] for p in pts]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=label)
        rows.extend([label, x, y, e] for x, y, e in pts)
    ax.set_xlabel("privacy budget epsilon")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    png = out_dir / f"{stem}.png"
    fig.savefig(png, dpi=150)
    plt.close(fig)
    csv_path = out_dir / f"{stem}.csv"
    _write_csv(csv_path, ["label", "epsilon", "mean_accuracy", "std_accuracy"],
               rows)
    return [png, csv_path]
