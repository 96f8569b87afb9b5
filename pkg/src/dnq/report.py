"""Render run artifacts into figures and a delimited summary.

The report command reads whatever a run directory contains -- metrics.jsonl
from training, probe.json from the flatness probe, ptq_layers.csv and the
ablation CSVs -- and writes PNG figures next to a summary.csv, so a run can
be inspected without loading anything into a notebook.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_metrics(path: str) -> List[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_training_curves(metrics: List[dict], out_png: str) -> None:
    epochs_rec = [r for r in metrics if "epoch" in r]
    if not epochs_rec:
        return
    e = [r["epoch"] for r in epochs_rec]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    ax = axes[0, 0]
    ax.plot(e, [r["train_loss"] for r in epochs_rec], color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax = axes[0, 1]
    ax.plot(e, [r["train_acc"] for r in epochs_rec], color="tab:green")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train accuracy")
    ax = axes[1, 0]
    ax.plot(e, [r["lr"] for r in epochs_rec], label="lr", color="tab:orange")
    ax.set_ylabel("learning rate")
    ax2 = ax.twinx()
    ax2.plot(e, [r["f_ramp"] for r in epochs_rec], label="ramp", color="tab:red", linestyle="--")
    ax2.set_ylabel("noise ramp factor")
    ax.set_xlabel("epoch")
    ax = axes[1, 1]
    layers = sorted({k for r in epochs_rec for k in r.get("noise", {})})
    for layer in layers:
        ys = [r.get("noise", {}).get(layer, {}).get("sigma_x") for r in epochs_rec]
        pts = [(ei, y) for ei, y in zip(e, ys) if y is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"{layer} sigma_x")
        ys = [r.get("noise", {}).get(layer, {}).get("sigma_w") for r in epochs_rec]
        pts = [(ei, y) for ei, y in zip(e, ys) if y is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], linestyle="--", label=f"{layer} sigma_w")
    ax.set_xlabel("epoch")
    ax.set_ylabel("modeled noise sigma")
    if layers:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_sharpness_curve(probe: dict, out_png: str) -> None:
    pts = [(c["sigma"], c["dl_mean"], c["dl_stderr"]) for c in probe.get("curve", []) if c["sigma"] > 0]
    if not pts:
        return
    fig, ax = plt.subplots(figsize=(6, 4.5))
    xs = [p[0] for p in pts]
    ys = [max(p[1], 1e-12) for p in pts]
    es = [p[2] for p in pts]
    ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("relative perturbation scale sigma")
    ax.set_ylabel("mean loss gap")
    ax.set_title(f"Hessian trace ~ {probe.get('trace', float('nan')):.3g} "
                 f"(+- {probe.get('trace_stderr', float('nan')):.2g})")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_ablation(summary_rows: List[dict], out_png: str) -> None:
    if not summary_rows:
        return
    arms = [r["arm"] for r in summary_rows]
    bit_cols = [k for k in summary_rows[0] if k.startswith("acc_w")]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    width = 0.8 / max(1, len(bit_cols))
    for j, col in enumerate(bit_cols):
        xs = [i + j * width for i in range(len(arms))]
        ax.bar(xs, [float(r[col]) for r in summary_rows], width=width, label=col.replace("acc_", ""))
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(arms))])
    ax.set_xticklabels(arms, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("median accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def generate(run_dir: str, out_dir: Optional[str] = None) -> List[str]:
    """Render everything present in ``run_dir``; returns written paths."""
    out_dir = out_dir or os.path.join(run_dir, "report")
    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []
    summary: Dict[str, str] = {}

    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        records = read_metrics(metrics_path)
        png = os.path.join(out_dir, "training_curves.png")
        plot_training_curves(records, png)
        if os.path.exists(png):
            written.append(png)
        epochs_rec = [r for r in records if "epoch" in r]
        if epochs_rec:
            summary["final_train_loss"] = f"{epochs_rec[-1]['train_loss']:.6f}"
            summary["final_train_acc"] = f"{epochs_rec[-1]['train_acc']:.4f}"
            summary["epochs"] = str(epochs_rec[-1]["epoch"])
        for r in records:
            if r.get("event") == "ptq":
                summary[f"acc_w{r['weight_bits']}a{r['act_bits']}"] = f"{r['accuracy']:.4f}"
                summary.setdefault("fp_acc", f"{r['fp_accuracy']:.4f}")

    probe_path = os.path.join(run_dir, "probe.json")
    if os.path.exists(probe_path):
        with open(probe_path) as f:
            probe = json.load(f)
        png = os.path.join(out_dir, "sharpness_curve.png")
        plot_sharpness_curve(probe, png)
        if os.path.exists(png):
            written.append(png)
        summary["hessian_trace"] = f"{probe['trace']:.6g}"
        summary["hessian_trace_stderr"] = f"{probe['trace_stderr']:.3g}"

    ablate_path = os.path.join(run_dir, "ablate_summary.csv")
    if os.path.exists(ablate_path):
        with open(ablate_path) as f:
            rows = list(csv.DictReader(f))
        png = os.path.join(out_dir, "ablation_accuracy.png")
        plot_ablation(rows, png)
        if os.path.exists(png):
            written.append(png)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["key", "value"])
        for k, v in summary.items():
            writer.writerow([k, v])
    written.append(summary_path)
    return written
