"""Report rendering: matplotlib figures plus delimited summaries from the
JSON artifacts a run directory accumulates (train_log.jsonl, report.json,
ablate/grid.jsonl)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _read_jsonl(path: Path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def render_loss_curves(log_path: Path, fig_path: Path) -> None:
    log = _read_jsonl(log_path)
    steps = [r["step"] for r in log]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, [r["total"] for r in log], label="total", linewidth=2, color="black")
    for t in log[0]["losses"]:
        ax.plot(steps, [r["losses"][t] for r in log], label=t, alpha=0.75)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=130)
    plt.close(fig)


def render_routing(report: dict, fig_path: Path) -> None:
    routing = report.get("routing") or {}
    if not routing:
        return
    names = sorted(routing)
    fig, axes = plt.subplots(len(names), 1, figsize=(7, 1.9 * len(names)),
                             squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        freq = routing[name]["selection_freq"]
        ax.bar(range(len(freq)), freq, color="tab:blue")
        ax.set_ylabel("freq", fontsize=8)
        ax.set_title(f"{name} (load balance "
                     f"{routing[name].get('load_balance', 0):.3f})", fontsize=9)
        ax.set_xticks(range(len(freq)))
    axes[-1, 0].set_xlabel("routed expert")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=130)
    plt.close(fig)


def render_ablation(grid_rows, axis: str, fig_path: Path) -> None:
    rows = [r for r in grid_rows if r["axis"] == axis]
    if not rows:
        return
    xs = [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [r["delta_m"] for r in rows], marker="o")
    ax.set_xlabel(axis)
    ax.set_ylabel("delta_m (%)")
    ax.set_title(f"ablation over {axis}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=130)
    plt.close(fig)


def write_metrics_csv(report: dict, csv_path: Path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "metric", "value"])
        for t, entry in report.get("tasks", {}).items():
            writer.writerow([t, entry["metric"], f"{entry['value']:.6f}"])
        if report.get("delta_m") is not None:
            writer.writerow(["all", "delta_m", f"{report['delta_m']:.6f}"])


def write_grid_csv(grid_rows, csv_path: Path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "delta_m"])
        for r in grid_rows:
            writer.writerow([r["axis"], r["value"], f"{r['delta_m']:.6f}"])


def render_report(out_dir) -> list:
    """Render every figure/summary the run directory supports; returns paths."""
    out = Path(out_dir)
    written = []
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        fig = out / "loss_curves.png"
        render_loss_curves(log_path, fig)
        written.append(fig)
    report_path = out / "report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text())
        fig = out / "routing.png"
        render_routing(report, fig)
        if fig.exists():
            written.append(fig)
        csv_path = out / "summary.csv"
        write_metrics_csv(report, csv_path)
        written.append(csv_path)
    grid_path = out / "ablate" / "grid.jsonl"
    if grid_path.exists():
        rows = _read_jsonl(grid_path)
        for axis in ("experts", "top_k"):
            fig = out / f"ablation_{axis}.png"
            render_ablation(rows, axis, fig)
            if fig.exists():
                written.append(fig)
        csv_path = out / "ablation_grid.csv"
        write_grid_csv(rows, csv_path)
        written.append(csv_path)
    return written
