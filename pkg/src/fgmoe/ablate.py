"""Ablation sweeps over expert count and routing top-k.

Two grids: routed experts in {2, 4, 6, 8, 16} (top-k capped at the grid
value) and top-k in {2, 3, 4, 6} at 6 routed experts.  Single-task
baselines are trained once per seed under the same budget; every cell
reports raw metrics plus delta_m against those baselines.  Trends across a
grid are reported, never asserted.
"""

from __future__ import annotations

import json
from pathlib import Path

from .config import ExperimentConfig
from .train import evaluate, make_datasets, train

EXPERT_GRID = (2, 4, 6, 8, 16)
TOPK_GRID = (2, 3, 4, 6)


def train_single_task_baselines(cfg: ExperimentConfig, train_set, eval_set) -> dict:
    """Per-task reference metrics from single-task runs with matched budgets."""
    baselines = {}
    for t in cfg.tasks:
        sub = cfg.replace(mode=f"single:{t}")
        model, _ = train(sub, train_set=train_set)
        report = evaluate(model, eval_set)
        baselines[t] = report.tasks[t]["value"]
    return baselines


def _trend(values) -> str:
    diffs = [b - a for a, b in zip(values, values[1:])]
    if all(d >= 0 for d in diffs):
        return "non-decreasing"
    if all(d <= 0 for d in diffs):
        return "non-increasing"
    return "mixed"


def run_ablation(cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = make_datasets(cfg)
    baselines = train_single_task_baselines(cfg, train_set, eval_set)
    (out / "baselines.json").write_text(json.dumps(baselines, indent=2))

    cells = []
    for n in EXPERT_GRID:
        cells.append(("experts", n, cfg.replace(routed_experts=n,
                                                top_k=min(cfg.top_k, n))))
    for k in TOPK_GRID:
        cells.append(("top_k", k, cfg.replace(routed_experts=6, top_k=k)))

    rows = []
    for axis, value, cell_cfg in cells:
        model, _ = train(cell_cfg, train_set=train_set)
        report = evaluate(model, eval_set, baselines=baselines)
        cell_dir = out / f"{axis}_{value}"
        cell_dir.mkdir(exist_ok=True)
        payload = {"axis": axis, "value": value,
                   "config": {"routed_experts": cell_cfg.routed_experts,
                              "top_k": cell_cfg.top_k,
                              "shared_experts": cell_cfg.shared_experts},
                   **report.to_dict()}
        (cell_dir / "report.json").write_text(json.dumps(payload, indent=2))
        rows.append(payload)

    with open(out / "grid.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")

    summary = {"baselines": baselines, "trends": {}}
    for axis in ("experts", "top_k"):
        axis_rows = [r for r in rows if r["axis"] == axis]
        dm = [r["delta_m"] for r in axis_rows]
        summary["trends"][axis] = {
            "values": [r["value"] for r in axis_rows],
            "delta_m": dm,
            "direction": _trend(dm),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
