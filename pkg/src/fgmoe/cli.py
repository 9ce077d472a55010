"""Command-line entry point: gen-data, train, eval, ablate, grad-check, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ablate as ablate_mod
from . import report as report_mod
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import read_dataset, write_dataset
from .errors import FGMoEError
from .gradcheck import grad_check
from .train import evaluate, make_datasets, train


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a key=value config file")
    parser.add_argument("--mode", help="full | decoder-only | single:<task>")
    parser.add_argument("--experts", type=int, help="number of routed experts")
    parser.add_argument("--shared", type=int, help="number of shared experts")
    parser.add_argument("--topk", type=int, help="routing top-k")
    parser.add_argument("--seed", type=int, help="parameter/sampling seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")


def _build_config(args):
    overrides = list(args.set)
    mapping = {"mode": "mode", "experts": "routed_experts", "shared": "shared_experts",
               "topk": "top_k", "seed": "seed", "out": "out_dir"}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = make_datasets(cfg)
    write_dataset(train_set, out / "train.fgmd")
    write_dataset(eval_set, out / "eval.fgmd")
    print(f"wrote {len(train_set)} train / {len(eval_set)} eval samples to {out}")
    return 0


def _load_or_make_data(cfg):
    out = Path(cfg.out_dir)
    train_path, eval_path = out / "train.fgmd", out / "eval.fgmd"
    if train_path.exists() and eval_path.exists():
        return read_dataset(train_path), read_dataset(eval_path)
    return make_datasets(cfg)


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = _load_or_make_data(cfg)
    with open(out / "train_log.jsonl", "w") as fh:
        model, _ = train(cfg, train_set=train_set,
                         log_hook=lambda rec: fh.write(json.dumps(rec) + "\n"))
    save_checkpoint(model, out / "checkpoint.fgmc")
    report = evaluate(model, eval_set) if eval_set else None
    payload = {"config": cfg.to_dict()}
    if report is not None:
        payload.update(report.to_dict())
    (out / "report.json").write_text(json.dumps(payload, indent=2))
    if report is not None:
        for t, entry in report.tasks.items():
            print(f"{t}: {entry['metric']} = {entry['value']:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.fgmc"
    model = load_checkpoint(ckpt, cfg)
    _, eval_set = _load_or_make_data(cfg)
    baselines = None
    if args.baselines:
        baselines = json.loads(Path(args.baselines).read_text())
    report = evaluate(model, eval_set, baselines=baselines)
    payload = {"config": cfg.to_dict(), **report.to_dict()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(payload, indent=2))
    for t, entry in report.tasks.items():
        print(f"{t}: {entry['metric']} = {entry['value']:.4f}")
    if report.delta_m is not None:
        print(f"delta_m = {report.delta_m:+.2f}%")
    return 0


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    summary = ablate_mod.run_ablation(cfg, out / "ablate")
    for axis, info in summary["trends"].items():
        print(f"{axis}: values {info['values']} -> delta_m "
              f"{[round(v, 3) for v in info['delta_m']]} ({info['direction']})")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _build_config(args)
    rng = np.random.default_rng(cfg.seed)
    x = Tensor(rng.normal(size=(args.tokens, cfg.decoder_channels)))
    from .moe import MoELayer
    layer = MoELayer(cfg.decoder_channels, hidden=cfg.expert_hidden,
                     n_shared=cfg.shared_experts, n_routed=cfg.routed_experts,
                     top_k=cfg.top_k, seed=cfg.seed)
    report = grad_check(lambda t: layer.forward(t).sum(), x,
                        h=args.h, tol=args.tol)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max rel error {report.max_rel_error:.3e} over "
          f"{report.checked} entries (tol {report.tol:g}, worst {report.worst_index})")
    return 0 if report.passed else 1


def cmd_report(args) -> int:
    cfg = _build_config(args)
    written = report_mod.render_report(cfg.out_dir)
    if not written:
        print(f"no artifacts found in {cfg.out_dir}")
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fgmoe",
        description="Multi-task dense prediction with mixture-of-experts routing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic datasets")
    _common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and evaluate it")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.fgmc)")
    p.add_argument("--baselines", help="JSON file of single-task baseline metrics")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run expert-count and top-k sweeps")
    _common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of a mixture layer")
    _common(p)
    p.add_argument("--tokens", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("report", help="render figures and CSV summaries")
    _common(p)
    p.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FGMoEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
