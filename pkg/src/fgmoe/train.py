"""Training and evaluation harness.

One optimization step: encode each batch image (cached when the encoder is
frozen), run the decoder for every active task, average per-task losses over
the batch, combine with the task loss weights, backpropagate, and apply SGD
with momentum and weight decay: v <- momentum*v + (g + wd*theta);
theta <- theta - lr*v.  Frozen parameters are never touched.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad
from .config import ExperimentConfig
from .data import SceneConfig, generate_dataset, sample_targets
from .errors import ConfigError, TrainingError
from .model import build_model, count_params
from .moe import RoutingCollector
from .tasks import (MetricsReport, compute_metric, delta_m, make_task_spec,
                    metric_name, task_loss, total_loss)


class SGD:
    def __init__(self, named_params, lr: float, weight_decay: float, momentum: float):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for n, p in self.params:
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[n]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def scene_config(cfg: ExperimentConfig) -> SceneConfig:
    return SceneConfig(seed=cfg.data_seed, height=cfg.image_size, width=cfg.image_size,
                       num_classes=cfg.num_classes, shapes_min=cfg.shapes_min,
                       shapes_max=cfg.shapes_max, depth_min=cfg.depth_min,
                       depth_max=cfg.depth_max)


def make_datasets(cfg: ExperimentConfig):
    sc = scene_config(cfg)
    train = generate_dataset(sc, cfg.train_samples, start_index=0)
    evl = generate_dataset(sc, cfg.eval_samples, start_index=cfg.train_samples)
    return train, evl


def _encode_cached(model, dataset, cache: dict, idx: int):
    if cache is None:
        return None
    if idx not in cache:
        with no_grad():
            cache[idx] = model.encoder.encode(Tensor(dataset[idx].image))
    return cache[idx]


def train(cfg: ExperimentConfig, train_set=None, log_hook=None):
    """Run the configured training loop; returns (model, step log list)."""
    if train_set is None:
        train_set, _ = make_datasets(cfg)
    model = build_model(cfg)
    betas = {t: make_task_spec(t, cfg.num_classes).loss_weight for t in model.task_names}
    specs = {t: make_task_spec(t, cfg.num_classes) for t in model.task_names}
    opt = SGD(model.named_parameters(), cfg.lr, cfg.weight_decay, cfg.momentum)
    cache = {} if (cfg.encoder_frozen and cfg.cache_features) else None
    rng = np.random.default_rng((cfg.seed, 7))
    n = len(train_set)
    log = []
    for step in range(cfg.steps):
        replace = cfg.batch_size > n
        batch = rng.choice(n, size=cfg.batch_size, replace=replace)
        collector = RoutingCollector()
        sums = {t: None for t in model.task_names}
        for idx in batch:
            sample = train_set[int(idx)]
            pyr = _encode_cached(model, train_set, cache, int(idx))
            preds = model.forward(Tensor(sample.image), training=True,
                                  collector=collector, pyramid=pyr)
            targets = sample_targets(sample)
            for t in model.task_names:
                loss = task_loss(preds[t], targets[t], specs[t])
                sums[t] = loss if sums[t] is None else sums[t] + loss
        losses = {t: sums[t] * (1.0 / cfg.batch_size) for t in model.task_names}
        for t, loss in losses.items():
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at step {step} for task {t}")
        total = total_loss(losses, betas)
        opt.zero_grad()
        total.backward()
        opt.step()
        record = {"step": step, "total": float(total.data),
                  "losses": {t: float(l.data) for t, l in losses.items()}}
        if step % cfg.log_every == 0:
            record["routing"] = {
                name: {"selection_freq": stats["selection_freq"],
                       "load_balance": stats["load_balance"]}
                for name, stats in collector.summary().items()}
        log.append(record)
        if log_hook is not None:
            log_hook(record)
    return model, log


def predictions_for_metrics(task: str, pred: Tensor) -> np.ndarray:
    """Convert raw head output to the array form each metric consumes."""
    p = pred.data
    if task in ("seg", "partseg"):
        return p.argmax(axis=-1)
    if task == "depth":
        return p[..., 0]
    if task == "normal":
        return p
    # bound/sal: probability maps
    z = p[..., 0]
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def evaluate(model, dataset, baselines: dict | None = None,
             num_classes: int | None = None) -> MetricsReport:
    """Single eval-mode pass per sample serving every task; optional delta_m.

    ``baselines`` maps task name to the single-task reference metric; when
    provided it must cover every active task.
    """
    tasks = model.task_names
    num_classes = num_classes if num_classes is not None else model.cfg.num_classes
    collector = RoutingCollector()
    preds = {t: [] for t in tasks}
    targets = {t: [] for t in tasks}
    with no_grad():
        for sample in dataset:
            out = model.forward(Tensor(sample.image), training=False,
                                collector=collector)
            tgt = sample_targets(sample)
            for t in tasks:
                preds[t].append(predictions_for_metrics(t, out[t]))
                targets[t].append(tgt[t])
    values = {t: compute_metric(t, preds[t], targets[t], num_classes=num_classes)
              for t in tasks}
    directions = [make_task_spec(t, num_classes).higher_better for t in tasks]
    f_m = [values[t] for t in tasks]
    report = MetricsReport(
        tasks={t: {"metric": metric_name(t), "value": values[t]} for t in tasks},
        f_m=f_m, directions=directions,
        census=count_params(model).to_dict(),
        routing=collector.summary() or None)
    if baselines is not None:
        missing = [t for t in tasks if t not in baselines]
        if missing:
            raise ConfigError(f"delta_m requested but baselines missing for {missing}")
        report.f_s = [float(baselines[t]) for t in tasks]
        report.delta_m = delta_m(f_m, report.f_s, directions)
    return report
