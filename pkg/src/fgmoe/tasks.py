"""Task definitions: prediction heads, losses, evaluation metrics, and the
multi-task performance summary delta_m.

Each task carries a loss weight and a direction (whether its metric is
better when higher).  delta_m averages the signed relative change of each
task metric against a single-task baseline, in percent; the sign flips for
lower-is-better tasks so that positive delta_m always means better.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, absval, clip_min, linear, log, log_softmax, relu,
                       sqrt, upsample_nearest)
from .errors import ConfigError, DimensionError, MetricError

IGNORE_LABEL = 255


@dataclass(frozen=True)
class TaskSpec:
    name: str
    out_channels: int
    loss_weight: float
    higher_better: bool
    metric: str


# Default loss weights and metric directions per task.  seg/partseg channel
# counts depend on the dataset and are filled in by make_task_spec.
_TASK_DEFAULTS = {
    "seg": dict(out_channels=0, loss_weight=1.0, higher_better=True, metric="mIoU"),
    "partseg": dict(out_channels=0, loss_weight=2.0, higher_better=True, metric="mIoU"),
    "sal": dict(out_channels=1, loss_weight=5.0, higher_better=True, metric="maxF"),
    "depth": dict(out_channels=1, loss_weight=1.0, higher_better=False, metric="rmse"),
    "normal": dict(out_channels=3, loss_weight=10.0, higher_better=False, metric="mErr"),
    "bound": dict(out_channels=1, loss_weight=50.0, higher_better=True,
                  metric="odsF-simplified"),
}

TASK_NAMES = tuple(_TASK_DEFAULTS)

# Two standard groupings: the four-task set pairs depth with seg, normals
# and boundaries; the five-task set swaps depth for parts and saliency.
# Configs may not mix depth with partseg/sal.
FOUR_TASKS = ("seg", "depth", "normal", "bound")
FIVE_TASKS = ("seg", "partseg", "sal", "normal", "bound")


def make_task_spec(name: str, num_classes: int = 0) -> TaskSpec:
    if name not in _TASK_DEFAULTS:
        raise ConfigError(f"unknown task {name!r}; known: {', '.join(TASK_NAMES)}")
    d = dict(_TASK_DEFAULTS[name])
    if name in ("seg", "partseg"):
        if num_classes < 2:
            raise ConfigError(f"{name} needs num_classes >= 2, got {num_classes}")
        d["out_channels"] = num_classes
    return TaskSpec(name=name, **d)


def default_loss_weights(tasks) -> dict:
    return {t: _TASK_DEFAULTS[t]["loss_weight"] for t in tasks}


# ---- prediction heads ----------------------------------------------------


class Head:
    """1x1 conv over tokens, unflatten, then 4x nearest upsampling."""

    def __init__(self, channels: int, spec: TaskSpec, seed: int = 0, stream: int = 0):
        self.spec = spec
        self.channels = channels
        rng = np.random.default_rng((seed, 4, stream))
        bound = 1.0 / np.sqrt(channels)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(channels, spec.out_channels)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def forward(self, tokens: Tensor, height: int, width: int) -> Tensor:
        h4, w4 = height // 4, width // 4
        n, c = tokens.shape
        if n != h4 * w4:
            raise DimensionError(
                f"head got {n} tokens but expects {h4 * w4} for a {height}x{width} output")
        if c != self.channels:
            raise DimensionError(f"head built for {self.channels} channels, got {c}")
        y = linear(tokens, self.weight, self.bias).reshape(h4, w4, self.spec.out_channels)
        y = upsample_nearest(y, 4)
        if self.spec.name == "normal":
            sq = (y * y).sum(axis=-1, keepdims=True)
            y = y / sqrt(clip_min(sq, 1e-24))
        return y

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


# ---- losses --------------------------------------------------------------


def _cross_entropy(pred: Tensor, target: np.ndarray, ignore: int):
    h, w, k = pred.shape
    flat_t = target.reshape(-1).astype(np.int64)
    valid = np.flatnonzero(flat_t != ignore)
    if valid.size == 0:
        return Tensor(np.float64(0.0)), True
    logp = log_softmax(pred.reshape(h * w, k), axis=-1)
    picked = logp[valid, flat_t[valid]]
    return -picked.mean(), False


def _bce_with_logits(pred: Tensor, target: np.ndarray) -> Tensor:
    z = pred.reshape(target.size)
    y = target.reshape(-1).astype(np.float64)
    # max(z,0) - z*y + log(1 + exp(-|z|)): stable for large |z|
    return (relu(z) - z * y + log(1.0 + (-absval(z)).exp())).mean()


def task_loss(pred: Tensor, target: np.ndarray, spec: TaskSpec,
              ignore_label: int = IGNORE_LABEL, return_flag: bool = False):
    """Per-task training loss as a scalar Tensor.

    seg/partseg: pixel cross-entropy with an ignore label; depth: L1;
    normal: 1 - mean cosine similarity; bound/sal: binary cross-entropy on
    logits.  A fully-ignored segmentation target yields a zero loss and, if
    requested, an ``all_ignored`` flag.
    """
    target = np.asarray(target)
    all_ignored = False
    if spec.name in ("seg", "partseg"):
        loss, all_ignored = _cross_entropy(pred, target, ignore_label)
    elif spec.name == "depth":
        loss = absval(pred.reshape(target.size) - target.reshape(-1)).mean()
    elif spec.name == "normal":
        cos = (pred * target.reshape(pred.shape)).sum(axis=-1)
        loss = 1.0 - cos.mean()
    elif spec.name in ("bound", "sal"):
        loss = _bce_with_logits(pred, target)
    else:
        raise ConfigError(f"no loss defined for task {spec.name!r}")
    if return_flag:
        return loss, all_ignored
    return loss


def total_loss(losses: dict, weights: dict) -> Tensor:
    """Weighted sum over tasks; the key sets must match exactly."""
    if set(losses) != set(weights):
        raise ConfigError(
            f"loss/weight task sets differ: {sorted(losses)} vs {sorted(weights)}")
    total = None
    for name in losses:
        term = losses[name] * float(weights[name])
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("total_loss needs at least one task")
    return total


# ---- metrics -------------------------------------------------------------


def _as_label_maps(preds):
    out = []
    for p in preds:
        p = np.asarray(p.data if isinstance(p, Tensor) else p)
        out.append(p.argmax(axis=-1) if p.ndim == 3 else p)
    return out


def miou(preds, targets, num_classes: int | None = None,
         ignore_label: int = IGNORE_LABEL, task: str = "seg") -> float:
    """Dataset-level mean IoU over the classes present in the targets."""
    preds = _as_label_maps(preds)
    targets = [np.asarray(t) for t in targets]
    if num_classes is None:
        seen = max((int(t[t != ignore_label].max(initial=0)) for t in targets), default=0)
        num_classes = max(seen + 1, max((int(p.max(initial=0)) for p in preds), default=0) + 1)
    inter = np.zeros(num_classes)
    union = np.zeros(num_classes)
    present = np.zeros(num_classes, dtype=bool)
    valid_total = 0
    for p, t in zip(preds, targets):
        valid = t != ignore_label
        valid_total += int(valid.sum())
        pv, tv = p[valid].astype(np.int64), t[valid].astype(np.int64)
        for c in range(num_classes):
            pc, tc = pv == c, tv == c
            inter[c] += np.logical_and(pc, tc).sum()
            union[c] += np.logical_or(pc, tc).sum()
            present[c] |= bool(tc.any())
    if valid_total == 0:
        raise MetricError(f"{task}: no valid pixels")
    classes = np.flatnonzero(present)
    ious = [inter[c] / union[c] if union[c] > 0 else 1.0 for c in classes]
    return float(np.mean(ious))


def rmse(preds, targets, task: str = "depth") -> float:
    """Root mean squared error over valid (positive-target) pixels."""
    se, count = 0.0, 0
    for p, t in zip(preds, targets):
        p = np.asarray(p.data if isinstance(p, Tensor) else p).reshape(np.asarray(t).shape)
        t = np.asarray(t)
        valid = t > 0
        se += float(((p[valid] - t[valid]) ** 2).sum())
        count += int(valid.sum())
    if count == 0:
        raise MetricError(f"{task}: no valid pixels")
    return float(np.sqrt(se / count))


def mean_angular_error(preds, targets, task: str = "normal") -> float:
    """Mean angle between predicted and target unit normals, in degrees."""
    total, count = 0.0, 0
    for p, t in zip(preds, targets):
        p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        pn = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
        tn = t / np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
        dot = np.clip((pn * tn).sum(axis=-1), -1.0, 1.0)
        total += float(np.degrees(np.arccos(dot)).sum())
        count += dot.size
    if count == 0:
        raise MetricError(f"{task}: no valid pixels")
    return total / count


def best_f_measure(preds, targets, task: str = "bound") -> float:
    """Best single-threshold dataset-level pixel F1 over probability maps.

    This is a simplified stand-in for boundary/saliency F metrics: no
    boundary-tolerance matching is applied; reports label it accordingly.
    """
    thresholds = np.linspace(0.01, 0.99, 99)
    flat_p, flat_t = [], []
    for p, t in zip(preds, targets):
        p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
        flat_p.append(p.reshape(-1))
        flat_t.append(np.asarray(t).reshape(-1) > 0)
    if not flat_p or sum(a.size for a in flat_p) == 0:
        raise MetricError(f"{task}: no valid pixels")
    prob = np.concatenate(flat_p)
    truth = np.concatenate(flat_t)
    best = 0.0
    for th in thresholds:
        sel = prob >= th
        tp = np.logical_and(sel, truth).sum()
        fp = np.logical_and(sel, ~truth).sum()
        fn = np.logical_and(~sel, truth).sum()
        denom = 2 * tp + fp + fn
        f = 2.0 * tp / denom if denom > 0 else 0.0
        best = max(best, float(f))
    return best


def compute_metric(task: str, preds, targets, num_classes: int | None = None) -> float:
    """Dataset-level metric for a task; raises MetricError when undefined."""
    if len(preds) != len(targets):
        raise DimensionError(
            f"{task}: {len(preds)} predictions vs {len(targets)} targets")
    if len(preds) == 0:
        raise MetricError(f"{task}: no valid pixels")
    if task in ("seg", "partseg"):
        return miou(preds, targets, num_classes=num_classes, task=task)
    if task == "depth":
        return rmse(preds, targets, task=task)
    if task == "normal":
        return mean_angular_error(preds, targets, task=task)
    if task in ("bound", "sal"):
        return best_f_measure(preds, targets, task=task)
    raise ConfigError(f"unknown task {task!r}")


def metric_name(task: str) -> str:
    return _TASK_DEFAULTS[task]["metric"]


# ---- multi-task summary --------------------------------------------------


def delta_m(f_m, f_s, higher_better) -> float:
    """Mean signed relative metric change vs single-task baselines, percent."""
    f_m = np.asarray(f_m, dtype=np.float64)
    f_s = np.asarray(f_s, dtype=np.float64)
    signs = np.where(np.asarray(higher_better, dtype=bool), 1.0, -1.0)
    if not (f_m.shape == f_s.shape == signs.shape):
        raise DimensionError(
            f"delta_m shapes differ: {f_m.shape}, {f_s.shape}, {signs.shape}")
    if np.any(f_s == 0.0):
        raise MetricError("delta_m undefined: a baseline metric is zero")
    return float(np.mean(signs * (f_m - f_s) / f_s) * 100.0)


@dataclass
class MetricsReport:
    tasks: dict                       # task -> {"metric": name, "value": float}
    f_m: list
    directions: list                  # higher_better flags, task order
    f_s: list | None = None
    delta_m: float | None = None
    census: dict | None = None
    routing: dict | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"tasks": self.tasks, "f_m": self.f_m, "f_s": self.f_s,
                "directions": self.directions, "delta_m": self.delta_m,
                "param_census": self.census, "routing": self.routing,
                **self.extras}
