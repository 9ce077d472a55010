"""Model assembly: encoder, aggregator, global mixture layer, per-task
branches (mixer -> task mixture -> head), and a parameter-matched shared-MLP
decoder used as a multi-task baseline.

Parameter draws use per-component RNG streams keyed by (seed, component,
task), so the encoder and any given task branch are initialized identically
regardless of which other tasks are configured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregator import Aggregator
from .autodiff import Tensor, gelu, linear
from .config import ExperimentConfig
from .encoder import Encoder, EncoderConfig, FeaturePyramid
from .mixer import DeformableMixer
from .moe import MoELayer, RoutingCollector, combine
from .tasks import Head, make_task_spec

# Stable per-task stream ids so initialization does not depend on the task set.
_TASK_STREAMS = {"seg": 0, "partseg": 1, "sal": 2, "depth": 3, "normal": 4, "bound": 5}
_GLOBAL_STREAM = 100
_TRUNK_STREAM = 200


@dataclass
class ParamCensus:
    total: int
    trainable: int
    breakdown: dict          # component -> {"total": n, "trainable": n}

    def to_dict(self) -> dict:
        return {"total": self.total, "trainable": self.trainable,
                "breakdown": self.breakdown}


class TaskBranch:
    def __init__(self, task: str, cfg: ExperimentConfig):
        stream = _TASK_STREAMS[task]
        self.task = task
        self.spec = make_task_spec(task, cfg.num_classes)
        self.mixer = DeformableMixer(cfg.decoder_channels, heads=cfg.attention_heads,
                                     seed=cfg.seed, stream=stream)
        self.moe_layers = [
            MoELayer(cfg.decoder_channels, hidden=cfg.expert_hidden,
                     n_shared=cfg.shared_experts, n_routed=cfg.routed_experts,
                     top_k=cfg.top_k, seed=cfg.seed, stream=stream * 10 + d,
                     name=f"task_moe.{task}" + (f".{d}" if cfg.moe_depth > 1 else ""))
            for d in range(cfg.moe_depth)
        ]
        self.head = Head(cfg.decoder_channels, self.spec, seed=cfg.seed, stream=stream)

    def tokens(self, x_map: Tensor, training: bool,
               collector: RoutingCollector | None) -> Tensor:
        y = self.mixer.forward(x_map, training)
        for layer in self.moe_layers:
            y = layer.forward(y, collector)
        return y


class FGMoEModel:
    """Multi-task decoder with task-specific and shared mixture-of-experts."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.task_names = tuple(cfg.active_tasks)
        self.encoder = Encoder(EncoderConfig(base_channels=cfg.base_channels,
                                             seed=cfg.seed, frozen=cfg.encoder_frozen))
        self.aggregator = Aggregator(cfg.base_channels, cfg.decoder_channels,
                                     seed=cfg.seed, mode=cfg.upsample)
        self.global_moe = MoELayer(cfg.decoder_channels, hidden=cfg.expert_hidden,
                                   n_shared=cfg.shared_experts,
                                   n_routed=cfg.routed_experts, top_k=cfg.top_k,
                                   seed=cfg.seed, stream=_GLOBAL_STREAM,
                                   name="global_moe")
        self.branches = {t: TaskBranch(t, cfg) for t in self.task_names}

    # ---- forward --------------------------------------------------------

    def forward(self, image, training: bool = False,
                collector: RoutingCollector | None = None,
                pyramid: FeaturePyramid | None = None) -> dict:
        """One pass producing full-resolution predictions for every task."""
        if pyramid is None:
            pyramid = self.encoder.encode(image)
        x_map = self.aggregator(pyramid)
        h4, w4, c = x_map.shape
        height, width = 4 * h4, 4 * w4
        tokens = x_map.reshape(h4 * w4, c)
        y_global = self.global_moe.forward_residual(tokens, collector)
        preds = {}
        for t in self.task_names:
            branch = self.branches[t]
            y_task = branch.tokens(x_map, training, collector)
            preds[t] = branch.head.forward(combine(y_global, y_task), height, width)
        return preds

    # ---- state ----------------------------------------------------------

    def named_parameters(self):
        out = list(self.encoder.named_params())
        out.extend(self.aggregator.named_params())
        out.extend(self.global_moe.named_params("global_moe"))
        for t in self.task_names:
            b = self.branches[t]
            out.extend(b.mixer.named_params(f"mixer.{t}"))
            for i, layer in enumerate(b.moe_layers):
                out.extend(layer.named_params(f"task_moe.{t}.{i}"))
            out.extend(b.head.named_params(f"head.{t}"))
        return out

    def named_buffers(self):
        out = []
        for t in self.task_names:
            out.extend(self.branches[t].mixer.named_buffers(f"mixer.{t}"))
        return out

    def state_entries(self):
        """(name, array, trainable) triples for checkpointing, params then buffers."""
        entries = [(n, p.data, p.requires_grad) for n, p in self.named_parameters()]
        entries.extend((n, b, False) for n, b in self.named_buffers())
        return entries


class SharedMLPModel:
    """Baseline decoder: shared token MLP trunk feeding the same task heads."""

    def __init__(self, cfg: ExperimentConfig, hidden: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.task_names = tuple(cfg.active_tasks)
        self.encoder = Encoder(EncoderConfig(base_channels=cfg.base_channels,
                                             seed=cfg.seed, frozen=cfg.encoder_frozen))
        self.aggregator = Aggregator(cfg.base_channels, cfg.decoder_channels,
                                     seed=cfg.seed, mode=cfg.upsample)
        c = cfg.decoder_channels
        if hidden is None:
            hidden = cfg.mlp_hidden or solve_mlp_hidden(self._target_trunk_params(), c)
        self.hidden = hidden
        rng = np.random.default_rng((cfg.seed, 6, _TRUNK_STREAM))
        dims = [c, hidden, hidden, c]
        self.trunk_w, self.trunk_b = [], []
        for cin, cout in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(cin)
            self.trunk_w.append(Tensor(rng.uniform(-bound, bound, size=(cin, cout)),
                                       requires_grad=True))
            self.trunk_b.append(Tensor(np.zeros(cout), requires_grad=True))
        self.heads = {t: Head(c, make_task_spec(t, cfg.num_classes),
                              seed=cfg.seed, stream=_TASK_STREAMS[t])
                      for t in self.task_names}

    def _target_trunk_params(self) -> int:
        """FGMoE decoder trainable params minus what this baseline also has."""
        # decoder sizes do not depend on encoder width, so use a cheap encoder
        ref = FGMoEModel(self.cfg.replace(decoder="fgmoe", base_channels=8))
        census = count_params(ref)
        shared = census.breakdown["aggregator"]["total"] + sum(
            census.breakdown[f"head.{t}"]["total"] for t in self.task_names)
        decoder_total = census.total - census.breakdown["encoder"]["total"]
        return decoder_total - shared

    def forward(self, image, training: bool = False,
                collector: RoutingCollector | None = None,
                pyramid: FeaturePyramid | None = None) -> dict:
        if pyramid is None:
            pyramid = self.encoder.encode(image)
        x_map = self.aggregator(pyramid)
        h4, w4, c = x_map.shape
        tokens = x_map.reshape(h4 * w4, c)
        z = tokens
        for w, b in zip(self.trunk_w, self.trunk_b):
            z = gelu(linear(z, w, b))
        return {t: self.heads[t].forward(z, 4 * h4, 4 * w4) for t in self.task_names}

    def named_parameters(self):
        out = list(self.encoder.named_params())
        out.extend(self.aggregator.named_params())
        for i, (w, b) in enumerate(zip(self.trunk_w, self.trunk_b)):
            out.append((f"trunk.layer{i}.weight", w))
            out.append((f"trunk.layer{i}.bias", b))
        for t in self.task_names:
            out.extend(self.heads[t].named_params(f"head.{t}"))
        return out

    def named_buffers(self):
        return []

    def state_entries(self):
        return [(n, p.data, p.requires_grad) for n, p in self.named_parameters()]


def solve_mlp_hidden(target: int, c: int) -> int:
    """Hidden width whose trunk (c->h->h->c plus biases) best matches target."""
    # params(h) = h^2 + h(2c + 2) + c
    a, b = 1.0, 2.0 * c + 2.0
    disc = b * b - 4.0 * a * (c - target)
    if disc <= 0:
        return 1
    root = int(round((-b + np.sqrt(disc)) / 2.0))
    best, best_diff = 1, None
    for h in range(max(1, root - 2), root + 3):
        diff = abs(h * h + h * (2 * c + 2) + c - target)
        if best_diff is None or diff < best_diff:
            best, best_diff = h, diff
    return best


def build_model(cfg: ExperimentConfig):
    cfg.validate()
    if cfg.decoder == "mlp":
        return SharedMLPModel(cfg)
    return FGMoEModel(cfg)


def count_params(model) -> ParamCensus:
    """Parameter census; BN running statistics are buffers, not parameters."""
    groups: dict[str, dict] = {}
    total = trainable = 0
    for name, p in model.named_parameters():
        head = name.split(".")[0]
        if head in ("mixer", "task_moe", "head"):
            head = ".".join(name.split(".")[:2])
        g = groups.setdefault(head, {"total": 0, "trainable": 0})
        g["total"] += p.size
        total += p.size
        if p.requires_grad:
            g["trainable"] += p.size
            trainable += p.size
    return ParamCensus(total=total, trainable=trainable, breakdown=groups)
