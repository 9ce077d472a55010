"""Mixture-of-experts layers with sigmoid affinities and sparse top-k routing.

A layer holds N_s always-active shared experts and N_it routed experts with
one centroid each.  Tokens are layer-normalized, scored against centroids
(s_i = sigmoid(x . e_i)), and the top-k scores are kept and renormalized to
sum to one; unselected experts receive an exact zero gate and no gradient.
The layer output is the sum of all shared expert outputs plus the gated sum
of selected routed experts.  Task-specific layers return that sum directly;
the shared global layer adds a residual connection to its input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gelu, layer_norm, linear, scatter_rows, sigmoid
from .errors import ConfigError, DimensionError


def select_topk(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties go to the lowest index."""
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:k])


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Row-wise 0/1 selection mask for a (N, E) score matrix."""
    order = np.argsort(-values, axis=1, kind="stable")
    mask = np.zeros_like(values)
    np.put_along_axis(mask, order[:, :k], 1.0, axis=1)
    return mask


@dataclass
class GateVector:
    """Routing decision for a single token."""
    affinities: np.ndarray      # s, all experts
    gates: np.ndarray           # g: s on the selected set, 0 elsewhere
    normalized: np.ndarray      # G: g / sum(g)
    selected: tuple             # ascending expert indices


def topk_gate(s, k: int) -> GateVector:
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    if s.ndim != 1:
        raise DimensionError(f"topk_gate expects a 1-D affinity vector, got shape {s.shape}")
    n = s.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"top_k must satisfy 1 <= k <= {n}, got {k}")
    sel = select_topk(s, k)
    g = np.zeros_like(s)
    g[sel] = s[sel]
    return GateVector(affinities=s, gates=g, normalized=g / g.sum(), selected=tuple(sel))


class Expert:
    """Two-layer MLP: W2 gelu(W1 x + b1) + b2."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        b1 = 1.0 / np.sqrt(channels)
        b2 = 1.0 / np.sqrt(hidden)
        self.w1 = Tensor(rng.uniform(-b1, b1, size=(channels, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-b2, b2, size=(hidden, channels)), requires_grad=True)
        self.b2 = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)

    def named_params(self, prefix: str):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


class RoutingCollector:
    """Accumulates selection masks and gate values across forward calls."""

    def __init__(self):
        self.masks: dict[str, list] = {}
        self.gates: dict[str, list] = {}

    def add(self, name: str, mask: np.ndarray, gates: np.ndarray) -> None:
        self.masks.setdefault(name, []).append(mask)
        self.gates.setdefault(name, []).append(gates)

    def summary(self) -> dict:
        out = {}
        for name in self.masks:
            mask = np.concatenate(self.masks[name], axis=0)
            gates = np.concatenate(self.gates[name], axis=0)
            out[name] = _stats_from(mask, gates)
        return out


def _stats_from(mask: np.ndarray, gates: np.ndarray) -> dict:
    counts = mask.sum(axis=0)
    mean_count = counts.mean()
    balance = float(counts.var() / mean_count) if mean_count > 0 else 0.0
    return {
        "tokens": int(mask.shape[0]),
        "selection_freq": (counts / mask.shape[0]).tolist(),
        "mean_gate_mass": gates.mean(axis=0).tolist(),
        "load_balance": balance,
    }


class MoELayer:
    """Pre-normalized mixture layer with shared and routed experts."""

    def __init__(self, channels: int, hidden: int = 256, n_shared: int = 2,
                 n_routed: int = 6, top_k: int = 3, seed: int = 0, stream: int = 0,
                 name: str = "moe"):
        if n_routed < 1:
            raise ConfigError(f"need at least one routed expert, got {n_routed}")
        if not 1 <= top_k <= n_routed:
            raise ConfigError(
                f"top_k must satisfy 1 <= k <= n_routed ({n_routed}), got {top_k}")
        if n_shared < 0:
            raise ConfigError(f"n_shared must be >= 0, got {n_shared}")
        self.channels = channels
        self.top_k = top_k
        self.name = name
        rng = np.random.default_rng((seed, 3, stream))
        self.ln_gain = Tensor(np.ones(channels), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(channels), requires_grad=True)
        self.shared = [Expert(channels, hidden, rng) for _ in range(n_shared)]
        self.routed = [Expert(channels, hidden, rng) for _ in range(n_routed)]
        bound = 1.0 / np.sqrt(channels)
        self.centroids = Tensor(rng.uniform(-bound, bound, size=(n_routed, channels)),
                                requires_grad=True)

    @property
    def n_shared(self) -> int:
        return len(self.shared)

    @property
    def n_routed(self) -> int:
        return len(self.routed)

    def forward(self, x: Tensor, collector: RoutingCollector | None = None) -> Tensor:
        """Shared sum plus gated routed sum over pre-normalized tokens (no residual)."""
        if x.ndim != 2 or x.shape[1] != self.channels:
            raise DimensionError(
                f"moe layer built for N x {self.channels} tokens, got {x.shape}")
        n = x.shape[0]
        z = layer_norm(x, self.ln_gain, self.ln_bias)
        s = sigmoid(z @ self.centroids.transpose(1, 0))      # N x n_routed
        mask = topk_mask(s.data, self.top_k)
        g = s * mask                                          # exact zeros off-selection
        gate = g / g.sum(axis=1, keepdims=True)
        if collector is not None:
            collector.add(self.name, mask, gate.data.copy())
        y = None
        for ex in self.shared:
            out = ex(z)
            y = out if y is None else y + out
        for i, ex in enumerate(self.routed):
            idx = np.flatnonzero(mask[:, i])
            if idx.size == 0:
                continue
            zi = z[idx]
            wi = gate[idx, i].reshape(idx.size, 1)
            contrib = scatter_rows(ex(zi) * wi, idx, n)
            y = contrib if y is None else y + contrib
        return y if y is not None else Tensor(np.zeros_like(x.data))

    def forward_residual(self, x: Tensor, collector: RoutingCollector | None = None) -> Tensor:
        """Global variant: mixture output plus the input itself."""
        return self.forward(x, collector) + x

    def named_params(self, prefix: str):
        out = [(f"{prefix}.ln.gain", self.ln_gain), (f"{prefix}.ln.bias", self.ln_bias)]
        for i, ex in enumerate(self.shared):
            out.extend(ex.named_params(f"{prefix}.shared{i}"))
        for i, ex in enumerate(self.routed):
            out.extend(ex.named_params(f"{prefix}.routed{i}"))
        out.append((f"{prefix}.centroids", self.centroids))
        return out


def combine(y_global: Tensor, y_task: Tensor) -> Tensor:
    """Elementwise sum of the global and task-specific mixture outputs."""
    if y_global.shape != y_task.shape:
        raise DimensionError(
            f"combine expects matching shapes, got {y_global.shape} and {y_task.shape}")
    return y_global + y_task


@dataclass
class RoutingReport:
    tokens: int
    selection_freq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_gate_mass: np.ndarray = field(default_factory=lambda: np.zeros(0))
    load_balance: float = 0.0

    def to_dict(self) -> dict:
        return {"tokens": self.tokens,
                "selection_freq": np.asarray(self.selection_freq).tolist(),
                "mean_gate_mass": np.asarray(self.mean_gate_mass).tolist(),
                "load_balance": float(self.load_balance)}


def routing_stats(layer: MoELayer, tokens) -> RoutingReport:
    """Selection frequencies, mean gate mass, and count dispersion for a batch.

    The load-balance coefficient is variance(counts) / mean(counts); an
    empty batch yields an empty report.
    """
    tokens = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens,
                        dtype=np.float64)
    if tokens.size == 0:
        return RoutingReport(tokens=0)
    collector = RoutingCollector()
    from .autodiff import no_grad
    with no_grad():
        layer.forward(Tensor(tokens), collector)
    stats = collector.summary()[layer.name]
    return RoutingReport(tokens=stats["tokens"],
                         selection_freq=np.array(stats["selection_freq"]),
                         mean_gate_mass=np.array(stats["mean_gate_mass"]),
                         load_balance=stats["load_balance"])
