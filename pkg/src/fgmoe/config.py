"""Experiment configuration and the flat key=value config file format.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` starts a
comment.  Unknown keys are errors.  Command-line overrides use the same
key names.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .tasks import FOUR_TASKS, TASK_NAMES

MODES = ("full", "decoder-only")
SYNTHETIC_TASKS = set(FOUR_TASKS)


@dataclass
class ExperimentConfig:
    # model
    base_channels: int = 224          # encoder width C'; stages are C'..8C'
    decoder_channels: int = 64        # aggregated feature width C
    attention_heads: int = 4
    shared_experts: int = 2
    routed_experts: int = 6
    top_k: int = 3
    expert_hidden: int = 256
    moe_depth: int = 1                # task-specific MoE layers per task
    decoder: str = "fgmoe"            # "fgmoe" or "mlp" (parameter-matched baseline)
    mlp_hidden: int = 0               # 0 = solve width to match fgmoe decoder params
    upsample: str = "nearest"
    # tasks / training
    tasks: tuple = FOUR_TASKS
    mode: str = "decoder-only"        # full | decoder-only | single:<task>
    lr: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    steps: int = 300
    batch_size: int = 4
    seed: int = 0
    cache_features: bool = True
    log_every: int = 1
    # data
    data_seed: int = 0
    image_size: int = 64
    num_classes: int = 6
    shapes_min: int = 1
    shapes_max: int = 3
    depth_min: float = 2.0
    depth_max: float = 18.0
    train_samples: int = 200
    eval_samples: int = 50
    # output
    out_dir: str = "runs/exp"

    def __post_init__(self):
        self.validate()

    # ---- validation -----------------------------------------------------

    def validate(self) -> None:
        if isinstance(self.tasks, str):
            self.tasks = tuple(t.strip() for t in self.tasks.split(",") if t.strip())
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ConfigError("tasks must name at least one task")
        for t in self.tasks:
            if t not in TASK_NAMES:
                raise ConfigError(f"unknown task {t!r}; known: {', '.join(TASK_NAMES)}")
        if "depth" in self.tasks and ({"partseg", "sal"} & set(self.tasks)):
            raise ConfigError("task sets cannot mix depth with partseg/sal")
        unsupported = set(self.tasks) - SYNTHETIC_TASKS
        if unsupported:
            raise ConfigError(
                f"no synthetic targets for {sorted(unsupported)}; "
                f"supported tasks: {sorted(SYNTHETIC_TASKS)}")
        if self.mode not in MODES and not self.mode.startswith("single:"):
            raise ConfigError(
                f"mode must be full, decoder-only, or single:<task>, got {self.mode!r}")
        if self.mode.startswith("single:"):
            t = self.single_task
            if t not in self.tasks:
                raise ConfigError(f"single-task mode names {t!r}, not in tasks {self.tasks}")
        if not 1 <= self.top_k <= self.routed_experts:
            raise ConfigError(
                f"top_k must satisfy 1 <= k <= routed_experts "
                f"({self.routed_experts}), got {self.top_k}")
        if self.shared_experts < 0:
            raise ConfigError(f"shared_experts must be >= 0, got {self.shared_experts}")
        if self.decoder not in ("fgmoe", "mlp"):
            raise ConfigError(f"decoder must be 'fgmoe' or 'mlp', got {self.decoder!r}")
        if self.decoder_channels % self.attention_heads:
            raise ConfigError(
                f"decoder_channels {self.decoder_channels} must be divisible by "
                f"attention_heads {self.attention_heads}")
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 32")
        if self.upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"upsample must be 'nearest' or 'bilinear', got {self.upsample!r}")
        if self.moe_depth < 1:
            raise ConfigError(f"moe_depth must be >= 1, got {self.moe_depth}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    # ---- derived views --------------------------------------------------

    @property
    def single_task(self) -> str | None:
        if self.mode.startswith("single:"):
            return self.mode.split(":", 1)[1]
        return None

    @property
    def active_tasks(self) -> tuple:
        t = self.single_task
        return (t,) if t else self.tasks

    @property
    def encoder_frozen(self) -> bool:
        return self.mode != "full"

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"] = ",".join(self.tasks)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean {key}={raw!r}")
    if f.type in ("tuple", tuple):
        return tuple(t.strip() for t in raw.split(",") if t.strip())
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    return values


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Build a config from an optional file plus key=value override strings."""
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)
