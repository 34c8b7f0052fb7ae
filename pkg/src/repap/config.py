"""Experiment configuration: dataclass tree, YAML round-trip, presets.

Configs hash canonically (sorted-key JSON) so semantically identical files
map to the same run identity regardless of key order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace

import yaml

from .alignment import PAPER_C_MID, PAPER_C_OUT, AlignmentConfig
from .backbones import (
    DiTConfig,
    UNetConfig,
    desk_dit_config,
    desk_unet_config,
    paper_dit_config,
    paper_unet_config,
)
from .tasks import TASK_CHANNELS, TASK_CONDITIONING, TASKS

MODES = ("generation", "reconstruction")

# Element counts whose node grids divide evenly through the U-Net stages.
DESK_TOPOLOGY_ELEMS = 15
DESK_SAMPLE_SIZE = 32


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class ScheduleConfig:
    """Noise schedule parameters."""

    T: int = 1000
    kind: str = "cosine"
    s: float = 0.008

    def __post_init__(self):
        if self.kind != "cosine":
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.T < 2:
            raise ConfigError("schedule needs at least 2 steps")


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam hyperparameters plus gradient clipping."""

    lr: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("optimizer needs positive lr and batch size")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training or sampling run depends on."""

    task: str = "darcy"
    mode: str = "generation"
    backbone: UNetConfig | DiTConfig = field(
        default_factory=lambda: desk_unet_config(2, 2)
    )
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    iterations: int = 2000
    ema_decay: float = 0.99
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    dataset: str = ""
    n_train: int = 256
    out_dir: str = "runs"
    log_every: int = 50
    checkpoint_every: int = 500
    eval_samples: int = 16
    observed_ratio: float = 0.3

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.iterations < 1:
            raise ConfigError("iteration budget must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("EMA decay must lie in [0, 1)")
        if not 0.0 < self.observed_ratio < 1.0:
            raise ConfigError("observed ratio must lie in (0, 1)")


def task_channel_counts(task: str) -> tuple[int, int]:
    """(in_channels, out_channels) for a task's backbone."""
    out = len(TASK_CHANNELS[task])
    return out + len(TASK_CONDITIONING[task]), out


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Nested plain-type dict, YAML- and JSON-serializable."""
    return _plain(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over canonical sorted-key JSON of the config."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in fields(cls) if f.init}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in section {section!r}"
        )
    tupled = {
        k: tuple(v) if isinstance(v, list) else v for k, v in data.items()
    }
    try:
        return cls(**tupled)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad section {section!r}: {e}") from e


def _build_backbone(data: dict, task: str):
    data = dict(data)
    kind = data.pop("kind", "unet")
    in_ch, out_ch = task_channel_counts(task)
    data.setdefault("in_channels", in_ch)
    data.setdefault("out_channels", out_ch)
    if kind == "unet":
        return _build_section(UNetConfig, data, "backbone")
    if kind == "dit":
        return _build_section(DiTConfig, data, "backbone")
    raise ConfigError(f"unknown backbone kind {kind!r}")


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config from a (possibly partial) nested dict.

    Missing keys take defaults; unknown keys are an error so typos cannot
    silently drop settings.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    task = data.get("task", "darcy")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")

    sections = {
        "backbone": lambda d: _build_backbone(d, task),
        "alignment": lambda d: _build_section(AlignmentConfig, d, "alignment"),
        "schedule": lambda d: _build_section(ScheduleConfig, d, "schedule"),
        "optimizer": lambda d: _build_section(OptimizerConfig, d, "optimizer"),
    }
    built = {}
    for name, builder in sections.items():
        if name in data:
            sub = data.pop(name)
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            built[name] = builder(sub)
    if "backbone" not in built:
        in_ch, out_ch = task_channel_counts(task)
        built["backbone"] = desk_unet_config(in_ch, out_ch)
    if "seeds" in data and isinstance(data["seeds"], list):
        data["seeds"] = tuple(data["seeds"])
    return _build_section(
        ExperimentConfig, {**data, **built}, "experiment"
    )


def load_config(path) -> ExperimentConfig:
    """Parse a YAML config file with full defaulting."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def effective_config_text(cfg: ExperimentConfig) -> str:
    """Fully-defaulted config as YAML, plus its hash."""
    body = yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
    return f"# config_hash: {config_hash(cfg)}\n{body}"


def _desk_grid(task: str) -> int:
    if task == "topology":
        return DESK_TOPOLOGY_ELEMS + 1
    return DESK_SAMPLE_SIZE


def desk_preset(
    task: str,
    backbone_kind: str = "unet",
    c_mid: float | None = None,
    c_out: float | None = None,
    positions: tuple[str, ...] | None = None,
    mode: str = "generation",
    seed: int = 0,
) -> ExperimentConfig:
    """Laptop-scale run: small grids, width-8 U-Net, 2,000 iterations.

    Topology runs on a 15x15 element grid so its 16x16 node container
    divides evenly through the downsampling stages.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    in_ch, out_ch = task_channel_counts(task)
    size = _desk_grid(task)
    if backbone_kind == "unet":
        backbone = desk_unet_config(in_ch, out_ch, sample_size=size)
        default_positions = ("bottleneck",)
    elif backbone_kind == "dit":
        backbone = desk_dit_config(in_ch, out_ch, sample_size=size)
        default_positions = ("block_2",)
    else:
        raise ConfigError(f"unknown backbone kind {backbone_kind!r}")
    alignment = AlignmentConfig(
        positions=positions if positions is not None else default_positions,
        c_mid=PAPER_C_MID[task] if c_mid is None else c_mid,
        c_out=PAPER_C_OUT[task] if c_out is None else c_out,
    )
    return ExperimentConfig(
        task=task,
        mode=mode,
        backbone=backbone,
        alignment=alignment,
        schedule=ScheduleConfig(T=100 if task == "charge" else 400),
        optimizer=OptimizerConfig(lr=2e-3, batch_size=16),
        iterations=2000,
        ema_decay=0.99,
        seed=seed,
        n_train=256,
        log_every=50,
        checkpoint_every=500,
        eval_samples=16,
    )


_PAPER_TRAINING = {
    # task: (iterations, lr, T)
    "darcy": (120_000, 1e-4, 1000),
    "topology": (150_000, 5e-5, 1000),
    "charge": (120_000, 1e-4, 100),
    "turbulence": (120_000, 1e-4, 1000),
}

_PAPER_N_TRAIN = {
    "darcy": 10_000,
    "topology": 24_000,
    "charge": 200_000,
    "turbulence": 10_000,
}


def paper_preset(
    task: str,
    backbone_kind: str = "unet",
    mode: str = "generation",
    seed: int = 0,
) -> ExperimentConfig:
    """Published training scale; far beyond desk runtime budgets."""
    if task not in _PAPER_TRAINING:
        raise ConfigError(f"unknown task {task!r}")
    iterations, lr, T = _PAPER_TRAINING[task]
    in_ch, out_ch = task_channel_counts(task)
    if backbone_kind == "unet":
        backbone = paper_unet_config(task)
        positions = ("bottleneck",)
    elif backbone_kind == "dit":
        backbone = paper_dit_config(in_ch, out_ch)
        positions = ("block_4",)
    else:
        raise ConfigError(f"unknown backbone kind {backbone_kind!r}")
    return ExperimentConfig(
        task=task,
        mode=mode,
        backbone=backbone,
        alignment=AlignmentConfig(
            positions=positions, c_mid=PAPER_C_MID[task], c_out=PAPER_C_OUT[task]
        ),
        schedule=ScheduleConfig(T=T),
        optimizer=OptimizerConfig(lr=lr, batch_size=32),
        iterations=iterations,
        ema_decay=0.99,
        seed=seed,
        n_train=_PAPER_N_TRAIN[task],
        log_every=500,
        checkpoint_every=5000,
        eval_samples=64,
    )


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, seed=seed)
