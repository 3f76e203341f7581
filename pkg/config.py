"""Central configuration: single source of truth for all configurable values.

Process-wide settings come from environment variables with sensible defaults.
Everything that defines a run lives in `RunConfig`, a tree of frozen
dataclasses read from and written to YAML. Unknown keys and wrong types are
rejected; missing keys take the defaults below.
"""

import os
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from spin.errors import ConfigError

# Default root for run directories
OUTPUT_ROOT = os.environ.get("SPIN_OUTPUT_ROOT", "./runs")

# Threads used for shard gradients and per-condition evaluation
WORKERS = int(os.environ.get("SPIN_WORKERS", "1"))

LOG_LEVEL = os.environ.get("SPIN_LOG_LEVEL", "INFO")

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TaskConfig:
    # Inline target (TargetSpec.to_dict form); None means the built-in four-condition task
    target: dict | None = None
    dataset_path: str | None = None
    n_records: int = 4096
    condition_probs: list[float] | None = None
    seed: int = 0


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 20
    shape: str = "cosine"
    eta: float = 0.0
    gamma: list[float] | None = None
    # Explicit alpha[0..T]; when set it overrides shape
    alpha: list[float] | None = None
    # Pinned sigma[1..T] and h[1..T]; need alpha and must agree with it
    sigma: list[float] | None = None
    h: list[float] | None = None


@dataclass(frozen=True)
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    time_dim: int = 8
    clamp: float = 10.0
    init_seed: int = 1


@dataclass(frozen=True)
class LossConfig:
    ell: str = "logistic"
    variant: str = "approx-eps"
    synthetic_pairs: str = "forwardized"
    real_pairs: str = "marginal"
    beta_policy: str = "gamma-matched"
    beta_scales: list[float] = field(default_factory=lambda: [1.0, 2.5, 2.5])
    lam: float = 1.0
    shuffle_pairs: bool = False
    shared_t: bool = True


@dataclass(frozen=True)
class TrainerConfig:
    iterations: int = 3
    spin_steps: list[int] = field(default_factory=lambda: [500, 2000, 1000])
    spin_lr: list[float] = field(default_factory=lambda: [1e-3, 1e-3, 1e-4])
    spin_lr_shape: str = "linear-decay"
    base_steps: int = 1000
    base_lr: float = 1e-3
    sft_steps: int = 3500
    sft_lr: float = 1e-3
    sft_lr_shape: str = "constant"
    warmup: int = 200
    weight_decay: float = 1e-2
    batch_size: int = 64
    shards: int = 1
    checkpoint_every: int = 500
    synthetic_fraction: float = 1.0
    regenerate_every_epoch: bool = False
    test_function_diagnostics: bool = False
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 500
    n_prompts: int = 500
    best_of: int = 1
    seed: int = 7
    during_training: bool = True
    # Run directory of a finished train-sft run; SPIN iterations are compared against its selected checkpoint
    sft_run_dir: str | None = None


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "default"
    output_dir: str | None = None
    task: TaskConfig = field(default_factory=TaskConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else Path(OUTPUT_ROOT) / self.name


CHOICES = {
    "schedule.shape": ("cosine", "linear-cumulative"),
    "loss.ell": ("logistic", "hinge", "correlation"),
    "loss.variant": ("exact", "approx-mu", "approx-eps"),
    "loss.synthetic_pairs": ("backward", "forwardized"),
    "loss.real_pairs": ("marginal", "trajectory"),
    "loss.beta_policy": ("constant", "gamma-matched"),
    "trainer.spin_lr_shape": ("linear-decay", "constant"),
    "trainer.sft_lr_shape": ("linear-decay", "constant"),
}


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        # YAML 1.1 reads "1e-3" as a string
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported config type {hint}")


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where or 'top level'}: {', '.join(unknown)}")
    values = {}
    for name, raw in data.items():
        key = f"{where}.{name}" if where else name
        hint = hints[name]
        values[name] = _build(hint, raw, key) if is_dataclass(hint) else _coerce(raw, hint, key)
    return cls(**values)


def check(cfg: RunConfig) -> RunConfig:
    """Cross-field checks that a single key cannot express."""
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg.schema_version} is not supported (expected {SCHEMA_VERSION})")
    for key, allowed in CHOICES.items():
        section, name = key.split(".")
        value = getattr(getattr(cfg, section), name)
        if value not in allowed:
            raise ConfigError(f"{key}: '{value}' is not one of {allowed}")
    if cfg.schedule.T < 2:
        raise ConfigError(f"schedule.T must be >= 2, got {cfg.schedule.T}")
    if not 0.0 <= cfg.schedule.eta <= 1.0:
        raise ConfigError(f"schedule.eta must lie in [0, 1], got {cfg.schedule.eta}")
    if cfg.schedule.alpha is not None and len(cfg.schedule.alpha) != cfg.schedule.T + 1:
        raise ConfigError(f"schedule.alpha needs T+1 = {cfg.schedule.T + 1} entries")
    if cfg.schedule.gamma is not None and len(cfg.schedule.gamma) != cfg.schedule.T:
        raise ConfigError(f"schedule.gamma needs T = {cfg.schedule.T} entries")
    for key in ("sigma", "h"):
        pinned = getattr(cfg.schedule, key)
        if pinned is None:
            continue
        if cfg.schedule.alpha is None:
            raise ConfigError(f"schedule.{key} is only accepted together with schedule.alpha")
        if len(pinned) != cfg.schedule.T:
            raise ConfigError(f"schedule.{key} needs T = {cfg.schedule.T} entries")
    tr = cfg.trainer
    if tr.iterations < 1:
        raise ConfigError(f"trainer.iterations must be >= 1, got {tr.iterations}")
    for key, values in (
        ("trainer.spin_steps", tr.spin_steps),
        ("trainer.spin_lr", tr.spin_lr),
        ("loss.beta_scales", cfg.loss.beta_scales),
    ):
        if len(values) != tr.iterations:
            raise ConfigError(f"{key} needs one entry per iteration ({tr.iterations}), got {len(values)}")
    if any(s < 0 for s in [*tr.spin_steps, tr.sft_steps, tr.base_steps]):
        raise ConfigError("step counts must be non-negative")
    if any(s <= 0 for s in cfg.loss.beta_scales):
        raise ConfigError("loss.beta_scales must be positive")
    if cfg.loss.variant == "exact" and cfg.loss.synthetic_pairs != "backward":
        raise ConfigError("loss.variant exact needs loss.synthetic_pairs = backward")
    if tr.batch_size < 1 or tr.shards < 1:
        raise ConfigError("trainer.batch_size and trainer.shards must be positive")
    if not 0.0 < tr.synthetic_fraction <= 1.0:
        raise ConfigError(f"trainer.synthetic_fraction must lie in (0, 1], got {tr.synthetic_fraction}")
    if tr.test_function_diagnostics and cfg.schedule.eta == 0.0:
        raise ConfigError("trainer.test_function_diagnostics needs a stochastic schedule (schedule.eta > 0)")
    if cfg.eval.n_samples < 100 or cfg.eval.n_prompts < 100:
        raise ConfigError("eval.n_samples and eval.n_prompts must be >= 100")
    if cfg.eval.best_of < 1:
        raise ConfigError(f"eval.best_of must be >= 1, got {cfg.eval.best_of}")
    if cfg.task.n_records < 1:
        raise ConfigError(f"task.n_records must be positive, got {cfg.task.n_records}")
    return cfg


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    return check(_build(RunConfig, data, ""))


def emit_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=True)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return check(RunConfig())
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"could not read config {path}: {e}") from e
    return parse_config(text)


def check_paths(cfg: RunConfig) -> None:
    """Referenced inputs must exist before a command that reads them starts."""
    for key, value in (("task.dataset_path", cfg.task.dataset_path), ("eval.sft_run_dir", cfg.eval.sft_run_dir)):
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{key}: {value} does not exist")


def resolve(cfg: RunConfig, target: dict, schedule: dict) -> RunConfig:
    """Pin the defaults that are derived rather than written: inline target and explicit schedule arrays."""
    return replace(
        cfg,
        task=replace(cfg.task, target=target),
        schedule=replace(
            cfg.schedule,
            alpha=list(schedule["alpha"]),
            sigma=list(schedule["sigma"]),
            gamma=list(schedule["gamma"]),
            h=list(schedule["h"]),
        ),
    )
