"""Experiment configuration (YAML) with defaults, unknown-key rejection and range checks.

Schema (every key optional; shown with defaults)::

    seed: 0                    # master seed; per-stage seeds derive from it
    out: runs/default          # output directory
    task: binary               # binary | superclass
    data:
      path: null               # dataset directory (manifest.tsv); null = synthetic
      n_patients: 80           # synthetic cohort
      records_per_patient: 3
      class_mix: {NORM: 0.5, Abnormal: 0.5}
      noise_sigma: 0.05
      n_leads: 12
      ma_window: 5
      train_fraction: 0.8
      export_records: false    # also write the raw records (manifest.tsv + CSV) under data/records
    target:
      patient_id: null         # take this patient from the dataset; null = synthetic variant patient
      records: 4               # synthetic target: number of records
      finetune_records: 3      # records used for fine-tuning; the rest are held out
    model: {stage_blocks: [1,1,1,1], stage_channels: [8,16,32,64], stem_kernel: 7, block_kernel: 3}
    train: {lr: 0.02, momentum: 0.9, epochs: 30, batch_size: 16, lr_schedule: cosine}
    finetune: {lr_factor: 1.0, epochs: 20, freeze: null, replay_ratio: 6.0, bn_stats: false}
    attack: {epsilon: 0.001, iterations: 5, alpha: 0.08, label_source: true, physical_range: [-6, 6]}
    unlearn: {epochs: 20, lr: 0.01, batch_size: 16, momentum: 0.9}
    gkt: {rounds: 200, forget_classes: [Abnormal], epsilon_f: 0.01, beta: 1.0, ...}
    audit: {bins: 20, delta: 0.01}
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..adversary import AttackConfig
from ..model import ModelConfig
from ..signal import DEFAULT_MA_WINDOW
from ..unlearning.config import UnlearnConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None
    n_patients: int = 80
    records_per_patient: int = 3
    class_mix: dict = field(default_factory=lambda: {"NORM": 0.5, "Abnormal": 0.5})
    noise_sigma: float = 0.05
    n_leads: int = 12
    ma_window: int = DEFAULT_MA_WINDOW
    train_fraction: float = 0.8
    export_records: bool = False

    def validate(self) -> None:
        if self.n_patients < 1 or self.records_per_patient < 1:
            raise ValueError("n_patients and records_per_patient must be positive")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.ma_window < 1 or self.ma_window % 2 == 0:
            raise ValueError("ma_window must be an odd positive integer")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class TargetConfig:
    patient_id: str | None = None
    records: int = 4
    finetune_records: int = 3

    def validate(self) -> None:
        if not 1 <= self.finetune_records < self.records:
            raise ValueError("need 1 <= finetune_records < records (some records are held out)")


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    lr_schedule: str = "cosine"


@dataclass
class FinetuneConfig:
    lr_factor: float = 1.0
    epochs: int = 20
    freeze: list | None = None
    replay_ratio: float = 6.0
    bn_stats: bool = False     # false: BatchNorm running statistics stay at their trained values

    def validate(self) -> None:
        if not self.lr_factor > 0:
            raise ValueError("lr_factor must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.replay_ratio < 0:
            raise ValueError("replay_ratio must be >= 0")


@dataclass
class UnlearnFtConfig:
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 16
    momentum: float = 0.9


GKT_KEYS = ("rounds", "noise_dim", "generator_hidden", "generator_channels", "generator_scale",
            "epsilon_f", "beta", "generator_steps", "student_steps", "pseudo_batch",
            "generator_lr", "student_lr", "starvation_rounds", "epsilon_f_cap")


@dataclass
class GktConfig:
    forget_classes: list = field(default_factory=lambda: ["Abnormal"])
    rounds: int = 200
    noise_dim: int = 32
    generator_hidden: int = 64
    generator_channels: int = 16
    generator_scale: float = 3.0
    epsilon_f: float = 0.01
    beta: float = 1.0
    generator_steps: int = 1
    student_steps: int = 10
    pseudo_batch: int = 32
    generator_lr: float = 1e-3
    student_lr: float = 0.01
    starvation_rounds: int = 5
    epsilon_f_cap: float = 0.5

    def validate(self) -> None:
        if not self.forget_classes:
            raise ValueError("forget_classes must not be empty")


@dataclass
class AuditConfig:
    bins: int = 20
    delta: float = 0.01

    def validate(self) -> None:
        if self.bins < 1:
            raise ValueError("bins must be positive")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")


@dataclass
class ModelBlock:
    stage_blocks: list = field(default_factory=lambda: [1, 1, 1, 1])
    stage_channels: list = field(default_factory=lambda: [8, 16, 32, 64])
    stem_kernel: int = 7
    block_kernel: int = 3


@dataclass
class AttackBlock:
    epsilon: float = 0.001
    iterations: int = 5
    alpha: float | None = 0.08
    label_source: str = "true"
    physical_range: list | None = field(default_factory=lambda: [-6.0, 6.0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    task: str = "binary"
    data: DataConfig = field(default_factory=DataConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    attack: AttackBlock = field(default_factory=AttackBlock)
    unlearn: UnlearnFtConfig = field(default_factory=UnlearnFtConfig)
    gkt: GktConfig = field(default_factory=GktConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)

    # typed views used by the pipeline ---------------------------------------------

    @property
    def n_classes(self) -> int:
        return 2 if self.task == "binary" else 5

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(tuple(m.stage_blocks), tuple(m.stage_channels), m.stem_kernel,
                           m.block_kernel, self.n_classes, self.data.n_leads)

    def attack_config(self) -> AttackConfig:
        a = self.attack
        rng = None if a.physical_range is None else tuple(float(v) for v in a.physical_range)
        return AttackConfig(a.epsilon, a.iterations, a.alpha, a.label_source, rng)

    def unlearn_config(self, seed: int) -> UnlearnConfig:
        u, g = self.unlearn, self.gkt
        return UnlearnConfig(epochs=u.epochs, lr=u.lr, batch_size=u.batch_size, momentum=u.momentum,
                             seed=seed, **{k: getattr(g, k) for k in GKT_KEYS})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        _check(self)


def _check(cfg: ExperimentConfig) -> None:
    def guard(block: str, fn):
        try:
            fn()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{block}: {exc}") from None

    if cfg.task not in ("binary", "superclass"):
        raise ConfigError(f"task: must be binary or superclass, got {cfg.task!r}")
    for name in ("data", "target", "finetune", "gkt", "audit"):
        guard(name, getattr(cfg, name).validate)
    guard("model", lambda: cfg.model_config().validate())
    guard("attack", lambda: cfg.attack_config().validate())
    guard("unlearn", lambda: cfg.unlearn_config(0).validate())
    guard("train", lambda: _hyper_check(cfg.train))
    if cfg.attack.physical_range is not None and len(cfg.attack.physical_range) != 2:
        raise ConfigError("attack.physical_range: expected [low, high]")


def _hyper_check(t: TrainConfig) -> None:
    from ..training import Hyper
    Hyper(t.lr, t.momentum, t.epochs, t.batch_size, 0, None, t.lr_schedule).validate()


# parsing -------------------------------------------------------------------------

def _coerce(value, default, key: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        # YAML reads a bare `true` as a boolean
        return str(value).lower() if isinstance(value, bool) else str(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {value!r}")
        return value
    return value


def _build(cls, raw, prefix: str = ""):
    obj = cls()
    if raw is None:
        return obj
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        key = str(key)
        if key not in fields:
            raise ConfigError(f"unknown key '{prefix}{key}'")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            setattr(obj, key, _build(type(current), value, f"{prefix}{key}."))
        else:
            setattr(obj, key, _coerce(value, current, f"{prefix}{key}"))
    return obj


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw or {})
    cfg.validate()
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Read a YAML config file, apply defaults and validate."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{path}: syntax error at {where}: {problem}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
