"""Settings shared by both unlearning routes."""
from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass
class UnlearnConfig:
    # fine-tune route
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 0
    # gated knowledge transfer
    noise_dim: int = 32
    generator_hidden: int = 64
    generator_channels: int = 16
    generator_scale: float = 3.0
    epsilon_f: float = 0.01
    beta: float = 1.0
    rounds: int = 200
    generator_steps: int = 1
    student_steps: int = 10
    pseudo_batch: int = 32
    generator_lr: float = 1e-3
    student_lr: float = 0.01
    starvation_rounds: int = 5
    epsilon_f_cap: float = 0.5

    def validate(self) -> None:
        for name in ("epochs", "rounds"):
            if getattr(self, name) < 0:
                raise ValueError(f"UnlearnConfig: {name} must be >= 0")
        for name in ("batch_size", "noise_dim", "generator_hidden", "generator_channels",
                     "generator_steps", "student_steps", "pseudo_batch", "starvation_rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"UnlearnConfig: {name} must be positive")
        for name in ("lr", "generator_lr", "student_lr", "generator_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"UnlearnConfig: {name} must be positive")
        if not 0 < self.epsilon_f < 1:
            raise ValueError("UnlearnConfig: epsilon_f must lie in (0, 1)")
        if not self.epsilon_f <= self.epsilon_f_cap < 1:
            raise ValueError("UnlearnConfig: epsilon_f_cap must lie in [epsilon_f, 1)")
        if not self.beta >= 0:
            raise ValueError("UnlearnConfig: beta must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("UnlearnConfig: momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)
