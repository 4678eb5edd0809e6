"""Training configuration with JSON round-tripping and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

REWARD_MODES = ("adaptive", "zero_one", "relation_only", "entity_only")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class TrainConfig:
    # reasoning
    L: int = 3
    beam_width: int = 32
    max_actions: int = 200
    # representation sizes; d_x and j default to d when 0
    d: int = 200
    d_s: int = 200
    d_x: int = 0
    j: int = 0
    d_i: int = 4096
    d_t: int = 1000
    tair_layers: int = 3
    neighbor_state: bool = False
    # action augmentation
    x: int = 3
    cap_per_relation: int = 10
    rule_max_len: int = 3
    rule_min_support: int = 2
    rule_min_conf: float = 0.1
    # demonstrations and discriminator
    N: int = 5
    alpha: float = 0.4
    lam: float = 10.0
    conv_channels: int = 8
    critic_steps: int = 5
    # optimisation
    optimizer: str = "sgd"
    lr: float = 0.1
    critic_lr: float = 1e-3
    grad_clip: float = 5.0
    baseline_decay: float = 0.95
    batch_size: int = 64
    rollouts: int = 5
    epochs: int = 50
    seed: int = 0
    eval_every: int = 1
    # feature synthesis when no feature file is given
    feature_seed: int = 0
    # switches
    tair_on: bool = True
    ugan_on: bool = True
    augmentation_on: bool = True
    reward_mode: str = "adaptive"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def dx(self) -> int:
        return self.d_x or self.d + (self.d % 2)

    @property
    def jj(self) -> int:
        return self.j or self.d

    def validate(self) -> None:
        for key in ("L", "d", "d_s", "d_i", "d_t", "tair_layers", "x", "N", "beam_width", "batch_size", "rollouts", "epochs", "max_actions", "cap_per_relation", "rule_max_len", "conv_channels"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.d_x and self.d_x % 2:
            raise ConfigError("d_x", "must be even")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", "must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lam", "must be >= 0")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError("reward_mode", f"must be one of {REWARD_MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer", "must be 'sgd' or 'adam'")
        if self.critic_steps < 0:
            raise ConfigError("critic_steps", "must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("<config>", str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path} is not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError("<file>", f"{path} must hold a JSON object")
        return cls.from_dict(data)

    def replace(self, **overrides) -> "TrainConfig":
        data = self.to_json()
        data.update(overrides)
        return TrainConfig.from_dict(data)


def desk_config(**overrides) -> TrainConfig:
    """Small dimensions for CPU-scale experiments on synthetic graphs."""
    base = dict(d=8, d_s=8, d_i=8, d_t=8, beam_width=16, batch_size=64, epochs=200,
                optimizer="adam", lr=0.01)
    base.update(overrides)
    return TrainConfig(**base)
