"""Flat run configuration.

Every tunable lives in one dataclass so a config file is a single flat
key/value document. Stage-dependent training defaults are resolved by
:meth:`Config.for_stage`.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    pass


STAGES = ("refiner", "interaction", "interaction_standalone")

# epochs, lr, decay factor, decay period
STAGE_DEFAULTS = {
    "refiner": (100, 1e-3, 1.0, 1),
    "interaction": (20, 1e-3, 0.5, 6),
    "interaction_standalone": (100, 1e-3, 0.6, 16),
}


@dataclass
class Config:
    # windows / grid
    t_h: int = 15
    t_f: int = 25
    target_hz: int = 5
    grid_rows: int = 13
    grid_cols: int = 5
    grid_row_ft: float = 15.0
    brake_ratio: float = 0.8
    left_is_smaller_lane: bool = True
    lane_width: float = 3.7

    # interaction stage
    hidden: int = 32
    embed: int = 32
    heads: int = 4
    context_dim: int = 64
    decoder_hidden: int = 64
    coord_scale: float = 10.0
    encoder_input: str = "displacement"  # position | displacement | both
    lateral_gain: float = 10.0  # input multiplier on the lateral axis
    use_interaction_pooling: bool = True
    use_reweighting: bool = True
    sigma_floor: float = 1e-4
    mse_warmup_epochs: int = 5  # standalone stage: mean-squared-error epochs before the NLL

    # refiner
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 5e-2
    tau: int = 10
    refiner_dim: int = 64
    refiner_heads: int = 4
    chi_dim: int = 64
    step_embed: int = 32
    estimator_hidden: int = 256
    traj_scale: float = 1.0  # meters per refiner unit
    inject_scaled: bool = True  # scale coarse samples by sqrt(abar_tau) before refining
    squared_norm: bool = False

    # training
    stage: str = "interaction_standalone"
    epochs: Optional[int] = None
    lr: Optional[float] = None
    decay: Optional[float] = None
    decay_period: Optional[int] = None
    batch_size: int = 128
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip: float = 10.0
    seed: int = 0
    k: int = 20
    sample_mode: str = "max"
    teacher_forcing: bool = True

    def __post_init__(self) -> None:
        self.stage = self.stage.replace("-", "_")
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.hidden % self.heads:
            raise ConfigError("hidden size must be divisible by the head count")
        if self.refiner_dim % self.refiner_heads:
            raise ConfigError("refiner_dim must be divisible by refiner_heads")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if not 0 <= self.tau <= self.diffusion_steps:
            raise ConfigError("tau must lie in [0, diffusion_steps]")
        if self.batch_size <= 0 or self.k < 1:
            raise ConfigError("batch_size and k must be positive")
        if self.epochs is not None and self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.decay is not None and not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")
        if self.decay_period is not None and self.decay_period <= 0:
            raise ConfigError("decay_period must be positive")
        if self.sample_mode not in ("max", "proportional"):
            raise ConfigError("sample_mode must be 'max' or 'proportional'")
        if self.mse_warmup_epochs < 0:
            raise ConfigError("mse_warmup_epochs must be >= 0")
        if self.lateral_gain <= 0:
            raise ConfigError("lateral_gain must be positive")
        if self.encoder_input not in ("position", "displacement", "both"):
            raise ConfigError("encoder_input must be 'position', 'displacement' or 'both'")

    @property
    def grid_cells(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def center_cell(self) -> int:
        return (self.grid_rows // 2) * self.grid_cols + self.grid_cols // 2

    def for_stage(self, stage: str | None = None) -> "Config":
        """Copy with the stage set and unset schedule fields filled from its defaults."""
        stage = (stage or self.stage).replace("-", "_")
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        epochs, lr, decay, period = STAGE_DEFAULTS[stage]
        return dataclasses.replace(
            self,
            stage=stage,
            epochs=self.epochs if self.epochs is not None else epochs,
            lr=self.lr if self.lr is not None else lr,
            decay=self.decay if self.decay is not None else decay,
            decay_period=self.decay_period if self.decay_period is not None else period,
        )

    def lr_at(self, epoch: int) -> float:
        cfg = self.for_stage()
        return cfg.lr * cfg.decay ** (epoch // cfg.decay_period)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


def load_config(path: str | Path) -> Config:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ConfigError("config must be a flat JSON object")
    return Config.from_dict(data)


def save_config(config: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
