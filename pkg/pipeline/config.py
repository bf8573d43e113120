import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from perception.loss import PerceptionConfig
from reward.advantage import RewardWeights
from reward.objective import PerpoConfig
from trajectory.model import FINAL_ANSWER_MARKER
from utils.errors import EngineError

logger = logging.getLogger(__name__)

MODES = ("omni", "zero")


class ConfigError(EngineError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """
    Toy PeSFT -> PeRPO run configuration.

    Sampling defaults follow the large-scale recipe (16 responses per prompt,
    temperature 1.0, top-p 0.95, clip 1.0, entropy 0.001). The learning rate is
    scaled up for the toy table; 1e-7 is the large-scale value.
    """

    seed: int = 7
    mode: str = "omni"
    n_tasks: int = 8
    grid_size: int = 3
    image_size: int = 96
    image_grid: int = 4
    pesft_steps: int = 50
    perpo_steps: int = 30
    group_size: int = 16
    temperature: float = 1.0
    top_p: float = 0.95
    optimizer: str = "adamw"
    lr: float = 0.2
    warmup_steps: int = 5
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    entropy_coef: float = 0.001
    ppo_epochs: int = 1
    max_new_tokens: int = 96
    eval_samples: int = 4
    context_order: int = 2
    hidden_dim: int = 8
    codebook_k: int = 16
    codebook_d: int = 8
    lambda_pe: float = 1.0
    tau: Optional[float] = None
    final_answer_marker: str = FINAL_ANSWER_MARKER
    perpo: PerpoConfig = field(default_factory=PerpoConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("n_tasks", "grid_size", "image_size", "image_grid", "ppo_epochs",
                     "max_new_tokens", "eval_samples", "context_order", "hidden_dim",
                     "codebook_k", "codebook_d"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pesft_steps", "perpo_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.grad_clip < 0 or self.weight_decay < 0 or self.entropy_coef < 0:
            raise ConfigError("grad_clip, weight_decay and entropy_coef must be non-negative")
        if not self.final_answer_marker.strip():
            raise ConfigError("final_answer_marker must not be blank")
        # also validates lambda_pe and tau
        self.perception

    @property
    def perception(self):
        try:
            return PerceptionConfig(tau=self.tau, lambda_pe=self.lambda_pe)
        except EngineError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self):
        return dataclasses.asdict(self)


def _nested(cls, value, name):
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**value)
    except EngineError as e:
        raise ConfigError(f"{name}: {e}") from e


def config_from_dict(raw):
    """
    Build a TrainConfig from a plain mapping, rejecting unknown keys.

    Args:
        raw: Mapping with TrainConfig fields; 'perpo' and 'reward' are nested mappings

    Returns:
        cfg: Validated TrainConfig
    """
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    values = dict(raw)
    values["perpo"] = _nested(PerpoConfig, raw.get("perpo"), "perpo")
    values["reward"] = _nested(RewardWeights, raw.get("reward"), "reward")
    try:
        return TrainConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_train_config(path, **overrides):
    """
    Load a YAML (or JSON) run configuration.

    Args:
        path: Config file path
        overrides: Top-level keys replacing file values (e.g. seed from the CLI)

    Returns:
        cfg: TrainConfig
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping, got {type(raw).__name__}")
    raw = dict(raw)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = config_from_dict(raw)
    logger.info(f"Loaded config {path} (mode={cfg.mode}, seed={cfg.seed})")
    return cfg


def save_train_config(cfg, output_path):
    directory = os.path.dirname(output_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(output_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, default_flow_style=False, sort_keys=True)
    logger.info(f"Saved config to {output_path}")
