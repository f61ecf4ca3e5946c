"""Experiment configuration shared by the library and the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

# Fields that change parameter shapes or forward semantics; a checkpoint is
# only loadable under a config that agrees on all of them.
ARCH_FIELDS = (
    "d",
    "L",
    "P",
    "image_size",
    "channels",
    "vocab",
    "heads",
    "acca_heads",
    "fuse_heads",
    "joint_heads",
    "N_experts",
    "K_experts",
    "num_classes",
    "activation",
    "use_reference",
)


@dataclass
class ExperimentConfig:
    seed: int = 0
    # model shape
    d: int = 64
    L: int = 16
    P: int = 16
    image_size: int = 16
    channels: int = 3
    vocab: int = 256
    heads: int = 4
    acca_heads: int = 1
    fuse_heads: int = 4
    joint_heads: int = 4  # closing self-attention over fused rows; 0 disables
    N_experts: int = 4
    K_experts: int = 2
    num_classes: int = 4
    activation: str = "gelu"
    use_reference: bool = True
    # retrieval
    K_retrieval: int = 4
    skip_top: int = 0
    index_kind: str = "flat"
    num_partitions: int = 8
    probes: int = 2
    # objective
    alpha: float = 0.25
    beta: float = 1.0
    tau: float = 2.0
    temperature_vrc: float = 0.07
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    w_pos: float = 3.0
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_schedule: str = "cosine"  # or "cosine": decays to 0 over `epochs`
    momentum: float = 0.9
    grad_clip: float = 5.0  # global L2 norm; 0 disables
    weight_decay: float = 0.1  # decoupled, weight matrices only
    epochs: int = 30
    batch_size: int = 8
    # synthetic data
    n_train: int = 2000
    n_test: int = 500
    manipulation_rate: float = 0.5
    mixed: bool = False
    domain: str = "A"
    # paths
    paths: dict = field(
        default_factory=lambda: {"dataset": "data", "gallery": "", "checkpoint": "model.rvck", "report": "report"}
    )

    def validate(self) -> "ExperimentConfig":
        positive = (
            "d", "L", "P", "image_size", "channels", "vocab", "heads", "acca_heads", "fuse_heads",
            "N_experts", "K_experts", "num_classes", "K_retrieval", "num_partitions", "probes",
            "tau", "temperature_vrc", "lr", "batch_size", "n_train", "n_test",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "beta", "lambda_l1", "lambda_giou", "w_pos", "momentum", "grad_clip", "weight_decay", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.skip_top < self.K_retrieval:
            raise ConfigError(f"skip_top must lie in [0, K_retrieval={self.K_retrieval}), got {self.skip_top}")
        if self.K_experts > self.N_experts:
            raise ConfigError("K_experts cannot exceed N_experts")
        if self.N_experts < 2:
            raise ConfigError("each expert pool needs at least 2 experts")
        if self.joint_heads < 0:
            raise ConfigError("joint_heads must be non-negative")
        for h in (self.heads, self.acca_heads, self.fuse_heads, self.joint_heads or 1):
            if self.d % h:
                raise ConfigError(f"d={self.d} is not divisible by head count {h}")
        if self.d % 4:
            raise ConfigError("d must be divisible by 4 (task embedding width d/4)")
        side = int(round(self.P**0.5))
        if side * side != self.P or self.image_size % side:
            raise ConfigError(f"P={self.P} must be a square grid dividing image_size={self.image_size}")
        if self.activation not in ("gelu", "relu", "linear"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.index_kind not in ("flat", "partitioned"):
            raise ConfigError(f"unknown index kind {self.index_kind!r}")
        if not 0.0 <= self.manipulation_rate <= 1.0:
            raise ConfigError("manipulation_rate must lie in [0, 1]")
        return self

    @property
    def patch_size(self) -> int:
        return self.image_size // int(round(self.P**0.5))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def arch_hash(self) -> str:
        arch = {k: getattr(self, k) for k in ARCH_FIELDS}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in data.items() if k != "paths"})
        if "paths" in data:
            cfg.paths = {**cfg.paths, **data["paths"]}
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)
