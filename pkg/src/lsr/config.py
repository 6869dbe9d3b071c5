"""Run configuration: typed sections, strict JSON parsing, content hash.

A run config is a JSON document with sections ``data``, ``codec``,
``prior``, ``scoring``, ``train`` and ``eval``. Every field has a
default, unknown keys are rejected, and the canonical hash of the fully
resolved document versions every artifact the pipeline writes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1


@dataclass
class AugmentConfig:
    """Random training-time perturbations, each behind an independent gate."""

    enabled: bool = True
    gate_prob: float = 0.5
    rotate_deg: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    blur_sigma_max: float = 1.5
    brightness_max: float = 0.1
    contrast_min: float = 0.9
    contrast_max: float = 1.1
    noise_sigma: float = 0.05
    elastic_max_px: float = 3.0
    elastic_field_sigma: float = 4.0

    def validate(self):
        if not 0.0 <= self.gate_prob <= 1.0:
            raise ConfigError("augment.gate_prob must be in [0, 1]")
        if self.scale_min > self.scale_max or self.contrast_min > self.contrast_max:
            raise ConfigError("augment ranges must satisfy min <= max")
        for name in ("blur_sigma_max", "brightness_max", "noise_sigma",
                     "elastic_max_px", "elastic_field_sigma", "rotate_deg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"augment.{name} must be >= 0")


@dataclass
class DataConfig:
    """Synthetic pseudo-volume corpus layout."""

    side: int = 32
    slices_per_volume: int = 16
    train_volumes: int = 64
    val_volumes: int = 8
    val_clean_volumes: int = 2
    anomaly_radius_min: int = 3
    anomaly_radius_max: int = 8
    # One entry per injected anomaly; entries are distributed round-robin
    # over the anomalous validation volumes, signs alternating.
    anomaly_magnitudes: list = field(
        default_factory=lambda: [0.5, 0.5, 1.0, 1.25, 1.5, 1.75, 2.0, 2.0])
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.side < 4:
            raise ConfigError("data.side too small")
        if self.slices_per_volume < 2:
            raise ConfigError("data.slices_per_volume must be >= 2")
        if self.val_clean_volumes > self.val_volumes:
            raise ConfigError("data.val_clean_volumes exceeds data.val_volumes")
        if self.anomaly_radius_min < 0 or self.anomaly_radius_max < self.anomaly_radius_min:
            raise ConfigError("data anomaly radius range invalid")
        if any(m <= 0 for m in self.anomaly_magnitudes):
            raise ConfigError("data.anomaly_magnitudes must be positive")
        self.augment.validate()


@dataclass
class CodecConfig:
    """VQ codec architecture plus the dense-latent baseline head."""

    blocks: int = 2
    res_blocks: int = 2
    channels: int = 64
    codebook_size: int = 32
    embedding_dim: int = 64
    dropout: float = 0.1
    commitment_beta: float = 1.0
    vae_latent_dim: int = 128

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.blocks

    def validate(self):
        if self.blocks < 1 or self.res_blocks < 1:
            raise ConfigError("codec.blocks and codec.res_blocks must be >= 1")
        if self.codebook_size < 2:
            raise ConfigError("codec.codebook_size must be >= 2")
        if self.embedding_dim < 1 or self.channels < 1 or self.vae_latent_dim < 1:
            raise ConfigError("codec channel/embedding dims must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("codec.dropout must be in [0, 1)")
        if self.commitment_beta < 0:
            raise ConfigError("codec.commitment_beta must be >= 0")


@dataclass
class PriorConfig:
    """Causal autoregressive model over latent grids."""

    blocks: int = 2
    res_blocks: int = 2
    channels: int = 64
    dropout: float = 0.1
    sample_temperature: float = 1.0

    def validate(self):
        if self.blocks < 1 or self.res_blocks < 1:
            raise ConfigError("prior.blocks and prior.res_blocks must be >= 1")
        if self.channels < 1:
            raise ConfigError("prior.channels must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("prior.dropout must be in [0, 1)")
        if self.sample_temperature < 0:
            raise ConfigError("prior.sample_temperature must be >= 0")


@dataclass
class ScoringConfig:
    """Thresholds and consolidation parameters for anomaly scores.

    The default thresholds follow the reference operating point
    (lambda_s = 7, lambda_p = 5 nats); they are dataset-specific and the
    calibrate command recomputes them as the 98th/90th percentiles of
    pooled validation per-position NLLs when a validation set is given.
    """

    lambda_s: float = 7.0
    lambda_p: float = 5.0
    restorations: int = 15
    k_temp: float = 100.0
    eps_denom: float = 1e-8

    def validate(self):
        if self.lambda_s < 0 or self.lambda_p < 0:
            raise ConfigError("scoring thresholds must be >= 0")
        if self.restorations < 1:
            raise ConfigError("scoring.restorations must be >= 1")
        if self.k_temp < 0:
            raise ConfigError("scoring.k_temp must be >= 0")
        if self.eps_denom <= 0:
            raise ConfigError("scoring.eps_denom must be > 0")


@dataclass
class TrainConfig:
    """Optimizer settings shared by all three training stages."""

    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    # 3000 steps keeps a full three-stage run within the CPU budget on a
    # single core while still converging at the default corpus scale.
    max_steps: int = 3000
    checkpoint_interval: int = 1000
    log_interval: int = 50

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be > 0")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ConfigError("train Adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("train.adam_eps must be > 0")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ConfigError("train.batch_size and train.max_steps must be >= 1")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ConfigError("train intervals must be >= 1")


@dataclass
class EvalConfig:
    """Evaluation has no tunable knobs; the section exists for symmetry."""

    def validate(self):
        pass


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for section in (self.data, self.codec, self.prior, self.scoring,
                        self.train, self.eval):
            section.validate()
        if self.data.side % self.codec.downsample_factor != 0:
            raise ConfigError(
                f"data.side={self.data.side} is not divisible by the codec "
                f"downsampling factor 2^{self.codec.blocks}="
                f"{self.codec.downsample_factor}")


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = fields[name].type
        target = {"data": DataConfig, "codec": CodecConfig, "prior": PriorConfig,
                  "scoring": ScoringConfig, "train": TrainConfig,
                  "eval": EvalConfig, "augment": AugmentConfig}.get(name)
        if target is not None:
            kwargs[name] = _build(target, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    """Parse and validate a config document; unknown keys are rejected."""
    cfg = _build(RunConfig, raw, "")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonicalized, fully resolved config document."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
