"""Run configuration: one flat JSON surface covering the training recipe,
backbone, attention, and wavelet encoding, with validated defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .autograd import ConfigurationError


@dataclass
class WarmupConfig:
    alpha: float = 0.99
    warmup_epochs: int = 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")


@dataclass
class RunConfig:
    # optimizer / recipe
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    batch_size: int = 16
    epochs: int = 100
    mask_p_choices: list[float] = field(default_factory=lambda: [0.0, 0.5])
    warmup_alpha: float = 0.99
    warmup_epochs: int = 10
    seed: int = 0
    # backbone
    output_dim: int = 128
    num_blocks: int = 3
    bottleneck_dim: int = 32
    kernel_sizes: list[int] = field(default_factory=lambda: [10, 20, 40])
    use_residual: bool = True
    # attention
    d_model: int = 512
    num_heads: int = 8
    landmarks: int = 256
    pinv_iters: int = 6
    attention_mode: str = "auto"
    # wavelet positional encoding
    n_wavelets: int = 3
    wavelet_taps: int = 15
    wavelet_shared: bool = False
    wpe_gate: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0.0 < self.lookahead_alpha <= 1.0:
            raise ConfigurationError("lookahead_alpha must be in (0, 1]")
        if self.lookahead_k < 1:
            raise ConfigurationError("lookahead_k must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if not all(0.0 <= p <= 1.0 for p in self.mask_p_choices):
            raise ConfigurationError("mask_p_choices must lie in [0, 1]")
        if self.output_dim % 4 != 0:
            raise ConfigurationError(f"output_dim must be divisible by 4, got {self.output_dim}")
        if any(k < 1 for k in self.kernel_sizes):
            raise ConfigurationError("kernel sizes must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )
        if self.landmarks < 1 or self.pinv_iters < 1:
            raise ConfigurationError("landmarks and pinv_iters must be >= 1")
        if self.attention_mode not in ("exact", "nystrom", "auto"):
            raise ConfigurationError(f"unknown attention_mode {self.attention_mode!r}")
        if self.n_wavelets < 1 or self.wavelet_taps < 1 or self.wavelet_taps % 2 == 0:
            raise ConfigurationError("n_wavelets must be >= 1 and wavelet_taps odd")
        if self.wpe_gate not in (0.0, 1.0):
            raise ConfigurationError("wpe_gate is a {0, 1} switch")
        self.warmup = WarmupConfig(alpha=self.warmup_alpha, warmup_epochs=self.warmup_epochs)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigurationError(f"unknown configuration key {key!r}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
