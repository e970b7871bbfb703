"""Convolutional feature extractor mapping a (T, d) bag to (T, L) embeddings.

Inception-style blocks: a 1x1 bottleneck feeding three parallel same-padded
convolutions at staggered kernel widths, plus a maxpool branch, concatenated
to L channels. Normalization is a per-time-step layer norm over channels so
results never depend on batch statistics; a projected residual shortcut is
added every third block. Even kernel widths are nudged to the next odd
integer to keep same-padding exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Bag

BRANCHES = 4
RESIDUAL_EVERY = 3


@dataclass
class BackboneConfig:
    input_channels: int
    output_dim: int = 128
    num_blocks: int = 3
    bottleneck_dim: int = 32
    kernel_sizes: tuple[int, ...] = (10, 20, 40)
    use_residual: bool = True

    def __post_init__(self):
        if self.output_dim % BRANCHES != 0:
            raise ag.ConfigurationError(
                f"output_dim must be divisible by {BRANCHES}, got {self.output_dim}"
            )
        if self.input_channels < 1 or self.num_blocks < 1 or self.bottleneck_dim < 1:
            raise ag.ConfigurationError("input_channels, num_blocks, bottleneck_dim must be >= 1")
        if any(k < 1 for k in self.kernel_sizes) or len(self.kernel_sizes) != BRANCHES - 1:
            raise ag.ConfigurationError(
                f"expected {BRANCHES - 1} kernel sizes >= 1, got {self.kernel_sizes}"
            )

    @property
    def branch_dim(self) -> int:
        return self.output_dim // BRANCHES

    @property
    def odd_kernels(self) -> tuple[int, ...]:
        return tuple(k if k % 2 == 1 else k + 1 for k in self.kernel_sizes)


@dataclass
class BlockWeights:
    bottleneck: Tensor  # (bottleneck_dim, c_in)
    convs: list[Tensor]  # each (branch_dim, bottleneck_dim, k)
    pool_proj: Tensor  # (branch_dim, c_in)
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class BackboneWeights:
    config: BackboneConfig
    blocks: list[BlockWeights] = field(default_factory=list)
    residual_projs: dict[int, Tensor] = field(default_factory=dict)  # block index -> (L, c_in)

    def parameters(self):
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.bottleneck", blk.bottleneck
            for j, conv in enumerate(blk.convs):
                yield f"block{i}.conv{j}", conv
            yield f"block{i}.pool_proj", blk.pool_proj
            yield f"block{i}.ln_gain", blk.ln_gain
            yield f"block{i}.ln_bias", blk.ln_bias
        for i in sorted(self.residual_projs):
            yield f"residual{i}.proj", self.residual_projs[i]

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.parameters())


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def build_backbone(cfg: BackboneConfig, seed: int, dtype=np.float32) -> BackboneWeights:
    rng = np.random.default_rng(seed)
    weights = BackboneWeights(config=cfg)
    c_in = cfg.input_channels
    stage_in = c_in
    for i in range(cfg.num_blocks):
        nb, bd = cfg.bottleneck_dim, cfg.branch_dim
        blk = BlockWeights(
            bottleneck=_fan_in_uniform(rng, (nb, c_in), c_in, dtype),
            convs=[
                _fan_in_uniform(rng, (bd, nb, k), nb * k, dtype) for k in cfg.odd_kernels
            ],
            pool_proj=_fan_in_uniform(rng, (bd, c_in), c_in, dtype),
            ln_gain=Tensor(np.ones(cfg.output_dim, dtype=dtype), requires_grad=True),
            ln_bias=Tensor(np.zeros(cfg.output_dim, dtype=dtype), requires_grad=True),
        )
        weights.blocks.append(blk)
        if cfg.use_residual and (i + 1) % RESIDUAL_EVERY == 0:
            if stage_in != cfg.output_dim:
                weights.residual_projs[i] = _fan_in_uniform(
                    rng, (cfg.output_dim, stage_in), stage_in, dtype
                )
            stage_in = cfg.output_dim
        c_in = cfg.output_dim
    return weights


def _channel_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    # x is (channels, T); normalize each time step across channels
    return ag.transpose(ag.layer_norm(ag.transpose(x), gain, bias))


def features_from_values(w: BackboneWeights, values: np.ndarray) -> Tensor:
    """Run the extractor on a raw (T, d) array; returns a (T, L) tensor."""
    cfg = w.config
    if values.ndim != 2 or values.shape[1] != cfg.input_channels:
        raise ag.DimensionError(
            f"bag has shape {values.shape}, backbone expects {cfg.input_channels} channels"
        )
    dtype = w.blocks[0].bottleneck.dtype
    x = ag.transpose(ag.Tensor(np.asarray(values, dtype=dtype)))  # (d, T)
    shortcut = x
    for i, blk in enumerate(w.blocks):
        z = ag.matmul(blk.bottleneck, x)
        branches = [ag.conv1d(z, conv) for conv in blk.convs]
        branches.append(ag.matmul(blk.pool_proj, ag.maxpool1d_same(x, 3)))
        out = _channel_norm(ag.concat(branches, axis=0), blk.ln_gain, blk.ln_bias)
        if cfg.use_residual and (i + 1) % RESIDUAL_EVERY == 0:
            proj = w.residual_projs.get(i)
            res = ag.matmul(proj, shortcut) if proj is not None else shortcut
            out = ag.add(out, res)
            x = ag.relu(out)
            shortcut = x
        else:
            x = ag.relu(out)
    return ag.transpose(x)


def extract_features(w: BackboneWeights, bag: Bag) -> Tensor:
    """Instance embeddings for one bag; output always has bag.length rows."""
    return features_from_values(w, bag.values)
