"""Attention pooling over tokenized instance sequences.

A learnable class token is prepended to the projected instance embeddings;
two pre-norm transformer blocks follow, each first adding its own wavelet
positional encoding to the instance tokens (never to the class token). The
final class-token state is the bag embedding. The per-block attention of the
class token over instances is returned alongside for interpretability.

With every wavelet gate at 0 and exact attention the pooling is permutation
invariant over instances; with the gates on it is deliberately not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import autograd as ag
from . import wavelet as wv
from .autograd import Tensor
from .config import WarmupConfig  # noqa: F401  (re-exported: warm-up lives with pooling)

NUM_BLOCKS = 2
FFN_EXPANSION = 4


@dataclass
class BlockState:
    wavelets: wv.WaveletBank
    mhsa: attn.MHSAWeights
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class PoolingState:
    attention: attn.AttentionConfig
    input_dim: int
    class_token: Tensor = None  # (1, d_model), shared template copied per bag
    input_proj: Tensor = None  # (input_dim, d_model)
    blocks: list[BlockState] = field(default_factory=list)

    def parameters(self):
        yield "class_token", self.class_token
        yield "input_proj", self.input_proj
        for i, blk in enumerate(self.blocks):
            for name, p in blk.wavelets.parameters():
                yield f"block{i}.wavelets.{name}", p
            for name, p in blk.mhsa.parameters():
                yield f"block{i}.mhsa.{name}", p
            yield f"block{i}.ffn_w1", blk.ffn_w1
            yield f"block{i}.ffn_b1", blk.ffn_b1
            yield f"block{i}.ffn_w2", blk.ffn_w2
            yield f"block{i}.ffn_b2", blk.ffn_b2
            yield f"block{i}.ln1_gain", blk.ln1_gain
            yield f"block{i}.ln1_bias", blk.ln1_bias
            yield f"block{i}.ln2_gain", blk.ln2_gain
            yield f"block{i}.ln2_bias", blk.ln2_bias


def build_pooling(
    input_dim: int,
    attention_cfg: attn.AttentionConfig,
    seed: int,
    n_wavelets: int = 3,
    wavelet_taps: int = 15,
    wavelet_shared: bool = False,
    wpe_gate: float = 1.0,
    dtype=np.float32,
) -> PoolingState:
    rng = np.random.default_rng(seed)
    d = attention_cfg.d_model
    hidden = FFN_EXPANSION * d
    state = PoolingState(attention=attention_cfg, input_dim=input_dim)
    state.class_token = Tensor(0.02 * rng.standard_normal((1, d)), requires_grad=True, dtype=dtype)
    bound = 1.0 / np.sqrt(input_dim)
    state.input_proj = Tensor(
        rng.uniform(-bound, bound, size=(input_dim, d)), requires_grad=True, dtype=dtype
    )
    for _ in range(NUM_BLOCKS):
        bank = wv.WaveletBank.create(
            d, n_bases=n_wavelets, taps=wavelet_taps, shared=wavelet_shared, gate=wpe_gate, dtype=dtype
        )
        mhsa_w = attn.MHSAWeights.create(attention_cfg, rng, dtype=dtype)
        wb = 1.0 / np.sqrt(d)
        hb = 1.0 / np.sqrt(hidden)
        state.blocks.append(
            BlockState(
                wavelets=bank,
                mhsa=mhsa_w,
                ffn_w1=Tensor(rng.uniform(-wb, wb, size=(d, hidden)), requires_grad=True, dtype=dtype),
                ffn_b1=Tensor(np.zeros((1, hidden), dtype=dtype), requires_grad=True),
                ffn_w2=Tensor(rng.uniform(-hb, hb, size=(hidden, d)), requires_grad=True, dtype=dtype),
                ffn_b2=Tensor(np.zeros((1, d), dtype=dtype), requires_grad=True),
                ln1_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                ln1_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
                ln2_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                ln2_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            )
        )
    return state


@dataclass
class PoolOutput:
    bag_embedding: Tensor  # (1, d_model) class-token state after both blocks
    block_attention: list[np.ndarray]  # per block, probability vector over T instances
    instance_mean: Tensor  # (1, d_model) mean of post-transformer instance tokens


def pool_forward(
    state: PoolingState,
    features: Tensor,
    mode: str | None = None,
    mask: np.ndarray | None = None,
) -> PoolOutput:
    """Aggregate (T, L) instance features into a bag embedding.

    ``mode`` overrides the configured attention mode; ``mask`` marks valid
    instances of padded bags (masked keys are excluded from every softmax).
    """
    if features.ndim != 2 or features.shape[1] != state.input_dim:
        raise ag.DimensionError(
            f"features have shape {features.shape}, pooling expects width {state.input_dim}"
        )
    t = features.shape[0]
    if t < 1:
        raise ag.UsageError("pool_forward needs at least one instance")
    cfg = state.attention
    if mode is not None:
        cfg = attn.AttentionConfig(
            d_model=cfg.d_model,
            num_heads=cfg.num_heads,
            landmarks=cfg.landmarks,
            pinv_iters=cfg.pinv_iters,
            mode=mode,
        )

    tokens = ag.concat([state.class_token, ag.matmul(features, state.input_proj)], axis=0)
    block_attention: list[np.ndarray] = []
    for blk in state.blocks:
        cls_tok = ag.slice_rows(tokens, 0, 1)
        inst = ag.slice_rows(tokens, 1, t + 1)
        inst = ag.add(inst, wv.wpe_forward(blk.wavelets, inst))
        tokens = ag.concat([cls_tok, inst], axis=0)

        normed = ag.layer_norm(tokens, blk.ln1_gain, blk.ln1_bias)
        block_attention.append(attn.class_token_attention(blk.mhsa, normed, mask=mask))
        tokens = ag.add(tokens, attn.mhsa(cfg, blk.mhsa, normed, mask=mask))

        normed2 = ag.layer_norm(tokens, blk.ln2_gain, blk.ln2_bias)
        hidden = ag.gelu(ag.add(ag.matmul(normed2, blk.ffn_w1), blk.ffn_b1))
        tokens = ag.add(tokens, ag.add(ag.matmul(hidden, blk.ffn_w2), blk.ffn_b2))

    instances = ag.slice_rows(tokens, 1, t + 1)
    if mask is not None and not bool(np.all(mask)):
        keep = np.where(mask.astype(bool))[0]
        sel = np.zeros((1, t), dtype=tokens.dtype)
        sel[0, keep] = 1.0 / len(keep)
        inst_mean = ag.matmul(ag.Tensor(sel), instances)
    else:
        inst_mean = ag.reshape(mean_axis_rows(instances), (1, cfg.d_model))
    return PoolOutput(
        bag_embedding=ag.slice_rows(tokens, 0, 1),
        block_attention=block_attention,
        instance_mean=inst_mean,
    )


def mean_axis_rows(x: Tensor) -> Tensor:
    return ag.mean_axis(x, 0)


def warmup_mix(class_emb: Tensor, instance_mean: Tensor, alpha: float, in_warmup: bool) -> Tensor:
    """During warm-up, alpha * instance mean + (1 - alpha) * class embedding;
    afterwards the class embedding passes through untouched."""
    if class_emb.shape != instance_mean.shape:
        raise ag.DimensionError(
            f"width mismatch: {class_emb.shape} vs {instance_mean.shape}"
        )
    if not in_warmup:
        return class_emb
    return ag.add(ag.scale(instance_mean, alpha), ag.scale(class_emb, 1.0 - alpha))
