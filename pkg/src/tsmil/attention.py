"""Multi-head self-attention: exact, Nystrom-approximated, and the
class-token attention map used for instance importance.

Row 0 of every input sequence is the class token by convention (the pooling
module enforces it). ``auto`` mode runs exact attention whenever the sequence
fits within the landmark budget and the Nystrom path otherwise, so short
sequences are bit-identical to exact mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MASK_SCORE = -1e9


@dataclass
class AttentionConfig:
    d_model: int = 512
    num_heads: int = 8
    landmarks: int = 256
    pinv_iters: int = 6
    mode: str = "auto"  # exact | nystrom | auto

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ag.ConfigurationError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )
        if self.landmarks < 1 or self.pinv_iters < 1:
            raise ag.ConfigurationError("landmarks and pinv_iters must be >= 1")
        if self.mode not in ("exact", "nystrom", "auto"):
            raise ag.ConfigurationError(f"unknown attention mode {self.mode!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class MHSAWeights:
    """Per-head projection matrices plus the output projection."""

    wq: list[Tensor] = field(default_factory=list)  # each (d_model, head_dim)
    wk: list[Tensor] = field(default_factory=list)
    wv: list[Tensor] = field(default_factory=list)
    wo: Tensor | None = None  # (num_heads * head_dim, d_model)

    @classmethod
    def create(cls, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32) -> "MHSAWeights":
        w = cls()
        std = 0.02
        for _ in range(cfg.num_heads):
            w.wq.append(Tensor(std * rng.standard_normal((cfg.d_model, cfg.head_dim)), requires_grad=True, dtype=dtype))
            w.wk.append(Tensor(std * rng.standard_normal((cfg.d_model, cfg.head_dim)), requires_grad=True, dtype=dtype))
            w.wv.append(Tensor(std * rng.standard_normal((cfg.d_model, cfg.head_dim)), requires_grad=True, dtype=dtype))
        w.wo = Tensor(
            std * rng.standard_normal((cfg.num_heads * cfg.head_dim, cfg.d_model)),
            requires_grad=True,
            dtype=dtype,
        )
        return w

    def parameters(self):
        for h, (q, k, v) in enumerate(zip(self.wq, self.wk, self.wv)):
            yield f"wq{h}", q
            yield f"wk{h}", k
            yield f"wv{h}", v
        yield "wo", self.wo


def _check_width(w: MHSAWeights, x: Tensor) -> None:
    d_model = w.wq[0].shape[0]
    if x.ndim != 2 or x.shape[1] != d_model:
        raise ag.DimensionError(f"input width {x.shape} does not match d_model={d_model}")


def _mask_bias(mask: np.ndarray | None, n: int, dtype) -> np.ndarray | None:
    """Additive key-side bias: MASK_SCORE at padded positions, 0 elsewhere.

    ``mask`` covers the T instance positions; the class token (position 0)
    is always valid.
    """
    if mask is None:
        return None
    full = np.ones(n, dtype=bool)
    full[1:] = mask.astype(bool)
    bias = np.where(full, 0.0, MASK_SCORE).astype(dtype)
    return bias.reshape(1, n)


def exact_mhsa(w: MHSAWeights, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax attention per head, heads concatenated then output-projected."""
    _check_width(w, x)
    n = x.shape[0]
    d_k = w.wq[0].shape[1]
    inv = 1.0 / math.sqrt(d_k)
    bias = _mask_bias(mask, n, x.dtype)
    heads = []
    for wq, wk, wv in zip(w.wq, w.wk, w.wv):
        q = ag.matmul(x, wq)
        k = ag.matmul(x, wk)
        v = ag.matmul(x, wv)
        scores = ag.scale(ag.matmul(q, ag.transpose(k)), inv)
        if bias is not None:
            scores = ag.add(scores, ag.Tensor(bias))
        heads.append(ag.matmul(ag.softmax_last(scores), v))
    return ag.matmul(ag.concat(heads, axis=1), w.wo)


def _segment_mean_matrix(n: int, landmarks: int, dtype) -> np.ndarray:
    """Averaging matrix onto contiguous segments; remainder joins the last one."""
    group = math.ceil(n / landmarks)
    n_land = max(n // group, 1)
    mat = np.zeros((n_land, n), dtype=dtype)
    for i in range(n_land):
        start = i * group
        stop = (i + 1) * group if i < n_land - 1 else n
        mat[i, start:stop] = 1.0 / (stop - start)
    return mat


def iterative_pinv(a: Tensor, iters: int = 6) -> Tensor:
    """Moore-Penrose approximation by the stabilized cubic Newton-Schulz scheme.

    Initialized from A^T / (||A||_1 ||A||_inf); the norm product is treated as
    a constant of the trace (no gradient through it).
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ag.DimensionError(f"iterative_pinv expects a square matrix, got {a.shape}")
    if iters < 1:
        raise ag.ConfigurationError("iters must be >= 1")
    m = a.shape[0]
    norm_1 = float(np.abs(a.data).sum(axis=0).max())
    norm_inf = float(np.abs(a.data).sum(axis=1).max())
    z = ag.scale(ag.transpose(a), 1.0 / (norm_1 * norm_inf))
    eye = ag.Tensor(np.eye(m, dtype=a.dtype))
    for _ in range(iters):
        az = ag.matmul(a, z)
        inner = ag.sub(ag.scale(eye, 7.0), az)
        inner = ag.sub(ag.scale(eye, 15.0), ag.matmul(az, inner))
        inner = ag.sub(ag.scale(eye, 13.0), ag.matmul(az, inner))
        z = ag.scale(ag.matmul(z, inner), 0.25)
    return z


def nystrom_mhsa(
    cfg: AttentionConfig, w: MHSAWeights, x: Tensor, mask: np.ndarray | None = None
) -> Tensor:
    """Landmark-based linear-complexity approximation of exact_mhsa."""
    _check_width(w, x)
    n = x.shape[0]
    d_k = cfg.head_dim
    inv = 1.0 / math.sqrt(d_k)
    bias = _mask_bias(mask, n, x.dtype)
    seg = ag.Tensor(_segment_mean_matrix(n, cfg.landmarks, x.dtype))
    heads = []
    for wq, wk, wv in zip(w.wq, w.wk, w.wv):
        q = ag.matmul(x, wq)
        k = ag.matmul(x, wk)
        v = ag.matmul(x, wv)
        if bias is not None:
            # zero out padded rows so landmark means only see valid tokens
            valid = (bias.reshape(-1) == 0.0).astype(x.dtype).reshape(-1, 1)
            q = ag.mul(q, ag.Tensor(valid))
            k = ag.mul(k, ag.Tensor(valid))
        q_land = ag.matmul(seg, q)
        k_land = ag.matmul(seg, k)
        f_kernel = ag.softmax_last(ag.scale(ag.matmul(q, ag.transpose(k_land)), inv))
        a_kernel = ag.softmax_last(ag.scale(ag.matmul(q_land, ag.transpose(k_land)), inv))
        scores_3 = ag.scale(ag.matmul(q_land, ag.transpose(k)), inv)
        if bias is not None:
            scores_3 = ag.add(scores_3, ag.Tensor(bias))
        b_kernel = ag.softmax_last(scores_3)
        out = ag.matmul(
            ag.matmul(f_kernel, iterative_pinv(a_kernel, cfg.pinv_iters)),
            ag.matmul(b_kernel, v),
        )
        heads.append(out)
    return ag.matmul(ag.concat(heads, axis=1), w.wo)


def mhsa(
    cfg: AttentionConfig, w: MHSAWeights, x: Tensor, mask: np.ndarray | None = None
) -> Tensor:
    """Dispatch on cfg.mode; auto runs exact whenever the sequence fits."""
    if cfg.mode == "exact" or (cfg.mode == "auto" and x.shape[0] <= cfg.landmarks):
        return exact_mhsa(w, x, mask)
    return nystrom_mhsa(cfg, w, x, mask)


def class_token_attention(
    w: MHSAWeights, x: Tensor, mask: np.ndarray | None = None
) -> np.ndarray:
    """Importance weights of the T instances as seen by the class token.

    Softmax of the class-token query against instance keys only (the token's
    self-entry is excluded before normalization), averaged over heads.
    Returns a detached probability vector of length T.
    """
    _check_width(w, x)
    n = x.shape[0]
    if n < 2:
        raise ag.UsageError("class_token_attention needs at least one instance")
    d_k = w.wq[0].shape[1]
    inv = 1.0 / math.sqrt(d_k)
    cls_row = x.data[0:1]
    inst = x.data[1:]
    acc = np.zeros(n - 1, dtype=np.float64)
    for wq, wk in zip(w.wq, w.wk):
        q = cls_row @ wq.data
        k = inst @ wk.data
        scores = (q @ k.T).reshape(-1).astype(np.float64) * inv
        if mask is not None:
            scores = np.where(mask.astype(bool), scores, MASK_SCORE)
        scores -= scores.max()
        e = np.exp(scores)
        acc += e / e.sum()
    out = acc / len(w.wq)
    return out.astype(x.dtype)
