"""Full classifier: backbone -> attention pooling -> two-layer head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import backbone as bb
from . import data as dio
from . import pooling as pl
from .attention import AttentionConfig
from .autograd import Tensor
from .config import RunConfig


@dataclass
class ClassifierWeights:
    """Two affine layers d_model -> d_model -> C with a relu between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, d_model: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(d_model)
        return cls(
            w1=Tensor(rng.uniform(-bound, bound, size=(d_model, d_model)), requires_grad=True, dtype=dtype),
            b1=Tensor(np.zeros((1, d_model), dtype=dtype), requires_grad=True),
            w2=Tensor(rng.uniform(-bound, bound, size=(d_model, num_classes)), requires_grad=True, dtype=dtype),
            b2=Tensor(np.zeros((1, num_classes), dtype=dtype), requires_grad=True),
        )

    def parameters(self):
        yield "w1", self.w1
        yield "b1", self.b1
        yield "w2", self.w2
        yield "b2", self.b2

    def forward(self, x: Tensor) -> Tensor:
        h = ag.relu(ag.add(ag.matmul(x, self.w1), self.b1))
        return ag.add(ag.matmul(h, self.w2), self.b2)


@dataclass
class Model:
    config: RunConfig
    input_channels: int
    num_classes: int
    backbone: bb.BackboneWeights
    pooling: pl.PoolingState
    classifier: ClassifierWeights

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, p in self.backbone.parameters():
            params[f"backbone.{name}"] = p
        for name, p in self.pooling.parameters():
            params[f"pooling.{name}"] = p
        for name, p in self.classifier.parameters():
            params[f"classifier.{name}"] = p
        return params

    def zero_grads(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())


def build_model(cfg: RunConfig, input_channels: int, num_classes: int, dtype=np.float32) -> Model:
    """Deterministic construction from the run seed."""
    backbone_cfg = bb.BackboneConfig(
        input_channels=input_channels,
        output_dim=cfg.output_dim,
        num_blocks=cfg.num_blocks,
        bottleneck_dim=cfg.bottleneck_dim,
        kernel_sizes=tuple(cfg.kernel_sizes),
        use_residual=cfg.use_residual,
    )
    attention_cfg = AttentionConfig(
        d_model=cfg.d_model,
        num_heads=cfg.num_heads,
        landmarks=cfg.landmarks,
        pinv_iters=cfg.pinv_iters,
        mode=cfg.attention_mode,
    )
    backbone_w = bb.build_backbone(backbone_cfg, seed=cfg.seed, dtype=dtype)
    pooling_s = pl.build_pooling(
        input_dim=cfg.output_dim,
        attention_cfg=attention_cfg,
        seed=cfg.seed + 1,
        n_wavelets=cfg.n_wavelets,
        wavelet_taps=cfg.wavelet_taps,
        wavelet_shared=cfg.wavelet_shared,
        wpe_gate=cfg.wpe_gate,
        dtype=dtype,
    )
    classifier = ClassifierWeights.create(
        cfg.d_model, num_classes, np.random.default_rng(cfg.seed + 2), dtype=dtype
    )
    return Model(
        config=cfg,
        input_channels=input_channels,
        num_classes=num_classes,
        backbone=backbone_w,
        pooling=pooling_s,
        classifier=classifier,
    )


@dataclass
class ForwardResult:
    logits: Tensor  # (1, C)
    pool: pl.PoolOutput


def forward_bag(
    model: Model,
    values: np.ndarray,
    mask: np.ndarray | None = None,
    mode: str | None = None,
    in_warmup: bool = False,
) -> ForwardResult:
    features = bb.features_from_values(model.backbone, values)
    pool = pl.pool_forward(model.pooling, features, mode=mode, mask=mask)
    head_in = pl.warmup_mix(
        pool.bag_embedding, pool.instance_mean, model.config.warmup.alpha, in_warmup
    )
    return ForwardResult(logits=model.classifier.forward(head_in), pool=pool)


def save_checkpoint(model: Model, out_dir) -> None:
    dio.save_params(
        model.parameters(),
        out_dir,
        extra={
            "config": model.config.to_dict(),
            "input_channels": model.input_channels,
            "num_classes": model.num_classes,
        },
    )


def load_checkpoint(in_dir) -> Model:
    manifest, arrays = dio.load_params(in_dir)
    cfg = RunConfig.from_dict(manifest["config"])
    model = build_model(cfg, manifest["input_channels"], manifest["num_classes"])
    params = model.parameters()
    if set(params) != set(arrays):
        missing = set(params) ^ set(arrays)
        raise dio.IntegrityError(f"parameter registry mismatch: {sorted(missing)[:5]}")
    for name, tensor in params.items():
        if tuple(tensor.data.shape) != tuple(arrays[name].shape):
            raise dio.IntegrityError(
                f"{name}: shape {arrays[name].shape} != expected {tensor.data.shape}"
            )
        tensor.data = arrays[name].astype(tensor.data.dtype)
    return model
