"""Model assembly: fusion strategy + projection heads + temperature.

The encoders are frozen; trainable state is the fusion parameters (for the
transformer strategy), both projection heads, and the temperature. All
trainable tensors live in one flat name->Tensor dict so the optimizer and
the checkpoint container can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .encoders import TextEncoder, tokenize
from .errors import ConfigError, ShapeError
from .fusion import FusionConfig, TemporalFusion, fuse_concat, fuse_subtract, fused_width
from .heads import ProjectionHead, clamp_kappa, contrastive_loss, new_kappa
from .tensor import Tensor

STRATEGIES = ("gff-sub", "gff-concat", "tff")


@dataclass
class ModelConfig:
    strategy: str
    embed_dim: int
    text_dim: int = 0          # defaults to embed_dim
    text_vocab: int = 4096
    encoder_seed: int = 0
    heads: int = 4
    head_dim: int = 0          # 0 -> embed_dim // heads
    stages: int = 3
    ffn_hidden: int = 0        # 0 -> 2 * embed_dim
    dropout: float = 0.1
    proj_hidden: int = 256
    proj_out: int = 128
    clip_style_kappa: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}; "
                              f"choose one of {', '.join(STRATEGIES)}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if self.text_dim == 0:
            self.text_dim = self.embed_dim


class Model:
    """Trainable state plus the forward passes for both modalities."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = dtype
        init_rng = rngmod.stream(seed, "param-init")
        self.fusion = None
        self.params: dict[str, Tensor] = {}
        if config.strategy == "tff":
            fusion_cfg = FusionConfig(
                embed_dim=config.embed_dim, heads=config.heads,
                head_dim=config.head_dim or None, stages=config.stages,
                ffn_hidden=config.ffn_hidden or None, dropout=config.dropout,
                dtype=dtype)
            self.fusion = TemporalFusion(fusion_cfg, init_rng)
            for name, p in self.fusion.params.items():
                self.params[f"fusion.{name}"] = p
            for name, bn in self.fusion.bn.items():
                self.params[f"fusion.{name}.gamma"] = bn.gamma
                self.params[f"fusion.{name}.beta"] = bn.beta
        img_in = fused_width(config.strategy, config.embed_dim)
        self.img_head = ProjectionHead(img_in, init_rng, config.proj_hidden,
                                       config.proj_out, dtype, prefix="img_head")
        self.txt_head = ProjectionHead(config.text_dim, init_rng, config.proj_hidden,
                                       config.proj_out, dtype, prefix="txt_head")
        self.params.update(self.img_head.params)
        self.params.update(self.txt_head.params)
        self.kappa = new_kappa(config.clip_style_kappa, dtype)
        self.params["kappa"] = self.kappa
        self.text_encoder = TextEncoder(config.text_vocab, config.text_dim,
                                        config.encoder_seed)
        self.epoch = 0

    # -- forward --------------------------------------------------------

    def fuse_images(self, cls_t1, cls_t2, emb_t1, emb_t2, train: bool = False,
                    rng=None) -> Tensor:
        """Batch fusion dispatch; class tokens for global strategies, patch
        sequences for the transformer strategy."""
        if self.config.strategy == "gff-sub":
            return fuse_subtract(cls_t1, cls_t2)
        if self.config.strategy == "gff-concat":
            return fuse_concat(cls_t1, cls_t2)
        return self.fusion.fuse_batch(emb_t1, emb_t2, train=train, rng=rng)

    def image_features(self, cls_t1, cls_t2, emb_t1, emb_t2, train: bool = False,
                       rng=None) -> Tensor:
        fused = self.fuse_images(cls_t1, cls_t2, emb_t1, emb_t2, train, rng)
        return self.img_head.project(fused)

    def text_features(self, text_cls) -> Tensor:
        return self.txt_head.project(text_cls)

    def encode_caption(self, caption: str) -> np.ndarray:
        words = tokenize(caption)
        if not words:
            raise ShapeError(f"caption tokenizes to nothing: {caption!r}")
        cls, _tokens = self.text_encoder.encode(words)
        return cls

    def batch_loss(self, cls_t1, cls_t2, emb_t1, emb_t2, text_cls,
                   train: bool = True, rng=None):
        fx = self.image_features(cls_t1, cls_t2, emb_t1, emb_t2, train, rng)
        fy = self.text_features(text_cls)
        return contrastive_loss(fx, fy, self.kappa)

    # -- optimizer support -----------------------------------------------

    def decay_mask(self) -> dict[str, bool]:
        """Weight decay applies everywhere except the temperature and all
        normalization gains/biases."""
        mask = {}
        for name in self.params:
            excluded = (name == "kappa"
                        or (".norm" in name and name.endswith((".gain", ".bias")))
                        or name.endswith((".gamma", ".beta")))
            mask[name] = not excluded
        return mask

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def after_step(self) -> None:
        clamp_kappa(self.kappa)

    # -- state ------------------------------------------------------------

    def bn_counters(self) -> dict[str, int]:
        if self.fusion is None:
            return {}
        return {name: bn.batches_seen for name, bn in self.fusion.bn.items()}

    def running_stats(self) -> dict[str, np.ndarray]:
        if self.fusion is None:
            return {}
        out = {}
        for name, bn in self.fusion.bn.items():
            out[f"fusion.{name}.running_mean"] = bn.running_mean
            out[f"fusion.{name}.running_var"] = bn.running_var
        return out
