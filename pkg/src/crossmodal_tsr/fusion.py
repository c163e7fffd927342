"""Bitemporal feature fusion strategies.

Three strategies turn a pair of co-registered feature sequences into one
vector:

* subtraction of the two class-token vectors (global fusion),
* concatenation of the two class-token vectors, later-time half first,
* transformer fusion: the patch-difference sequence drives multi-head
  cross-attention into both time streams, the updated streams are
  concatenated and refined through stacked residual conv stages, and the
  token axis is mean-pooled at the end.

All operations accept a leading batch axis. Train-mode behaviour
(dropout, batch-norm statistics) is controlled by the ``train`` flag plus
an explicit random generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import BatchNormState, Tensor


# ---------------------------------------------------------------------
# global (class-token) fusion
# ---------------------------------------------------------------------

def fuse_subtract(cls_t1, cls_t2) -> Tensor:
    """Elementwise later-minus-earlier difference of class tokens."""
    cls_t1, cls_t2 = T.as_tensor(cls_t1), T.as_tensor(cls_t2)
    if cls_t1.shape != cls_t2.shape:
        raise ShapeError(f"class-token extents differ: {cls_t1.shape} vs {cls_t2.shape}")
    return T.sub(cls_t2, cls_t1)


def fuse_concat(cls_t1, cls_t2) -> Tensor:
    """Concatenation [t2-token || t1-token], later time first."""
    cls_t1, cls_t2 = T.as_tensor(cls_t1), T.as_tensor(cls_t2)
    if cls_t1.shape != cls_t2.shape:
        raise ShapeError(f"class-token extents differ: {cls_t1.shape} vs {cls_t2.shape}")
    return T.concat_last_axis([cls_t2, cls_t1])


# ---------------------------------------------------------------------
# transformer fusion
# ---------------------------------------------------------------------

def difference_embedding(p_t1, p_t2) -> Tensor:
    """Per-token later-minus-earlier difference of patch sequences."""
    p_t1, p_t2 = T.as_tensor(p_t1), T.as_tensor(p_t2)
    if p_t1.shape != p_t2.shape:
        raise ShapeError(f"patch sequences differ in shape: {p_t1.shape} vs {p_t2.shape}")
    return T.sub(p_t2, p_t1)


def cross_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over trailing [tokens, d] axes."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"key/value token extents differ: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.mul(T.matmul(q, T.transpose_last2(k)), scale)
    return T.matmul(T.softmax_rows(scores), v)


@dataclass
class FusionConfig:
    embed_dim: int
    heads: int = 4
    head_dim: int | None = None
    stages: int = 3
    ffn_hidden: int | None = None
    dropout: float = 0.1
    kernel: int = 3
    dtype: type = np.float32

    def __post_init__(self):
        if self.heads < 1 or self.stages < 1:
            raise ConfigError("heads and stages must be >= 1")
        if self.head_dim is None:
            if self.embed_dim % self.heads:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} not divisible by heads {self.heads}; "
                    "set head_dim explicitly"
                )
            self.head_dim = self.embed_dim // self.heads
        if self.head_dim < 1:
            raise ConfigError("head_dim must be >= 1")
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.embed_dim
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def fused_dim(self) -> int:
        return 2 * self.embed_dim


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class TemporalFusion:
    """Parameters and forward pass of the transformer fusion strategy."""

    def __init__(self, config: FusionConfig, rng):
        self.config = config
        c = config
        d_e, d_h, width = c.embed_dim, c.head_dim, c.fused_dim
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        p = self.params
        for k in range(c.heads):
            p[f"attn.head{k}.wq"] = _uniform_init(rng, (d_e, d_h), d_e, c.dtype)
            p[f"attn.head{k}.wk"] = _uniform_init(rng, (d_e, d_h), d_e, c.dtype)
            p[f"attn.head{k}.wv"] = _uniform_init(rng, (d_e, d_h), d_e, c.dtype)
        p["attn.wo"] = _uniform_init(rng, (c.heads * d_h, d_e), c.heads * d_h, c.dtype)
        p["norm_attn.gain"] = Tensor(np.ones(d_e, c.dtype), requires_grad=True)
        p["norm_attn.bias"] = Tensor(np.zeros(d_e, c.dtype), requires_grad=True)
        p["ffn.w1"] = _uniform_init(rng, (d_e, c.ffn_hidden), d_e, c.dtype)
        p["ffn.b1"] = _uniform_init(rng, (c.ffn_hidden,), d_e, c.dtype)
        p["ffn.w2"] = _uniform_init(rng, (c.ffn_hidden, d_e), c.ffn_hidden, c.dtype)
        p["ffn.b2"] = _uniform_init(rng, (d_e,), c.ffn_hidden, c.dtype)
        p["norm_ffn.gain"] = Tensor(np.ones(d_e, c.dtype), requires_grad=True)
        p["norm_ffn.bias"] = Tensor(np.zeros(d_e, c.dtype), requires_grad=True)
        conv_fan = width * c.kernel
        for j in range(c.stages):
            for i in range(3):
                p[f"stage{j}.conv{i}.w"] = _uniform_init(
                    rng, (width, width, c.kernel), conv_fan, c.dtype)
                p[f"stage{j}.conv{i}.b"] = _uniform_init(rng, (width,), conv_fan, c.dtype)
                self.bn[f"stage{j}.bn{i}"] = BatchNormState(width, dtype=c.dtype)
            p[f"stage{j}.norm.gain"] = Tensor(np.ones(width, c.dtype), requires_grad=True)
            p[f"stage{j}.norm.bias"] = Tensor(np.zeros(width, c.dtype), requires_grad=True)

    # -- forward pieces -------------------------------------------------

    def multi_head(self, stream: Tensor, s: Tensor) -> Tensor:
        """Per-head cross-attention of the stream into the difference, then
        concat and output projection back to the stream width."""
        c = self.config
        wo = self.params["attn.wo"]
        if wo.shape != (c.heads * c.head_dim, c.embed_dim):
            raise ConfigError(
                f"output projection shape {wo.shape} != "
                f"({c.heads * c.head_dim}, {c.embed_dim})"
            )
        heads = []
        for k in range(c.heads):
            q = T.matmul(stream, self.params[f"attn.head{k}.wq"])
            key = T.matmul(s, self.params[f"attn.head{k}.wk"])
            val = T.matmul(s, self.params[f"attn.head{k}.wv"])
            heads.append(cross_attention(q, key, val))
        return T.matmul(T.concat_last_axis(heads), wo)

    def stream_update(self, stream: Tensor, s: Tensor) -> Tensor:
        """Residual attention + residual feed-forward, each layer-normed.

        Applied with one shared parameter set to both time streams.
        """
        p = self.params
        attended = T.layer_norm(T.add(stream, self.multi_head(stream, s)),
                                p["norm_attn.gain"], p["norm_attn.bias"])
        hidden = T.relu(T.add(T.matmul(attended, p["ffn.w1"]), p["ffn.b1"]))
        ffn_out = T.add(T.matmul(hidden, p["ffn.w2"]), p["ffn.b2"])
        return T.layer_norm(T.add(attended, ffn_out),
                            p["norm_ffn.gain"], p["norm_ffn.bias"])

    def _conv_block(self, x: Tensor, stage: int, train: bool, rng) -> Tensor:
        """Three conv layers over the token axis, each batch-normed and
        dropped out; ReLU between layers, none after the last."""
        c = self.config
        out = x
        for i in range(3):
            out = T.conv1d_tokens(out, self.params[f"stage{stage}.conv{i}.w"],
                                  self.params[f"stage{stage}.conv{i}.b"])
            out = T.batch_norm_1d(out, self.bn[f"stage{stage}.bn{i}"], train)
            if i < 2:
                out = T.relu(out)
            out = T.dropout(out, c.dropout, rng=rng, train=train)
        return out

    def fusion_stage(self, f1: Tensor, f2: Tensor, prev: Tensor, stage: int,
                     train: bool, rng=None) -> Tensor:
        """One refinement stage over [batch, tokens, 2*embed_dim]."""
        combined = T.concat_last_axis([f1, f2])
        if prev.shape != combined.shape:
            raise ShapeError(f"stage input shape {prev.shape} != {combined.shape}")
        u = T.add(combined, prev)
        residual = self._conv_block(T.transpose_last2(u), stage, train, rng)
        out = T.add(u, T.transpose_last2(residual))
        return T.layer_norm(out, self.params[f"stage{stage}.norm.gain"],
                            self.params[f"stage{stage}.norm.bias"])

    def fuse_batch(self, emb_t1, emb_t2, train: bool = False, rng=None) -> Tensor:
        """[batch, T, embed_dim] pair of sequences -> [batch, 2*embed_dim]."""
        emb_t1, emb_t2 = T.as_tensor(emb_t1), T.as_tensor(emb_t2)
        if emb_t1.ndim != 3:
            raise ShapeError(f"fuse_batch expects [batch, tokens, dim], got {emb_t1.shape}")
        s = difference_embedding(emb_t1, emb_t2)
        f1 = self.stream_update(emb_t1, s)
        f2 = self.stream_update(emb_t2, s)
        batch, tokens, _ = emb_t1.shape
        prev = Tensor(np.zeros((batch, tokens, self.config.fused_dim),
                               dtype=emb_t1.dtype))
        for j in range(self.config.stages):
            prev = self.fusion_stage(f1, f2, prev, j, train, rng)
        return T.mean_pool_tokens(prev)

    def fuse_single(self, emb_t1, emb_t2, train: bool = False, rng=None) -> Tensor:
        """[T, embed_dim] pair -> [2*embed_dim] fused vector."""
        emb_t1, emb_t2 = T.as_tensor(emb_t1), T.as_tensor(emb_t2)
        out = self.fuse_batch(T.reshape(emb_t1, (1,) + emb_t1.shape),
                              T.reshape(emb_t2, (1,) + emb_t2.shape), train, rng)
        return T.reshape(out, (out.shape[-1],))


def fused_width(strategy: str, embed_dim: int) -> int:
    """Feature width produced by a fusion strategy for a given stream width."""
    if strategy == "gff-sub":
        return embed_dim
    if strategy in ("gff-concat", "tff"):
        return 2 * embed_dim
    raise ConfigError(f"unknown fusion strategy {strategy!r}; "
                      "choose one of gff-sub, gff-concat, tff")
