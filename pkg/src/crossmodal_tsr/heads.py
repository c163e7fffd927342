"""Projection heads and the bidirectional temperature-scaled contrastive loss."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError
from .fusion import _uniform_init
from .tensor import Tensor

# Logit scale is exp(kappa); kappa starts at the literal published value.
# The alternative initializer ln(1/0.07) matches the widely used convention
# where 0.07 is the divisor temperature itself.
KAPPA_INIT_LITERAL = 0.07
KAPPA_INIT_INVERSE = math.log(1.0 / 0.07)
KAPPA_CLAMP = 5.0


class ProjectionHead:
    """Two-layer feed-forward map into the shared retrieval space."""

    def __init__(self, in_dim: int, rng, hidden: int = 256, out_dim: int = 128,
                 dtype=np.float32, prefix: str = "head"):
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.params = {
            f"{prefix}.w1": _uniform_init(rng, (in_dim, hidden), in_dim, dtype),
            f"{prefix}.b1": _uniform_init(rng, (hidden,), in_dim, dtype),
            f"{prefix}.w2": _uniform_init(rng, (hidden, out_dim), hidden, dtype),
            f"{prefix}.b2": _uniform_init(rng, (out_dim,), hidden, dtype),
        }
        self._prefix = prefix

    def project(self, features) -> Tensor:
        """linear -> ReLU -> linear; accepts [in_dim] or [batch, in_dim]."""
        x = T.as_tensor(features)
        single = x.ndim == 1
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"projection input width {x.shape[-1]} != {self.in_dim}")
        if single:
            x = T.reshape(x, (1, -1))
        p, pre = self.params, self._prefix
        h = T.relu(T.add(T.matmul(x, p[f"{pre}.w1"]), p[f"{pre}.b1"]))
        out = T.add(T.matmul(h, p[f"{pre}.w2"]), p[f"{pre}.b2"])
        return T.reshape(out, (self.out_dim,)) if single else out


def cosine_similarity(a, b) -> float:
    """Plain cosine between two vectors; rejects zero-norm inputs."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"cosine inputs differ in length: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity undefined for zero-norm input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x: Tensor, what: str = "features") -> Tensor:
    """Unit-normalize each row, aborting on zero-norm rows."""
    norms_sq = np.sum(x.data.astype(np.float64) ** 2, axis=-1)
    bad = np.flatnonzero(norms_sq == 0.0)
    if bad.size:
        raise DomainError(f"zero-norm {what} row at index {int(bad[0])}")
    sq = T.sum_axis(T.mul(x, x), axis=-1, keepdims=True)
    return T.mul(x, T.power(sq, -0.5))


def _log_softmax_diagonal_mean(scores: Tensor) -> Tensor:
    """Mean over rows of -log softmax(row)[diagonal], log-sum-exp stabilized."""
    row_max = Tensor(scores.data.max(axis=-1, keepdims=True))
    shifted = T.sub(scores, row_max)
    lse = T.add(T.log(T.sum_axis(T.exp(shifted), axis=-1)),
                Tensor(row_max.data.reshape(-1)))
    return T.mean_all(T.sub(lse, T.diagonal_2d(scores)))


def contrastive_loss(fx: Tensor, fy: Tensor, kappa: Tensor):
    """Bidirectional temperature-scaled cross entropy over a batch.

    ``fx``/``fy`` are [batch, dim] projected features of matched pairs;
    logits are cosine(fx_i, fy_j) * exp(kappa). Returns
    (loss_xy, loss_yx, combined) scalar tensors where the combined loss is
    the average of the two directions.
    """
    if fx.ndim != 2 or fy.ndim != 2 or fx.shape != fy.shape:
        raise ShapeError(f"contrastive_loss needs matching [batch, dim] inputs, "
                         f"got {fx.shape} and {fy.shape}")
    fx_n = normalize_rows(fx, "image-feature")
    fy_n = normalize_rows(fy, "text-feature")
    scale = T.exp(kappa)
    scores = T.mul(T.matmul(fx_n, T.transpose_last2(fy_n)), scale)
    loss_xy = _log_softmax_diagonal_mean(scores)
    loss_yx = _log_softmax_diagonal_mean(T.transpose_last2(scores))
    combined = T.mul(T.add(loss_xy, loss_yx), 0.5)
    return loss_xy, loss_yx, combined


def new_kappa(clip_style: bool = False, dtype=np.float32) -> Tensor:
    init = KAPPA_INIT_INVERSE if clip_style else KAPPA_INIT_LITERAL
    return Tensor(np.asarray(init, dtype=dtype), requires_grad=True)


def clamp_kappa(kappa: Tensor) -> None:
    """Keep the temperature parameter inside [-5, 5] after optimizer steps."""
    kappa.data = np.asarray(np.clip(kappa.data, -KAPPA_CLAMP, KAPPA_CLAMP))
