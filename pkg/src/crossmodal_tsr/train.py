"""Mini-batch contrastive training with validation-driven model selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .checkpoint import save_checkpoint
from .dataset import DatasetManifest, load_samples
from .errors import ConfigError, NonFiniteError, ShapeError, StateError
from .model import Model, ModelConfig
from .optim import SgdMomentum
from .tensor import Tape, Tensor, backward


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 30
    seed: int = 0
    strategy: str = "tff"
    clip_style_kappa: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (contrastive loss is vacuous at 1)")
        if self.lr <= 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("lr must be positive; weight_decay/momentum non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


class FeatureCache:
    """Frozen-encoder features for a manifest, stacked for batch math.

    Image features come from the stored embedding files; text features are
    the toy text encoder's class tokens for each of the five captions.
    """

    def __init__(self, model: Model, manifest: DatasetManifest):
        samples = load_samples(manifest)
        self.ids = [e.id for e in manifest.entries]
        self.captions = {e.id: e.captions for e in manifest.entries}
        self.change = np.array([e.change for e in manifest.entries], dtype=bool)
        shapes = {samples[i].emb_t1.shape for i in self.ids}
        if len(shapes) > 1:
            raise ShapeError(f"embedding shapes differ across the dataset: {sorted(shapes)}")
        t, d = next(iter(shapes))
        if d != model.config.embed_dim:
            raise ConfigError(
                f"dataset embedding width {d} != model embed_dim {model.config.embed_dim}")
        n = len(self.ids)
        self.emb_t1 = np.stack([samples[i].emb_t1 for i in self.ids])
        self.emb_t2 = np.stack([samples[i].emb_t2 for i in self.ids])
        self.cls_t1 = np.stack([samples[i].cls_t1 for i in self.ids])
        self.cls_t2 = np.stack([samples[i].cls_t2 for i in self.ids])
        self.text_cls = np.zeros((n, 5, model.config.text_dim), dtype=np.float32)
        for row, pid in enumerate(self.ids):
            for j, caption in enumerate(self.captions[pid]):
                self.text_cls[row, j] = model.encode_caption(caption)

    def __len__(self):
        return len(self.ids)


def expand_examples(cache: FeatureCache) -> list[tuple[int, int]]:
    """One (pair, caption) example per caption occurrence."""
    return [(i, j) for i in range(len(cache)) for j in range(5)]


def make_batches(examples, batch_size: int, seed: int, epoch: int):
    """Epoch-seeded shuffle into fixed-size batches.

    A trailing batch of one example is dropped: the contrastive loss over a
    single pair is identically zero and would only inject decay noise.
    """
    if not examples:
        raise ConfigError("cannot batch an empty example list")
    order = rngmod.stream(seed, "batch-shuffle", epoch).permutation(len(examples))
    shuffled = [examples[i] for i in order]
    batches = [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def _batch_tensors(cache: FeatureCache, batch):
    rows = np.array([i for i, _ in batch])
    caps = np.array([j for _, j in batch])
    return (Tensor(cache.cls_t1[rows]), Tensor(cache.cls_t2[rows]),
            Tensor(cache.emb_t1[rows]), Tensor(cache.emb_t2[rows]),
            Tensor(cache.text_cls[rows, caps]))


def train_epoch(model: Model, cache: FeatureCache, examples,
                opt: SgdMomentum | None, config: TrainConfig, epoch: int) -> float:
    """One pass over the shuffled examples; returns the mean example loss.

    ``opt=None`` runs the forward passes (including batch-norm statistics
    updates) without touching any parameter: a no-op optimizer.
    """
    batches = make_batches(examples, config.batch_size, config.seed, epoch)
    decay_mask = model.decay_mask()
    total, count = 0.0, 0
    for bi, batch in enumerate(batches):
        cls1, cls2, emb1, emb2, text = _batch_tensors(cache, batch)
        drop_rng = rngmod.stream(config.seed, "dropout", epoch, bi)
        model.zero_grads()
        try:
            with Tape() as tape:
                _, _, combined = model.batch_loss(cls1, cls2, emb1, emb2, text,
                                                  train=True, rng=drop_rng)
        except NonFiniteError as exc:
            raise StateError(f"non-finite loss in epoch {epoch} batch {bi}: {exc}") from exc
        loss_value = combined.item()
        if not np.isfinite(loss_value):
            raise StateError(f"non-finite loss in epoch {epoch} batch {bi}")
        if opt is not None:
            backward(combined, tape)
            opt.step(model.params, decay_mask)
            model.after_step()
        total += loss_value * len(batch)
        count += len(batch)
    return total / count


def _normalize(rows: np.ndarray) -> np.ndarray:
    rows = rows.astype(np.float64)
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / norms


def top1_indices(queries: np.ndarray, archive: np.ndarray) -> np.ndarray:
    """Index of the highest-cosine archive row per query row."""
    sims = _normalize(queries) @ _normalize(archive).T
    return np.argmax(sims, axis=1)


def eval_features(model: Model, cache: FeatureCache):
    """Eval-mode projected features: image rows [N, out], text rows [N, 5, out]."""
    fx = model.image_features(Tensor(cache.cls_t1), Tensor(cache.cls_t2),
                              Tensor(cache.emb_t1), Tensor(cache.emb_t2),
                              train=False).data
    n = len(cache)
    flat_text = cache.text_cls.reshape(n * 5, -1)
    fy = model.text_features(Tensor(flat_text)).data.reshape(n, 5, -1)
    return fx, fy


def validate(model: Model, cache: FeatureCache) -> tuple[float, float]:
    """Recall@1 in both directions on eval-mode features.

    Text-to-image: every caption queries the image rows, success when the
    top row is its own pair. Image-to-text: every pair queries all caption
    rows, success when the top caption belongs to the pair.
    """
    n = len(cache)
    if n < 2:
        raise ConfigError("validation needs at least 2 pairs")
    fx, fy = eval_features(model, cache)
    fy_flat = fy.reshape(n * 5, -1)
    owner = np.repeat(np.arange(n), 5)

    top_img = top1_indices(fy_flat, fx)
    recall_t2i = float(np.mean(top_img == owner))
    top_cap = top1_indices(fx, fy_flat)
    recall_i2t = float(np.mean(owner[top_cap] == np.arange(n)))
    return recall_t2i, recall_i2t


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    recall_t2i: float | None
    recall_i2t: float | None


def fit(model: Model, train_manifest: DatasetManifest,
        val_manifest: DatasetManifest | None, config: TrainConfig,
        out_dir=None, log=None, velocities=None):
    """Full training run with best-validation and final checkpoints.

    Returns (history, best_epoch). Resuming: pass a model whose ``epoch``
    is already advanced plus the optimizer ``velocities`` saved with it;
    epoch-keyed shuffling and dropout make the continuation exact.
    """
    cache = FeatureCache(model, train_manifest)
    examples = expand_examples(cache)
    val_cache = None
    if val_manifest is not None and len(val_manifest) >= 2:
        val_cache = FeatureCache(model, val_manifest)
    opt = SgdMomentum(config.lr, config.momentum, config.weight_decay)
    if velocities:
        opt.velocity = {k: np.asarray(v) for k, v in velocities.items()}
    out_dir = Path(out_dir) if out_dir is not None else None
    history: list[EpochRecord] = []
    best_score, best_epoch = -1.0, -1
    start = model.epoch
    for epoch in range(start, config.epochs):
        loss = train_epoch(model, cache, examples, opt, config, epoch)
        model.epoch = epoch + 1
        rec_t2i = rec_i2t = None
        if val_cache is not None:
            rec_t2i, rec_i2t = validate(model, val_cache)
            score = 0.5 * (rec_t2i + rec_i2t)
            if score > best_score:
                best_score, best_epoch = score, epoch
                if out_dir is not None:
                    save_checkpoint(model, out_dir / "best.tsrc")
        record = EpochRecord(epoch, loss, rec_t2i, rec_i2t)
        history.append(record)
        if log is not None:
            log.write(json.dumps({"epoch": epoch, "loss": loss,
                                  "recall_t2i": rec_t2i,
                                  "recall_i2t": rec_i2t}) + "\n")
            log.flush()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.tsrc",)
        _save_velocities(opt, out_dir / "final.velocity.npz")
        if val_cache is None:
            save_checkpoint(model, out_dir / "best.tsrc")
    return history, best_epoch


def _save_velocities(opt: SgdMomentum, path) -> None:
    np.savez(path, **{k.replace("/", "_"): v for k, v in opt.velocity.items()})


def load_velocities(path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
