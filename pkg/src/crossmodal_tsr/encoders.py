"""Deterministic toy encoders for images and text.

These stand in for large pretrained backbones: a frozen seed-determined
random projection plus sinusoidal position offsets. They carry no semantic
prior — they exist so the fusion/contrastive machinery has deterministic,
well-shaped features to train against. The class-token vector is defined as
the mean of the final (position-offset) sequence, so a sequence loaded from
disk yields the identical class token.
"""

from __future__ import annotations

import hashlib
import string

import numpy as np

from . import rng as rngmod
from .errors import ShapeError

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

# Position offsets are deliberately small relative to projected content so
# that what an image/sentence contains dominates where it sits; order still
# perturbs every vector enough to be distinguishable.
POSITION_SCALE = 0.05
_IMAGE_GAIN = 4.0


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace.

    The same rule feeds the text encoder and the caption-overlap metrics.
    """
    return [w for w in text.lower().translate(_PUNCT_TABLE).split() if w]


def position_offsets(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Standard sinusoidal position table, [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype)


def image_projection(c: int, patch: int, embed_dim: int, seed: int) -> np.ndarray:
    """Frozen random projection [c*patch*patch, embed_dim] for a seed."""
    fan_in = c * patch * patch
    gen = rngmod.stream(seed, "image-projection")
    return (gen.standard_normal((fan_in, embed_dim)) * (_IMAGE_GAIN / np.sqrt(fan_in))
            ).astype(np.float32)


def encode_image(image: np.ndarray, patch: int, embed_dim: int, seed: int):
    """Patch-flatten, project, add position offsets.

    Returns (cls [embed_dim], patches [T, embed_dim]) with
    T = (h/patch)*(w/patch). Same (image, seed, config) -> same output.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ShapeError(f"encode_image expects [channels, h, w], got {image.shape}")
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    blocks = image.reshape(c, gh, patch, gw, patch)
    flat = blocks.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)
    proj = image_projection(c, patch, embed_dim, seed)
    patches = flat @ proj + POSITION_SCALE * position_offsets(gh * gw, embed_dim)
    patches = patches.astype(np.float32)
    return patches.mean(axis=0), patches


def word_bucket(word: str, vocab: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab


def text_embedding_table(vocab: int, embed_dim: int, seed: int) -> np.ndarray:
    gen = rngmod.stream(seed, "text-embedding")
    return gen.standard_normal((vocab, embed_dim)).astype(np.float32)


class TextEncoder:
    """Frozen hashed-embedding text encoder with position offsets.

    Caches the embedding table; the per-sentence work is a lookup plus an
    offset add. Out-of-vocabulary never occurs — every word hashes to a
    bucket.
    """

    def __init__(self, vocab: int, embed_dim: int, seed: int):
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.seed = seed
        self.table = text_embedding_table(vocab, embed_dim, seed)

    def encode(self, words: list[str]):
        """(cls [embed_dim], tokens [M, embed_dim]) for an M-word sentence.

        The class token is a position-weighted mean (weights 1/(1+i)): a
        plain mean would be exactly permutation-invariant, losing all word
        order; the weighting keeps a one-word sentence's class token equal
        to its single token vector.
        """
        if not words:
            raise ShapeError("text encoder needs at least one word")
        idx = np.fromiter((word_bucket(w, self.vocab) for w in words), dtype=np.int64)
        tokens = self.table[idx] + POSITION_SCALE * position_offsets(len(words), self.embed_dim)
        tokens = tokens.astype(np.float32)
        weights = 1.0 / (1.0 + np.arange(len(words), dtype=np.float32))
        cls = (weights[:, None] * tokens).sum(axis=0) / weights.sum()
        return cls.astype(np.float32), tokens


def encode_text(words: list[str], vocab: int, embed_dim: int, seed: int):
    return TextEncoder(vocab, embed_dim, seed).encode(words)
