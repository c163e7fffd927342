"""Toy encoders: determinism, shape contracts, position sensitivity."""

import numpy as np
import pytest

from crossmodal_tsr.encoders import (POSITION_SCALE, TextEncoder, encode_image,
                                     encode_text, position_offsets, tokenize,
                                     word_bucket)
from crossmodal_tsr.errors import ShapeError


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("The Cat, sat!") == ["the", "cat", "sat"]

    def test_whitespace_collapse(self):
        assert tokenize("  a   b\t c ") == ["a", "b", "c"]

    def test_punctuation_only_words_dropped(self):
        assert tokenize("a -- b") == ["a", "b"]


class TestImageEncoder:
    def test_patch_count(self):
        img = np.zeros((1, 8, 8), np.float32)
        _cls, patches = encode_image(img, patch=4, embed_dim=6, seed=0)
        assert patches.shape == (4, 6)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        img = rng.random((2, 8, 8)).astype(np.float32)
        a = encode_image(img, 4, 8, seed=3)
        b = encode_image(img.copy(), 4, 8, seed=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_zero_image_gives_position_offsets_only(self):
        img = np.zeros((1, 8, 8), np.float32)
        _cls, patches = encode_image(img, 4, 6, seed=1)
        np.testing.assert_allclose(patches,
                                   POSITION_SCALE * position_offsets(4, 6),
                                   atol=1e-7)

    def test_cls_is_mean_of_patches(self):
        rng = np.random.default_rng(1)
        img = rng.random((1, 12, 12)).astype(np.float32)
        cls, patches = encode_image(img, 4, 10, seed=2)
        np.testing.assert_allclose(cls, patches.mean(axis=0), atol=1e-6)

    def test_indivisible_dimensions_rejected(self):
        with pytest.raises(ShapeError):
            encode_image(np.zeros((1, 9, 8), np.float32), 4, 6, seed=0)

    def test_different_seed_different_projection(self):
        img = np.random.default_rng(2).random((1, 8, 8)).astype(np.float32)
        a = encode_image(img, 4, 8, seed=1)[1]
        b = encode_image(img, 4, 8, seed=2)[1]
        assert np.abs(a - b).max() > 1e-3


class TestTextEncoder:
    def test_deterministic(self):
        a = encode_text(["a", "block", "appears"], 512, 8, seed=5)
        b = encode_text(["a", "block", "appears"], 512, 8, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_one_word_cls_equals_token(self):
        cls, tokens = encode_text(["block"], 512, 8, seed=5)
        assert tokens.shape == (1, 8)
        np.testing.assert_array_equal(cls, tokens[0])

    def test_permuted_words_change_cls(self):
        a, _ = encode_text(["north", "west"], 512, 8, seed=5)
        b, _ = encode_text(["west", "north"], 512, 8, seed=5)
        assert np.abs(a - b).max() > 1e-6

    def test_out_of_vocab_never_fails(self):
        enc = TextEncoder(16, 4, seed=0)
        cls, tokens = enc.encode(["completely", "novel", "zzzz-token"])
        assert tokens.shape == (3, 4)
        assert np.all(np.isfinite(cls))

    def test_empty_sentence_rejected(self):
        with pytest.raises(ShapeError):
            encode_text([], 16, 4, seed=0)

    def test_bucket_stability(self):
        assert word_bucket("block", 4096) == word_bucket("block", 4096)
        assert 0 <= word_bucket("anything", 7) < 7
