"""Cross-modal retrieval between text sentences and bitemporal image features.

A self-contained engine: a minimal autodiff tensor core, deterministic toy
encoders, three bitemporal fusion strategies, contrastive training, exact
top-k cosine retrieval with a leave-one-out protocol, and caption-overlap
scoring (BLEU-1/4, METEOR, ROUGE-L).
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward  # noqa: F401
