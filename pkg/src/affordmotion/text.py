"""Text prompts and the pluggable text-encoder slot.

The built-in encoder is a seeded hashed bag of unigrams and bigrams projected to a
fixed width. Any callable ``str -> vector`` of the configured width can replace it.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Protocol

import numpy as np

TEXT_DIM = 512
MAX_TOKENS = 77
VOCAB_SIZE = 49408

_WORD = re.compile(r"[a-z0-9']+")


def _stable_hash(s: str) -> int:
    return int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little")


def tokenize(raw: str, max_tokens: int = MAX_TOKENS) -> list[str]:
    return _WORD.findall(raw.lower())[:max_tokens]


def token_ids(words: list[str]) -> list[int]:
    return [_stable_hash(w) % VOCAB_SIZE for w in words]


@dataclass
class TextPrompt:
    raw: str
    tokens: list
    embedding: np.ndarray | None = None

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("prompt has no tokens")
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=np.float32)
            if not np.isfinite(self.embedding).all():
                raise ValueError("non-finite text embedding")


class TextEncoder(Protocol):
    dim: int

    def __call__(self, raw: str) -> np.ndarray: ...


class HashedBagEncoder:
    def __init__(self, dim: int = TEXT_DIM, seed: int = 0, bigrams: bool = True):
        self.dim = dim
        self.seed = seed
        self.bigrams = bigrams

    @lru_cache(maxsize=4096)
    def _vector(self, item: str) -> np.ndarray:
        rng = np.random.default_rng([self.seed, _stable_hash(item)])
        return rng.standard_normal(self.dim)

    def __call__(self, raw: str) -> np.ndarray:
        words = tokenize(raw)
        items = list(words)
        if self.bigrams:
            items += [f"{a} {b}" for a, b in zip(words, words[1:])]
        if not items:
            raise ValueError("empty prompt")
        v = np.sum([self._vector(i) for i in items], axis=0)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def __hash__(self):
        return hash((self.dim, self.seed, self.bigrams))

    def __eq__(self, other):
        return isinstance(other, HashedBagEncoder) and (self.dim, self.seed, self.bigrams) == (
            other.dim, other.seed, other.bigrams)


class CallableEncoder:
    """Adapter for an external encoder function; checks the output width."""

    def __init__(self, fn: Callable[[str], np.ndarray], dim: int):
        self.fn = fn
        self.dim = dim

    def __call__(self, raw: str) -> np.ndarray:
        v = np.asarray(self.fn(raw), dtype=np.float32).reshape(-1)
        if v.shape[0] != self.dim:
            raise ValueError(f"external encoder returned width {v.shape[0]}, expected {self.dim}")
        return v


DEFAULT_ENCODER = HashedBagEncoder()


def encode_text(raw: str, encoder: TextEncoder | None = None) -> TextPrompt:
    if not raw or not raw.strip():
        raise ValueError("empty prompt")
    encoder = encoder or DEFAULT_ENCODER
    words = tokenize(raw)
    if not words:
        raise ValueError("empty prompt")
    return TextPrompt(raw, token_ids(words), encoder(raw))
