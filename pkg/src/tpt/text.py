"""Tokenization, vocabulary files, and question/answer token encoding."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .attention import MtlParams, init_mtl, mt_layer
from .config import TptConfig
from .nn import EmbeddingTable, LinearLayer, linear_forward, new_embedding, new_linear
from .tensor import MaskedRowError, Tensor

PAD, UNK = 0, 1
_PUNCT = re.compile(r"[^\w\s]")


class UnknownTokenError(KeyError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocab:
    """Closed vocabulary; ids 0 and 1 are reserved for padding and unknown words."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens = ["<pad>", "<unk>"]
        self.index = {"<pad>": PAD, "<unk>": UNK}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def get(self, token: str, default=None):
        return self.index.get(token, default)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK) for tok in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != PAD)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        vocab = cls()
        for text in texts:
            for tok in tokenize(text):
                vocab.add(tok)
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 2:
            raise ValueError(f"{path}: vocabulary needs the two reserved entries")
        vocab = cls()
        vocab.tokens = list(lines)
        vocab.index = {tok: i for i, tok in enumerate(lines)}
        return vocab


@dataclass
class TextParams:
    embedding: EmbeddingTable
    proj: LinearLayer               # word_dim -> d
    layers: list[MtlParams]         # self-attention encoder


@dataclass
class TokenSequence:
    tokens: Tensor                  # [..., L, d]
    mask: np.ndarray                # [..., L] bool, True = real token

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


def init_text(rng: np.random.Generator, config: TptConfig, vocab_size: int) -> TextParams:
    return TextParams(
        new_embedding(rng, vocab_size, config.word_dim, config.dtype),
        new_linear(rng, config.word_dim, config.d_model, config.dtype),
        [init_mtl(rng, config) for _ in range(config.text_layers)],
    )


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists to a common length; returns ``(ids, mask)``."""
    L = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def embed_tokens(ids, table: EmbeddingTable, proj: LinearLayer) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise UnknownTokenError(f"token id outside closed vocabulary of size {table.vocab_size}: "
                                f"{sorted(set(ids[(ids < 0) | (ids >= table.vocab_size)].tolist()))}")
    return linear_forward(proj, tt.embedding_gather(table.table, ids))


def self_encode(x: Tensor, mask, layers: Sequence[MtlParams], eps: float = 1e-5) -> TokenSequence:
    """Self-attention layers with query = key = value = ``x``; padded keys are masked."""
    mask = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if (~mask.any(axis=-1)).any():
        raise MaskedRowError("self_encode: a sequence has no real tokens")
    for layer in layers:
        x = mt_layer(layer, x, x, mask, "plain-primary", eps=eps)
    return TokenSequence(x, mask)


def encode_text(params: TextParams, ids, mask, eps: float = 1e-5) -> TokenSequence:
    return self_encode(embed_tokens(ids, params.embedding, params.proj), mask, params.layers, eps)
