"""Subword bag-of-context embeddings trained in-process.

A plain CBOW objective with negative sampling: the mean of the context
representations predicts the center token. Every token is represented by
its own vector plus the mean of hashed character n-gram vectors, so
unseen tokens still map to a usable vector. Training is single threaded
and fully deterministic for a given seed and corpus order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binio
from .issuegraph import TERMINAL_TYPES, HeteroGraph, NodeType

EMBED_MAGIC = b"SGEM"
EMBED_VERSION = 1


class EmbeddingError(Exception):
    pass


class EmptyCorpus(EmbeddingError):
    pass


class DimMismatch(EmbeddingError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 100
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    min_n: int = 3
    max_n: int = 6
    bucket_count: int = 100_000
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.min_n > self.max_n:
            raise ValueError("min_n must not exceed max_n")
        if self.bucket_count <= 0:
            raise ValueError("bucket_count must be positive")


def _fnv1a(data: str) -> int:
    h = 0x811C9DC5
    for byte in data.encode("utf-8"):
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def _ngram_ids(token: str, min_n: int, max_n: int, buckets: int) -> np.ndarray:
    padded = f"<{token}>"
    ids = [
        _fnv1a(padded[i : i + n]) % buckets
        for n in range(min_n, max_n + 1)
        for i in range(len(padded) - n + 1)
    ]
    return np.array(ids, dtype=np.int64)


class EmbeddingModel:
    """Trained token vectors: per-word table plus hashed n-gram buckets."""

    def __init__(
        self,
        config: EmbeddingConfig,
        vocab: dict[str, int],
        word_vectors: np.ndarray,
        ngram_vectors: np.ndarray,
    ):
        if word_vectors.shape != (len(vocab), config.dim):
            raise DimMismatch(
                f"word matrix {word_vectors.shape} does not match "
                f"vocab {len(vocab)} x dim {config.dim}"
            )
        if ngram_vectors.shape != (config.bucket_count, config.dim):
            raise DimMismatch(
                f"ngram matrix {ngram_vectors.shape} does not match "
                f"buckets {config.bucket_count} x dim {config.dim}"
            )
        self.config = config
        self.vocab = vocab
        self.word_vectors = word_vectors
        self.ngram_vectors = ngram_vectors
        self._gram_cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.config.dim

    def _grams(self, token: str) -> np.ndarray:
        got = self._gram_cache.get(token)
        if got is None:
            got = _ngram_ids(token, self.config.min_n, self.config.max_n,
                             self.config.bucket_count)
            self._gram_cache[token] = got
        return got

    def word_vector(self, token: str) -> np.ndarray:
        """Vector for a token; out-of-vocabulary tokens fall back to n-grams."""
        grams = self._grams(token)
        sub = (
            self.ngram_vectors[grams].mean(axis=0)
            if len(grams)
            else np.zeros(self.dim, dtype=np.float32)
        )
        idx = self.vocab.get(token)
        if idx is None:
            return sub
        return self.word_vectors[idx] + sub

    def sequence_vector(self, tokens: Sequence[str]) -> np.ndarray:
        """Arithmetic mean of token vectors; empty input gives zeros."""
        if not tokens:
            return np.zeros(self.dim, dtype=np.float32)
        acc = np.zeros(self.dim, dtype=np.float32)
        for tok in tokens:
            acc += self.word_vector(tok)
        return acc / len(tokens)

    def save(self, path: str | Path) -> None:
        meta = {
            "config": {
                "dim": self.config.dim,
                "window": self.config.window,
                "negatives": self.config.negatives,
                "epochs": self.config.epochs,
                "min_n": self.config.min_n,
                "max_n": self.config.max_n,
                "bucket_count": self.config.bucket_count,
                "learning_rate": self.config.learning_rate,
                "seed": self.config.seed,
            },
            "vocab": sorted(self.vocab, key=self.vocab.get),
        }
        binio.write_container(
            path, EMBED_MAGIC, EMBED_VERSION, meta,
            {"word": self.word_vectors, "ngram": self.ngram_vectors},
        )

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingModel":
        meta, arrays = binio.read_container(path, EMBED_MAGIC, EMBED_VERSION)
        config = EmbeddingConfig(**meta["config"])
        vocab = {tok: i for i, tok in enumerate(meta["vocab"])}
        return cls(config, vocab, arrays["word"], arrays["ngram"])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -16.0, 16.0)))


def train_cbow(
    sentences: Sequence[Sequence[str]], cfg: EmbeddingConfig | None = None
) -> EmbeddingModel:
    """Train the embedding tables on token sequences.

    Context width shrinks randomly per position as in the usual CBOW
    training loop; negatives are drawn from the unigram distribution
    raised to 3/4; the step size decays linearly over all scheduled
    positions. Iteration order is fixed, so results depend only on the
    seed and the corpus.
    """
    cfg = cfg or EmbeddingConfig()
    vocab: dict[str, int] = {}
    counts: list[int] = []
    indexed: list[np.ndarray] = []
    usable = False
    for sent in sentences:
        if not sent:
            continue
        row = np.empty(len(sent), dtype=np.int64)
        for j, tok in enumerate(sent):
            idx = vocab.get(tok)
            if idx is None:
                idx = len(vocab)
                vocab[tok] = idx
                counts.append(0)
            counts[idx] += 1
            row[j] = idx
        indexed.append(row)
        if len(sent) >= 2:
            usable = True
    if not usable:
        raise EmptyCorpus("need at least one sentence with two or more tokens")

    tokens = sorted(vocab, key=vocab.get)
    grams = [
        _ngram_ids(tok, cfg.min_n, cfg.max_n, cfg.bucket_count) for tok in tokens
    ]

    rng = np.random.default_rng(cfg.seed)
    scale = 0.5 / cfg.dim
    word = ((rng.random((len(vocab), cfg.dim)) * 2 - 1) * scale).astype(np.float32)
    ngram = ((rng.random((cfg.bucket_count, cfg.dim)) * 2 - 1) * scale).astype(
        np.float32
    )
    out = np.zeros((len(vocab), cfg.dim), dtype=np.float32)

    freq = np.array(counts, dtype=np.float64) ** 0.75
    neg_cdf = np.cumsum(freq / freq.sum())

    total_positions = cfg.epochs * sum(len(r) for r in indexed if len(r) >= 2)
    done = 0
    for _ in range(cfg.epochs):
        for row in indexed:
            n = len(row)
            if n < 2:
                continue
            frac = done / total_positions if total_positions else 0.0
            lr = np.float32(cfg.learning_rate * max(1.0 - frac, 1e-4))
            done += n
            widths = rng.integers(1, cfg.window + 1, size=n)
            negs = np.searchsorted(neg_cdf, rng.random((n, cfg.negatives)))
            for pos in range(n):
                lo = max(0, pos - widths[pos])
                hi = min(n, pos + widths[pos] + 1)
                ctx = np.concatenate([row[lo:pos], row[pos + 1 : hi]])
                if len(ctx) == 0:
                    continue
                # context = mean over every word and n-gram vector in the window
                ctx_grams = np.concatenate([grams[w] for w in ctx])
                bag = len(ctx) + len(ctx_grams)
                h = (word[ctx].sum(axis=0) + ngram[ctx_grams].sum(axis=0)) / np.float32(bag)

                target = row[pos]
                cand = negs[pos]
                cand = cand[cand != target]
                targets = np.concatenate([[target], cand])
                labels = np.zeros(len(targets), dtype=np.float32)
                labels[0] = 1.0

                f = _sigmoid(out[targets] @ h)
                g_out = (labels - f) * lr
                e = g_out @ out[targets]
                # duplicate draws and hash collisions must each contribute
                np.add.at(out, targets, np.outer(g_out, h))
                delta = e / np.float32(bag)
                np.add.at(word, ctx, delta)
                np.add.at(ngram, ctx_grams, delta)

    return EmbeddingModel(cfg, vocab, word, ngram)


def init_node_embeddings(
    graph: HeteroGraph, model: EmbeddingModel, expected_dim: int | None = None
) -> dict[NodeType, np.ndarray]:
    """Initial feature table per node type.

    Terminal nodes take their token vector; internal nodes take the mean
    over the tokens they cover (the document covers title plus
    description). Output is float64 and guaranteed finite.
    """
    if expected_dim is not None and expected_dim != model.dim:
        raise DimMismatch(f"model dim {model.dim}, expected {expected_dim}")
    features: dict[NodeType, np.ndarray] = {}
    for node_type, ids in graph.node_ids.items():
        table = np.empty((len(ids), model.dim), dtype=np.float64)
        if node_type in TERMINAL_TYPES:
            for i, ident in enumerate(ids):
                table[i] = model.word_vector(ident)
        else:
            toks = graph.node_tokens[node_type]
            for i in range(len(ids)):
                table[i] = model.sequence_vector(toks[i])
        if not np.isfinite(table).all():
            raise EmbeddingError(f"non-finite feature for node type {node_type.value}")
        features[node_type] = table
    return features
