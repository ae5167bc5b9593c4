"""Synthetic Markov-chain corpora with a closed-form loss floor.

A pretraining source and a shifted adaptation source are built from seeded
transition matrices. Token streams are addressed by ``(seed, index)`` so any
batch can be regenerated without replaying the ones before it.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError, TruncationError

TOKEN_MAGIC = b"OLTK"
TOKEN_VERSION = 1


@dataclass(frozen=True, eq=False)
class MarkovSource:
    vocab: int
    transition: np.ndarray
    seed: int

    def __post_init__(self):
        t = self.transition
        if t.shape != (self.vocab, self.vocab):
            raise ConfigError(f"transition shape {t.shape} does not match vocab {self.vocab}")
        if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-9:
            raise ConfigError("transition rows must be probability distributions")


@dataclass(frozen=True)
class CorpusConfig:
    source_seed: int = 0
    shift_seed: int = 1
    shift: float = 0.5
    n_eval: int = 256
    eval_seed: int = 12345

    def __post_init__(self):
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError(f"shift must be in [0, 1], got {self.shift}")
        if self.n_eval < 64:
            raise ConfigError(f"n_eval must be at least 64, got {self.n_eval}")


@dataclass(frozen=True)
class StreamState:
    seed: int
    index: int = 0

    def advance(self, n=1):
        return StreamState(self.seed, self.index + n)


def make_source(vocab, seed):
    """Rows are normalized i.i.d. exponential draws (a flat Dirichlet)."""
    if vocab < 2:
        raise ConfigError(f"vocab must be at least 2, got {vocab}")
    rng = np.random.default_rng(seed)
    e = rng.exponential(size=(vocab, vocab))
    return MarkovSource(vocab, e / e.sum(axis=1, keepdims=True), seed)


def shift_source(src, delta, seed):
    """Mix ``src`` with a fresh source: ``(1 - delta) * old + delta * fresh``."""
    if not 0.0 <= delta <= 1.0:
        raise ConfigError(f"shift strength must be in [0, 1], got {delta}")
    if delta == 0.0:
        return src
    fresh = make_source(src.vocab, seed)
    mixed = (1.0 - delta) * src.transition + delta * fresh.transition
    return MarkovSource(src.vocab, mixed / mixed.sum(axis=1, keepdims=True), seed)


def sample_batch(src, batch, length, state):
    """``batch`` chains of ``length`` tokens, starting from a uniform state."""
    rng = np.random.default_rng([state.seed, state.index])
    cdf = np.cumsum(src.transition, axis=1)
    out = np.empty((batch, length), dtype=np.int64)
    out[:, 0] = rng.integers(0, src.vocab, size=batch)
    for t in range(1, length):
        u = rng.random(batch)
        nxt = (u[:, None] >= cdf[out[:, t - 1]]).sum(axis=1)
        out[:, t] = np.minimum(nxt, src.vocab - 1)
    return out


def stream(src, batch, length, state):
    """Endless generator of consecutive batches from ``state``."""
    while True:
        yield sample_batch(src, batch, length, state)
        state = state.advance()


def eval_set(src, corpus, length):
    return sample_batch(src, corpus.n_eval, length, StreamState(corpus.eval_seed, 0))


def build_sources(vocab, corpus):
    """``(pretraining source, shifted adaptation source)`` for a corpus config."""
    base = make_source(vocab, corpus.source_seed)
    return base, shift_source(base, corpus.shift, corpus.shift_seed)


def row_entropies(src):
    p = src.transition
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p), 0.0)
    return -(p * logs).sum(axis=1)


def conditional_entropy(src, length):
    """Bayes-optimal mean next-token loss for sequences from :func:`sample_batch`.

    Position t's state distribution is ``uniform @ P^t``; the floor averages
    the row entropies under it over the ``length - 1`` predicted positions.
    """
    if length < 2:
        raise ConfigError("need at least two tokens per sequence")
    h = row_entropies(src)
    dist = np.full(src.vocab, 1.0 / src.vocab)
    total = 0.0
    for _ in range(length - 1):
        total += float(dist @ h)
        dist = dist @ src.transition
    return total / (length - 1)


def write_tokens(path, tokens, vocab):
    tokens = np.asarray(tokens).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab or vocab > 65536):
        raise DataError("tokens do not fit the u16 range of the declared vocab")
    header = TOKEN_MAGIC + struct.pack("<IIQ", TOKEN_VERSION, vocab, tokens.size)
    with open(path, "wb") as f:
        f.write(header)
        f.write(tokens.astype("<u2").tobytes())


def read_tokens(path):
    """Returns ``(vocab, tokens)`` from a token dump."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20:
        raise TruncationError(f"{path}: token file header truncated")
    if blob[:4] != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, vocab, count = struct.unpack_from("<IIQ", blob, 4)
    if version != TOKEN_VERSION:
        raise FormatError(f"{path}: unsupported token file version {version}")
    if len(blob) < 20 + 2 * count:
        raise TruncationError(f"{path}: expected {count} tokens")
    tokens = np.frombuffer(blob, dtype="<u2", count=count, offset=20).astype(np.int64)
    return vocab, tokens
