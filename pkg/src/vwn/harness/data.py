"""Token corpora: seeded synthetic Markov chains and raw byte files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numcore import ConfigError

DEFAULT_STREAMS = 256


@dataclass
class MarkovCorpus:
    tokens: np.ndarray  # int64, shape (length,)
    transition: np.ndarray  # (vocab**order, vocab), rows sum to 1
    vocab_size: int
    order: int

    def stationary_context_distribution(self, iters: int = 10_000, tol: float = 1e-14) -> np.ndarray:
        V, k = self.vocab_size, self.order
        P = self.transition
        pi = np.full(V**k, 1.0 / V**k)
        for _ in range(iters):
            if k == 1:
                new = pi @ P
            else:
                # context (a, b) -> (b, c)
                new = np.einsum("ab,abc->bc", pi.reshape(V, V), P.reshape(V, V, V)).reshape(-1)
            if np.abs(new - pi).max() < tol:
                return new
            pi = new
        return pi

    def entropy_rate(self) -> float:
        """Stationary conditional entropy in nats: the best achievable next-token loss."""
        pi = self.stationary_context_distribution()
        P = self.transition
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
        return float(pi @ h)


def random_transition(
    vocab_size: int, order: int, concentration: float, rng: np.random.Generator, bigram_mix: float = 0.0
) -> np.ndarray:
    """Dirichlet rows; for order 2, ``bigram_mix`` blends in a row shared by all contexts ending in b.

    With mix 0 the order-2 chain has a nearly uniform bigram marginal, so a
    model sees no signal until it resolves both context tokens.
    """
    if not 0.0 <= bigram_mix <= 1.0:
        raise ConfigError("bigram_mix must lie in [0, 1]")
    rows = rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size**order)
    if order == 2 and bigram_mix > 0.0:
        shared = rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size)
        rows = bigram_mix * np.tile(shared, (vocab_size, 1)) + (1.0 - bigram_mix) * rows
    return rows


def gen_markov_corpus(
    vocab_size: int,
    order: int,
    seed: int,
    length: int,
    concentration: float = 0.3,
    transition: np.ndarray | None = None,
    bigram_mix: float = 0.0,
    streams: int = DEFAULT_STREAMS,
) -> MarkovCorpus:
    """Sample ``length`` tokens from an order-``order`` Markov chain.

    The chain (unless ``transition`` is given) has Dirichlet(``concentration``)
    rows. Sampling runs ``streams`` independent chains side by side and
    concatenates them, so token boundaries between streams are not Markov.
    """
    if order not in (1, 2):
        raise ConfigError(f"order must be 1 or 2, got {order}")
    if vocab_size < 2:
        raise ConfigError("vocab_size must be at least 2")
    if length < 1:
        raise ConfigError("length must be positive")
    rng = np.random.default_rng(seed)
    if transition is None:
        transition = random_transition(vocab_size, order, concentration, rng, bigram_mix)
    transition = np.asarray(transition, dtype=np.float64)
    if transition.shape != (vocab_size**order, vocab_size):
        raise ConfigError(f"transition must have shape {(vocab_size**order, vocab_size)}")
    cum = np.cumsum(transition, axis=1)
    cum[:, -1] = 1.0

    streams = max(1, min(streams, length))
    steps = -(-length // streams)
    out = np.empty((streams, steps), dtype=np.int64)
    hist = rng.integers(0, vocab_size, size=(streams, order))
    for i in range(steps):
        ctx = hist[:, -1] if order == 1 else hist[:, -2] * vocab_size + hist[:, -1]
        u = rng.random(streams)
        nxt = (u[:, None] >= cum[ctx]).sum(axis=1)
        np.minimum(nxt, vocab_size - 1, out=nxt)
        out[:, i] = nxt
        hist = np.concatenate([hist[:, 1:], nxt[:, None]], axis=1)
    return MarkovCorpus(out.reshape(-1)[:length], transition, vocab_size, order)


def load_byte_corpus(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise ConfigError(f"{path}: byte corpus is too short")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


class BatchSampler:
    """Random contiguous windows from a token array, driven by its own RNG."""

    def __init__(self, tokens: np.ndarray, seq_len: int, batch_size: int, seed: int) -> None:
        if tokens.size <= seq_len:
            raise ConfigError(f"corpus of {tokens.size} tokens is too short for seq_len {seq_len}")
        self.tokens = tokens
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def next(self) -> np.ndarray:
        starts = self.rng.integers(0, self.tokens.size - self.seq_len + 1, size=self.batch_size)
        return self.tokens[starts[:, None] + np.arange(self.seq_len)]
