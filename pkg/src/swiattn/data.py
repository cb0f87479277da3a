"""Synthetic byte-level corpora.

Two sequence families:

* pattern: a random lowercase motif of period 2..6 repeated; predictable from the
  last few tokens, so a windowed branch suffices.
* recall (needle-in-a-haystack): a motif haystack with a key-value needle ``#<digit>``
  planted at a chosen depth and the query key ``?#`` at the end, followed by the value
  and a newline. The value alphabet is disjoint from the haystack, so answering is a
  content lookup that needs attention reaching back to the needle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

LETTERS = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8).astype(np.int64)
DIGITS = np.frombuffer(b"0123456789", dtype=np.uint8).astype(np.int64)
# one alphabet per value slot; a single digit keeps retrieval learnable at desk scale
SLOT_ALPHABETS = (DIGITS,)
NEEDLE_MARK = ord("#")
QUERY_MARK = ord("?")
EOS = ord("\n")
NEEDLE_VALUES = len(SLOT_ALPHABETS)
NEEDLE_LEN = 1 + NEEDLE_VALUES
QUERY = (QUERY_MARK, NEEDLE_MARK)

TASK_KINDS = ("lm_corpus", "copy", "induction", "niah")


def encode(text: str) -> list:
    return list(text.encode("latin-1"))


def decode(tokens) -> str:
    return bytes(int(t) for t in tokens).decode("latin-1")


def motif_stream(n: int, rng: np.random.Generator, min_period: int = 2, max_period: int = 6) -> np.ndarray:
    period = int(rng.integers(min_period, max_period + 1))
    motif = rng.choice(LETTERS, size=period, replace=False)
    return np.resize(motif, n)


@dataclass
class NeedleInstance:
    tokens: np.ndarray        # prompt: haystack with needle, ending in the query
    answer: np.ndarray        # needle values the model should produce
    needle_start: int         # index of '#' in the prompt
    depth_percent: float
    window: int

    @property
    def full_sequence(self) -> np.ndarray:
        return np.concatenate([self.tokens, self.answer, [EOS]])

    @property
    def answer_positions(self) -> np.ndarray:
        """Positions whose next-token prediction is an answer token."""
        first = len(self.tokens) - 1
        return np.arange(first, first + len(self.answer))

    @property
    def distance(self) -> int:
        """Tokens between the needle start and the last answer-generation position."""
        return int(self.answer_positions[-1] - self.needle_start)

    @property
    def window_relation(self) -> str:
        """'inside' if the whole needle is visible to a windowed branch at every answer step,
        'outside' if none of the needle values are, else 'partial'."""
        pos = self.answer_positions
        if pos[-1] - self.needle_start < self.window:
            return "inside"
        if pos[0] - (self.needle_start + NEEDLE_LEN - 1) >= self.window:
            return "outside"
        return "partial"

    @property
    def inside_window(self) -> bool:
        return self.window_relation == "inside"


def make_niah(context_len: int, depth_percent: float, window: int, rng: np.random.Generator,
              needle=None) -> NeedleInstance:
    """Plant a needle at ``depth_percent`` of the haystack of a ``context_len``-token prompt.

    0% puts the needle at the start, 100% immediately before the query.
    """
    hay_len = context_len - NEEDLE_LEN - len(QUERY)
    if hay_len < 0:
        raise ContractError(f"context of {context_len} tokens cannot hold needle and query")
    if not 0.0 <= depth_percent <= 100.0:
        raise ContractError(f"depth_percent {depth_percent} outside [0, 100]")
    if needle is None:
        needle = [rng.choice(alpha) for alpha in SLOT_ALPHABETS]
    needle = np.asarray(needle, dtype=np.int64)
    at = int(round(depth_percent / 100.0 * hay_len))
    hay = motif_stream(hay_len, rng)
    prompt = np.concatenate([hay[:at], [NEEDLE_MARK], needle, hay[at:], QUERY]).astype(np.int64)
    return NeedleInstance(prompt, needle, at, float(depth_percent), window)


def answer_span(inst: NeedleInstance) -> np.ndarray:
    """Read the planted values back out of the prompt."""
    return inst.tokens[inst.needle_start + 1: inst.needle_start + NEEDLE_LEN]


@dataclass
class SyntheticTask:
    """Sequence generator; every sample is exactly ``seq_len`` tokens.

    ``recall_fraction`` of lm_corpus samples are needle sequences, the rest pattern
    sequences. ``kind='niah'`` yields only needle sequences, ``'copy'`` and
    ``'induction'`` are small memorisable probes.
    """
    kind: str = "lm_corpus"
    seq_len: int = 64
    window: int = 16
    recall_fraction: float = 0.5
    min_period: int = 2
    max_period: int = 6
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.kind in ("lm_corpus", "niah") and self.seq_len < NEEDLE_LEN + len(QUERY) + NEEDLE_VALUES + 2:
            raise ContractError("seq_len too short for a needle sequence")

    def _recall(self, rng) -> np.ndarray:
        # random prompt length, the remainder packed with a fresh pattern sequence after EOS
        longest = self.seq_len - NEEDLE_VALUES - 1
        shortest = min(self.params.get("min_context", 2 * NEEDLE_LEN + len(QUERY)), longest)
        ctx = int(rng.integers(shortest, longest + 1))
        inst = make_niah(ctx, float(rng.uniform(0, 100)), self.window, rng)
        seq = inst.full_sequence
        return np.concatenate([seq, self._pattern(rng)[:self.seq_len - len(seq)]])

    def _copy_pool(self) -> np.ndarray:
        # fixed pool of (random half, repeated) sequences: memorisable by construction
        if not hasattr(self, "_pool"):
            prng = np.random.default_rng(self.params.get("pool_seed", 0))
            half = max(self.seq_len // 2, 1)
            self._pool = np.stack([np.resize(prng.choice(LETTERS, size=half), self.seq_len)
                                   for _ in range(self.params.get("pool_size", 8))])
        return self._pool

    def _pattern(self, rng) -> np.ndarray:
        return motif_stream(self.seq_len, rng, self.min_period, self.max_period)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "niah":
            return self._recall(rng)
        if self.kind == "copy":
            pool = self._copy_pool()
            return pool[int(rng.integers(len(pool)))].copy()
        if self.kind == "induction":
            return self._pattern(rng)
        return self._recall(rng) if rng.random() < self.recall_fraction else self._pattern(rng)

    def batch(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.sample(rng) for _ in range(batch_size)])

    def batches(self, batch_size: int, rng: np.random.Generator):
        while True:
            yield self.batch(batch_size, rng)
