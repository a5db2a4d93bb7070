"""Deterministic text corpus generation and window streaming.

The corpus generator emits text-like sentences from a template grammar: a
fixed Zipf-weighted word inventory, paragraphs that introduce two "names"
and reuse them densely, and occasional numbers.  It is fully determined by
its seed and cheap to produce at megabyte scale.  The structure spans the
whole difficulty range a small character model cares about: within-word
spelling is deterministic, frequent vocabulary is memorizable, name reuse
rewards carrying state across a paragraph, and first occurrences of names
and numbers stay irreducibly hard.

`CorpusStream` cuts a byte corpus into non-overlapping windows of
`seq_len` bytes, prefixes each with BOS, and serves batches in a
per-epoch shuffled order that is reproducible from the seed.
"""

from __future__ import annotations

import numpy as np

from .model import BOS

_TABLE_RNG = np.random.default_rng(np.random.SeedSequence(0xB00C))


def _make_word(rng: np.random.Generator, lo: int, hi: int) -> str:
    return "".join(chr(97 + c) for c in rng.integers(0, 26, size=rng.integers(lo, hi)))


def _make_table(n: int, lo: int = 3, hi: int = 9) -> tuple[str, ...]:
    return tuple(_make_word(_TABLE_RNG, lo, hi) for _ in range(n))


_SUBJECTS = _make_table(48)
_VERBS = _make_table(32, 3, 7)
_OBJECTS = _make_table(48)
_TAILS = _make_table(24, 4, 10)
_CONNECTORS = ("and", "but", "while", "because", "so", "then", "although", "yet")


def _zipf_probs(n: int, exponent: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


_PROBS = {
    "s": _zipf_probs(len(_SUBJECTS)),
    "v": _zipf_probs(len(_VERBS)),
    "o": _zipf_probs(len(_OBJECTS)),
    "t": _zipf_probs(len(_TAILS)),
}


def synth_corpus(n_bytes: int, seed: int) -> bytes:
    """Deterministic text of exactly `n_bytes` bytes (see module docstring)."""
    if n_bytes < 0:
        raise ValueError("n_bytes must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
    pieces: list[str] = []
    total = 0
    while total < n_bytes:
        names = [_make_word(rng, 3, 7).capitalize() for _ in range(2)]
        for _ in range(int(rng.integers(8, 13))):
            subj = (
                names[int(rng.integers(2))]
                if rng.random() < 0.75
                else _SUBJECTS[rng.choice(len(_SUBJECTS), p=_PROBS["s"])]
            )
            obj = (
                names[int(rng.integers(2))]
                if rng.random() < 0.55
                else _OBJECTS[rng.choice(len(_OBJECTS), p=_PROBS["o"])]
            )
            words = [
                subj,
                _VERBS[rng.choice(len(_VERBS), p=_PROBS["v"])],
                obj,
                _TAILS[rng.choice(len(_TAILS), p=_PROBS["t"])],
            ]
            if rng.random() < 0.15:
                words.insert(3, str(rng.integers(10, 10000)))
            if rng.random() < 0.25:
                words += [
                    _CONNECTORS[int(rng.integers(len(_CONNECTORS)))],
                    _VERBS[rng.choice(len(_VERBS), p=_PROBS["v"])],
                    _OBJECTS[rng.choice(len(_OBJECTS), p=_PROBS["o"])],
                ]
            clause = " ".join(words)
            sentence = clause[0].upper() + clause[1:] + ". "
            pieces.append(sentence)
            total += len(sentence)
    return "".join(pieces).encode("ascii")[:n_bytes]


def split_corpus(data: bytes, eval_fraction: float) -> tuple[bytes, bytes]:
    """Deterministic split: the final fraction becomes the held-out slice."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must be in (0, 1)")
    cut = len(data) - int(len(data) * eval_fraction)
    return data[:cut], data[cut:]


class CorpusStream:
    """Shuffled non-overlapping [BOS] + seq_len byte windows, reproducibly."""

    def __init__(self, data: bytes, seq_len: int, seed: int):
        if seq_len < 1:
            raise ValueError("seq_len must be positive")
        if len(data) < seq_len:
            raise ValueError(f"corpus of {len(data)} bytes is shorter than one {seq_len}-byte window")
        n_chunks = len(data) // seq_len
        arr = np.frombuffer(data[: n_chunks * seq_len], dtype=np.uint8)
        self.windows = np.empty((n_chunks, seq_len + 1), dtype=np.int64)
        self.windows[:, 0] = BOS
        self.windows[:, 1:] = arr.reshape(n_chunks, seq_len)
        self.seq_len = seq_len
        self.seed = seed
        self.epochs_completed = 0
        self._cursor = 0
        self._order = self._epoch_order(0)

    @property
    def windows_per_epoch(self) -> int:
        return self.windows.shape[0]

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        return rng.permutation(self.windows_per_epoch)

    def next_batch(self, n_windows: int) -> np.ndarray:
        """(n_windows, seq_len+1) int64 token ids, advancing the epoch walk."""
        if n_windows < 1:
            raise ValueError("n_windows must be positive")
        picks = np.empty(n_windows, dtype=np.int64)
        for i in range(n_windows):
            if self._cursor == self._order.size:
                self.epochs_completed += 1
                self._order = self._epoch_order(self.epochs_completed)
                self._cursor = 0
            picks[i] = self._order[self._cursor]
            self._cursor += 1
        return self.windows[picks]
