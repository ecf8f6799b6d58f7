"""Word-level vocabulary, task-prefix encoding, padding and masks."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
DEFAULT_MAX_LEN = 50

PARAPHRASE_PREFIX = "paraphrase: "
WELLFORMED_PREFIX = "query wellformedness: "


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Immutable token <-> id bijection with PAD/BOS/EOS/UNK fixed at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._itos = tuple(tokens)
        self._stoi = {t: i for i, t in enumerate(self._itos)}

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def __hash__(self) -> int:
        return hash(self._itos)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        if 0 <= idx < len(self._itos):
            return self._itos[idx]
        return RESERVED[UNK]

    def digest(self) -> str:
        """Stable sha256 of the token list; used to bind checkpoints to a vocabulary."""
        return hashlib.sha256("\n".join(self._itos).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise ValueError(f"{path}: first four lines must be {RESERVED}")
        return cls(lines)


def build_vocab(corpus: Iterable[str], max_size: int = 16000, extra: Iterable[str] = ()) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens; ties broken lexicographically.

    ``extra`` tokens (task prefixes, typically) are always kept and count
    against the budget.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    forced = [t for t in dict.fromkeys(tok for e in extra for tok in tokenize(e)) if t not in RESERVED]
    for t in forced:
        counts.pop(t, None)
    budget = max(0, max_size - len(RESERVED) - len(forced))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:budget]
    return Vocabulary(list(RESERVED) + forced + [t for t, _ in ranked])


@dataclass
class SequenceBatch:
    """Padded id matrix with its EOS-inclusive mask."""

    ids: np.ndarray  # [batch, max_len] int64
    mask: np.ndarray  # [batch, max_len] float64
    lengths: np.ndarray  # [batch] int64, tokens up to and including EOS

    def __len__(self) -> int:
        return self.ids.shape[0]

    def row(self, i: int) -> "SequenceBatch":
        return SequenceBatch(self.ids[i : i + 1], self.mask[i : i + 1], self.lengths[i : i + 1])

    def take(self, rows) -> "SequenceBatch":
        rows = np.asarray(rows)
        return SequenceBatch(self.ids[rows], self.mask[rows], self.lengths[rows])

    def trim(self) -> "SequenceBatch":
        """Drop all-padding columns on the right."""
        width = max(1, int(self.lengths.max()))
        return SequenceBatch(self.ids[:, :width], self.mask[:, :width], self.lengths)


def encode_ids(text: str, vocab: Vocabulary, prefix: str = "", max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    ids = [vocab.id(t) for t in tokenize(prefix) + tokenize(text)]
    return ids[: max_len - 1] + [EOS]


def encode(text: str, prefix: str = "", max_len: int = DEFAULT_MAX_LEN, vocab: Vocabulary | None = None) -> SequenceBatch:
    """One padded row: prefix + text, truncated to ``max_len - 1``, then EOS."""
    if vocab is None:
        raise ValueError("encode requires a vocabulary")
    return encode_batch([text], vocab, prefix=prefix, max_len=max_len)


def encode_batch(texts: Sequence[str], vocab: Vocabulary, prefix: str = "", max_len: int = DEFAULT_MAX_LEN) -> SequenceBatch:
    rows = [encode_ids(t, vocab, prefix, max_len) for t in texts]
    return pad_rows(rows, max_len)


def pad_rows(rows: Sequence[Sequence[int]], max_len: int = DEFAULT_MAX_LEN) -> SequenceBatch:
    n = len(rows)
    ids = np.full((n, max_len), PAD, dtype=np.int64)
    mask = np.zeros((n, max_len))
    lengths = np.zeros(n, dtype=np.int64)
    for i, row in enumerate(rows):
        row = list(row)[:max_len]
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
        lengths[i] = len(row)
    return SequenceBatch(ids, mask, lengths)


TASK_PREFIXES = (PARAPHRASE_PREFIX, WELLFORMED_PREFIX)


def decode(ids: Iterable[int], vocab: Vocabulary, prefixes: Sequence[str] = TASK_PREFIXES) -> str:
    """Join tokens up to the first EOS, skipping PAD/BOS and a leading task prefix."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.token(i))
    for prefix in prefixes:
        skip = tokenize(prefix)
        if skip and out[: len(skip)] == skip:
            out = out[len(skip) :]
            break
    return " ".join(out)


def unk_rate(texts: Iterable[str], vocab: Vocabulary) -> float:
    toks = [t for text in texts for t in tokenize(text)]
    if not toks:
        return 0.0
    return sum(t not in vocab for t in toks) / len(toks)
