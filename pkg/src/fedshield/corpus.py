"""Corpus ingestion, vocabulary construction and the per-user split.

Text is UTF-8, one sentence per line; tokenization lowercases and splits on
whitespace. The bundled corpus is split by contiguous line blocks: the first
80% is federated training data, the next 10% the public pre-training split,
the last 10% the held-out evaluation split.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OOV_TOKEN = "<oov>"


def tokenize(line: str) -> list[str]:
    return line.lower().split()


def read_corpus(path: str | Path | None = None) -> list[list[str]]:
    """Tokenized non-empty lines of ``path`` (the bundled corpus by default)."""
    if path is None:
        text = resources.files("fedshield").joinpath("data/corpus.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return [toks for toks in (tokenize(line) for line in text.splitlines()) if toks]


@dataclass(frozen=True)
class Vocabulary:
    """Token list whose index 0 is the out-of-vocabulary class."""

    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least 2 entries (OOV plus one token)")
        if self.tokens[0] != OOV_TOKEN:
            raise ValueError(f"index 0 must be {OOV_TOKEN!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], size: int) -> "Vocabulary":
        """Keep the ``size - 1`` most frequent tokens; ties broken lexicographically."""
        if size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {size}")
        counts = Counter(tok for s in sentences for tok in s if tok != OOV_TOKEN)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls((OOV_TOKEN,) + tuple(tok for tok, _ in ranked[: size - 1]))

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self._index.get(token, 0)

    def encode(self, sentence: Sequence[str]) -> np.ndarray:
        return np.array([self.index(t) for t in sentence], dtype=np.int64)

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in indices]


@dataclass
class LocalDataset:
    """One simulated user's sequences of token indices.

    ``n_examples`` counts next-token prediction events: each sequence of
    length L contributes L - 1 of them.
    """

    user_id: str
    sequences: list[np.ndarray]

    @property
    def n_examples(self) -> int:
        return sum(max(len(s) - 1, 0) for s in self.sequences)

    def validate(self, vocab_size: int) -> None:
        for s in self.sequences:
            if len(s) and (s.min() < 0 or s.max() >= vocab_size):
                raise ValueError(f"token index out of range for vocabulary of size {vocab_size}")


@dataclass
class CorpusSplit:
    vocab: Vocabulary
    users: list[LocalDataset]
    public: LocalDataset
    heldout: LocalDataset


def split_corpus(sentences: list[list[str]], vocab_size: int, n_users: int,
                 user_prefix: str = "sim-user-") -> CorpusSplit:
    """80/10/10 contiguous split; the vocabulary comes from the public split only."""
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    n = len(sentences)
    n_train, n_public = (8 * n) // 10, n // 10
    train = sentences[:n_train]
    public = sentences[n_train:n_train + n_public]
    heldout = sentences[n_train + n_public:]
    if len(train) < n_users:
        raise ValueError(f"corpus has {len(train)} training sentences, fewer than {n_users} users")
    vocab = Vocabulary.build(public, vocab_size)
    bounds = np.linspace(0, len(train), n_users + 1).astype(int)
    users = [
        LocalDataset(f"{user_prefix}{u:05d}", [vocab.encode(s) for s in train[bounds[u]:bounds[u + 1]]])
        for u in range(n_users)
    ]
    return CorpusSplit(
        vocab=vocab,
        users=users,
        public=LocalDataset("public", [vocab.encode(s) for s in public]),
        heldout=LocalDataset("heldout", [vocab.encode(s) for s in heldout]),
    )


def majority_baseline_accuracy(datasets: Sequence[LocalDataset]) -> float:
    """Accuracy of always predicting the most frequent next token of ``datasets``."""
    targets = [int(t) for ds in datasets for s in ds.sequences for t in s[1:]]
    if not targets:
        raise ValueError("no next-token events")
    return Counter(targets).most_common(1)[0][1] / len(targets)
