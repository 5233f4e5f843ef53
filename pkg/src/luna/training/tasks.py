"""Synthetic sequence-classification tasks with exactly computable labels.

majority-token
    Tokens are symbols 0..C-1. A planted class c takes a random share of the
    positions (at least ``margin`` more than any other symbol); the rest are
    uniform. Label: the unique most frequent symbol.

sparse-key-retrieval
    Vocabulary = K key symbols, C value symbols and one query flag. Each of the
    first n-1 positions stores a pair (key, value) with distinct keys and
    distinct values, encoded as two token ids summed at embedding time. The last
    position holds the flag plus one of the stored keys. Label: the value paired
    with that key.

Train and test batches come from disjoint child streams of the task seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from luna.numeric import SeededRng

TASK_KINDS = ("majority-token", "sparse-key-retrieval")
_TRAIN, _TEST = 0, 1


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "majority-token"
    n: int = 64
    n_classes: int = 8
    n_keys: int = 32
    seed: int = 0
    margin: int = 4
    shuffle_labels: bool = False

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "sparse-key-retrieval":
            if self.n - 1 > min(self.n_keys, self.n_classes):
                raise ValueError("sparse-key-retrieval needs n - 1 <= min(n_keys, n_classes) for distinct pairs")
        elif self.n < self.margin + 1:
            raise ValueError("majority-token needs n > margin")

    @property
    def vocab(self) -> int:
        if self.kind == "majority-token":
            return self.n_classes
        return self.n_keys + self.n_classes + 1

    @property
    def slots(self) -> int:
        """Token ids summed per position."""
        return 1 if self.kind == "majority-token" else 2

    def stream(self, split: str) -> SeededRng:
        return SeededRng(self.seed).derive({"train": _TRAIN, "test": _TEST}[split])

    def batch(self, rng: SeededRng, size: int) -> tuple[np.ndarray, np.ndarray]:
        """(tokens, labels): tokens are (size, n, slots) ids, labels (size,)."""
        make = _majority if self.kind == "majority-token" else _retrieval
        tokens, labels = make(self, rng, size)
        if self.shuffle_labels:
            labels = rng.integers(0, self.n_classes, size)
        return tokens, labels

    def fixed_split(self, split: str, size: int) -> tuple[np.ndarray, np.ndarray]:
        return self.batch(self.stream(split), size)


def majority_label(tokens: np.ndarray, n_classes: int) -> np.ndarray:
    """Unique mode of each row, or -1 on a tie."""
    counts = np.stack([np.bincount(row, minlength=n_classes) for row in tokens.reshape(len(tokens), -1)])
    top = np.sort(counts, axis=1)
    label = counts.argmax(axis=1)
    return np.where(top[:, -1] > top[:, -2], label, -1)


def _majority(task: SyntheticTask, rng: SeededRng, size: int):
    C, n = task.n_classes, task.n
    out = np.empty((size, n), dtype=np.int64)
    labels = np.empty(size, dtype=np.int64)
    filled = 0
    while filled < size:
        c = int(rng.integers(0, C))
        share = int(rng.integers(task.margin, n // 2 + 1))
        row = rng.integers(0, C, n)
        pos = rng.generator.permutation(n)[:share]
        row[pos] = c
        lab = majority_label(row[None], C)[0]
        if lab < 0 or np.sort(np.bincount(row, minlength=C))[-2] > np.bincount(row, minlength=C)[lab] - task.margin:
            continue
        out[filled], labels[filled] = row, lab
        filled += 1
    return out[..., None], labels


def retrieval_label(tokens: np.ndarray, n_keys: int) -> np.ndarray:
    """Value id (0-based) stored next to the queried key; tokens as produced by the task."""
    keys, vals = tokens[:, :-1, 0], tokens[:, :-1, 1] - n_keys
    query = tokens[:, -1, 1]
    hit = keys == query[:, None]
    if not np.all(hit.sum(axis=1) == 1):
        raise ValueError("each query key must occur exactly once")
    return vals[hit]


def _retrieval(task: SyntheticTask, rng: SeededRng, size: int):
    K, C, n = task.n_keys, task.n_classes, task.n
    flag = K + C
    tokens = np.empty((size, n, 2), dtype=np.int64)
    for b in range(size):
        keys = rng.generator.permutation(K)[: n - 1]
        vals = rng.generator.permutation(C)[: n - 1]
        tokens[b, :-1, 0] = keys
        tokens[b, :-1, 1] = K + vals
        tokens[b, -1, 0] = flag
        tokens[b, -1, 1] = keys[int(rng.integers(0, n - 1))]
    return tokens, retrieval_label(tokens, K)
