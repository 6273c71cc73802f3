"""FIFO bank of the most recent key embeddings.

The queue is a fixed-capacity ring buffer. Reads go through
:meth:`NegativeQueue.snapshot`, which returns an immutable, oldest-first
:class:`QueueSnapshot` that later pushes cannot touch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import BatchTooLarge, DimensionMismatch, LabelLengthMismatch, MissingLabels


@dataclass(frozen=True)
class QueueEntry:
    feature: np.ndarray
    label: Optional[int]
    insertion_index: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class QueueSnapshot(Sequence):
    """Struct-of-arrays view of queue entries, oldest first.

    ``labels`` is None when the entries are unlabeled. Indexing yields
    :class:`QueueEntry` objects; the batched trainer uses the arrays directly.
    """

    __slots__ = ("features", "labels", "insertion_index")

    def __init__(self, features, labels=None, insertion_index=None):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise DimensionMismatch(f"entries must be a 2-D array, got shape {features.shape}")
        n = features.shape[0]
        if insertion_index is None:
            insertion_index = np.arange(n, dtype=np.int64)
        insertion_index = np.asarray(insertion_index, dtype=np.int64)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise LabelLengthMismatch(f"{labels.shape[0]} labels for {n} entries")
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", None if labels is None else _frozen(labels))
        object.__setattr__(self, "insertion_index", _frozen(insertion_index))

    def __setattr__(self, name, value):
        raise AttributeError("QueueSnapshot is immutable")

    @classmethod
    def from_entries(cls, entries: Sequence[QueueEntry], dim: Optional[int] = None) -> "QueueSnapshot":
        if not entries:
            return cls(np.zeros((0, dim or 0)))
        labels = [e.label for e in entries]
        has = [lab is not None for lab in labels]
        if any(has) and not all(has):
            raise MissingLabels("either every entry carries a label or none does")
        return cls(
            np.stack([np.asarray(e.feature, dtype=np.float64) for e in entries]),
            labels if all(has) else None,
            [e.insertion_index for e in entries],
        )

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            idx = np.arange(len(self))[i]
            return self.take(idx)
        label = None if self.labels is None else int(self.labels[i])
        return QueueEntry(self.features[i], label, int(self.insertion_index[i]))

    def __iter__(self) -> Iterator[QueueEntry]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "QueueSnapshot":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return QueueSnapshot(self.features[idx], labels, self.insertion_index[idx])

    def __repr__(self) -> str:
        return f"QueueSnapshot(n={len(self)}, dim={self.dim}, labeled={self.labeled})"


class NegativeQueue:
    """Ring buffer of at most ``capacity`` unit-norm keys with optional labels.

    Single writer. Labels are tracked per entry; pushing an unlabeled batch
    into a queue holding labeled entries makes the queue unlabeled until those
    entries are evicted.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0:
            raise ValueError(f"queue capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._features = np.zeros((self.capacity, self.dim))
        self._labels = np.full(self.capacity, -1, dtype=np.int64)
        self._has_label = np.zeros(self.capacity, dtype=bool)
        self._index = np.zeros(self.capacity, dtype=np.int64)
        self._head = 0  # slot of the oldest entry
        self._size = 0
        self._pushed = 0

    def __len__(self) -> int:
        return self._size

    @property
    def total_pushed(self) -> int:
        return self._pushed

    def push_batch(self, features, labels=None) -> "NegativeQueue":
        """Append a batch newest-last, evicting the oldest entries on overflow."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[None, :]
        b = feats.shape[0]
        if feats.ndim != 2 or (b and feats.shape[1] != self.dim):
            raise DimensionMismatch(f"expected features of width {self.dim}, got shape {feats.shape}")
        if b > self.capacity:
            raise BatchTooLarge(f"batch of {b} exceeds queue capacity {self.capacity}")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != b:
                raise LabelLengthMismatch(f"{labels.shape[0]} labels for {b} features")
        if b == 0:
            return self
        tail = (self._head + self._size) % self.capacity
        slots = (tail + np.arange(b)) % self.capacity
        self._features[slots] = feats
        if labels is None:
            self._has_label[slots] = False
        else:
            self._labels[slots] = labels
            self._has_label[slots] = True
        self._index[slots] = self._pushed + np.arange(b)
        self._pushed += b
        overflow = max(0, self._size + b - self.capacity)
        self._head = (self._head + overflow) % self.capacity
        self._size = min(self._size + b, self.capacity)
        return self

    def _order(self) -> np.ndarray:
        return (self._head + np.arange(self._size)) % self.capacity

    def snapshot(self) -> QueueSnapshot:
        order = self._order()
        labeled = self._size > 0 and bool(self._has_label[order].all())
        return QueueSnapshot(
            self._features[order],
            self._labels[order] if labeled else None,
            self._index[order],
        )


def oracle_filter(entries: QueueSnapshot, query_label: int) -> QueueSnapshot:
    """Drop the entries sharing ``query_label`` (the class-oracle false negatives)."""
    if not isinstance(entries, QueueSnapshot):
        entries = QueueSnapshot.from_entries(list(entries))
    if entries.labels is None:
        if len(entries) == 0:
            return entries
        raise MissingLabels("oracle filtering needs labeled entries")
    keep = np.flatnonzero(entries.labels != int(query_label))
    return entries.take(keep)
