"""Toy labeled data: Gaussian clusters around separated unit-vector centers.

Also the shared CSV format (``label,c0,c1,...``) used for datasets and
embedding dumps.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ClassTooSmall, InconsistentWidth, ParseError, RejectionBudgetExceeded
from .rng import DATA, SPLIT, keyed_rng

REJECTION_BUDGET = 100_000


@dataclass
class ToyDataset:
    inputs: np.ndarray  # (n, d_in)
    labels: np.ndarray  # (n,) int
    centers: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not match")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ToyDataset(self.inputs[idx], self.labels[idx], self.centers)


def make_sphere_clusters(
    classes: int,
    per_class: int,
    input_dim: int,
    separation: float,
    spread: float,
    seed: int,
) -> ToyDataset:
    """Sample ``classes`` unit centers with pairwise dot < 1 - separation, then
    ``per_class`` points per center with isotropic Gaussian noise of std ``spread``.

    Centers are accepted one at a time against those already accepted; the
    attempt budget is shared across all centers. Samples are grouped by class.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if per_class <= 0 or input_dim <= 0 or spread < 0:
        raise ValueError("per_class and input_dim must be positive, spread non-negative")
    if input_dim < classes:
        warnings.warn(f"input_dim={input_dim} < classes={classes}: centers will be crowded", stacklevel=2)
    rng = keyed_rng(seed, DATA)
    limit = 1.0 - separation
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < classes:
        attempts += 1
        if attempts > REJECTION_BUDGET:
            raise RejectionBudgetExceeded(
                f"placed {len(centers)}/{classes} centers with separation {separation} in {REJECTION_BUDGET} attempts"
            )
        c = rng.standard_normal(input_dim)
        c /= np.linalg.norm(c)
        if all(float(c @ o) < limit for o in centers):
            centers.append(c)
    centers_arr = np.stack(centers)
    noise = rng.standard_normal((classes, per_class, input_dim)) * spread
    inputs = (centers_arr[:, None, :] + noise).reshape(classes * per_class, input_dim)
    labels = np.repeat(np.arange(classes), per_class)
    return ToyDataset(inputs, labels, centers_arr)


def write_csv(path, inputs, labels) -> None:
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"c{i}" for i in range(inputs.shape[1])])
        for lab, row in zip(labels, inputs):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a ``label,c0..c{d-1}`` file into (inputs, labels)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        width = len(header) - 1
        expected = ["label"] + [f"c{i}" for i in range(width)]
        if width < 1 or [h.strip() for h in header] != expected:
            raise ParseError(f"header must be label,c0..c{{d-1}}, got {','.join(header)}", line=1)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise InconsistentWidth(f"expected {width + 1} columns, got {len(row)}", line=lineno)
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    inputs = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    if not np.all(np.isfinite(inputs)):
        raise ParseError("non-finite value in file")
    return inputs, np.array(labels, dtype=np.int64)


def load_csv(path) -> ToyDataset:
    inputs, labels = read_csv(path)
    return ToyDataset(inputs, labels)


def split(dataset: ToyDataset, train_fraction: float, seed: int) -> tuple[ToyDataset, ToyDataset]:
    """Stratified split; each class is shuffled with its own seeded stream."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_idx, test_idx = [], []
    for cls in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == cls)
        if members.size < 2:
            raise ClassTooSmall(f"class {cls} has {members.size} sample(s); need at least 2")
        order = keyed_rng(seed, SPLIT, int(cls) & 0xFFFFFFFF).permutation(members.size)
        n_train = int(round(train_fraction * members.size))
        n_train = min(max(n_train, 1), members.size - 1)
        train_idx.append(members[order[:n_train]])
        test_idx.append(members[order[n_train:]])
    return dataset.subset(np.concatenate(train_idx)), dataset.subset(np.concatenate(test_idx))
