"""Cached toy-benchmark runs shared by the trainer and acceptance tests.

Each seed trains on the 80% split of its own toy dataset; diagnostics are
computed on the held-out 20%.
"""

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from mochi.analysis import LabeledEmbeddingSet, linear_probe, same_class_cosine, uniformity_loss
from mochi.config import DatasetConfig, toy_config
from mochi.datasets import make_sphere_clusters, split
from mochi.encoder import encode
from mochi.trainer import run

SEEDS = (0, 1, 2)
VARIANTS = ("baseline", "mochi", "oracle")


def variant_config(variant: str, seed: int, **changes):
    cfg = toy_config(seed=seed, dataset=DatasetConfig(seed=seed))
    if variant == "baseline":
        cfg = replace(cfg, mochi=None)
    elif variant == "oracle":
        cfg = replace(cfg, mochi=None, oracle_training=True)
    elif variant != "mochi":
        raise ValueError(variant)
    return replace(cfg, **changes)


def toy_split(seed: int):
    d = DatasetConfig(seed=seed)
    ds = make_sphere_clusters(d.classes, d.per_class, d.input_dim, d.separation, d.spread, d.seed)
    return split(ds, 0.8, seed)


@dataclass
class RunResult:
    history: list
    state: object
    neg_uniformity: float
    probe_accuracy: float
    same_class_cosine: float


@lru_cache(maxsize=None)
def toy_run(variant: str, seed: int) -> RunResult:
    train, test = toy_split(seed)
    history, state = run(variant_config(variant, seed), train)
    params = state.pair.query
    tr = LabeledEmbeddingSet(encode(params, train.inputs), train.labels)
    te = LabeledEmbeddingSet(encode(params, test.inputs), test.labels)
    return RunResult(
        history,
        state,
        -uniformity_loss(te.features, 2.0),
        linear_probe(tr, te),
        same_class_cosine(te),
    )


def mean_over_seeds(variant: str, attr: str) -> float:
    return float(np.mean([getattr(toy_run(variant, s), attr) for s in SEEDS]))
