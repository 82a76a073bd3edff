"""Synthetic class-structured worlds split across nodes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._seeding import rng_for
from ..embedding import EmbeddingSpace, Latent, Origin, SampleRecord, SpaceConfig, get_space


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    classes: int = 10
    per_class: int = 400
    latent_dim: int = 32
    center_scale: float = 1.0
    spread: float = 0.5
    duplicate_rate: float = 0.0


@dataclass(eq=False)
class WorldDataset:
    config: WorldConfig
    seed: int
    records: list[SampleRecord]
    node_splits: dict[str, dict[str, list[str]]]
    latents: np.ndarray = field(repr=False)
    classes: np.ndarray = field(repr=False)
    ids: np.ndarray = field(repr=False)
    duplicate_of: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {rid: i for i, rid in enumerate(self.ids)}

    @property
    def space(self) -> EmbeddingSpace:
        return get_space(self.seed, SpaceConfig(latent_dim=self.config.latent_dim))

    def indices(self, ids) -> np.ndarray:
        return np.array([self._index[i] for i in ids], dtype=int)

    def split_indices(self, node: str, part: str) -> np.ndarray:
        return self.indices(self.node_splits[node][part])

    def all_indices(self, part: str) -> np.ndarray:
        return self.indices([i for s in self.node_splits.values() for i in s[part]])

    def record(self, rid: str) -> SampleRecord:
        return self.records[self._index[rid]]


def generate_world(config: WorldConfig, seed: int, nodes: list[str]) -> WorldDataset:
    """Seeded class centres plus Gaussian offsets, split equally per class and node.

    Each node receives ``per_class // (2 * len(nodes))`` training and as many
    test samples of every class. Within each node's training split,
    ``duplicate_rate`` of the samples are overwritten with exact copies of
    other same-class training latents of that node.
    """
    if config.classes < 2 or config.per_class < 4:
        raise SplitError("need classes >= 2 and per_class >= 4")
    if not 0 <= config.duplicate_rate < 1:
        raise SplitError("duplicate_rate must lie in [0, 1)")
    if not nodes or len(set(nodes)) != len(nodes):
        raise SplitError("node ids must be non-empty and unique")
    half = config.per_class // (2 * len(nodes))
    if half < 2:
        raise SplitError(f"{config.per_class} samples per class cannot give {len(nodes)} nodes "
                         f">= 2 train and test samples per class")
    rng = rng_for(seed, "world")
    L = config.latent_dim
    centers = rng.normal(0.0, config.center_scale, (config.classes, L))
    latents, classes, owners, origins = [], [], [], []
    for c in range(config.classes):
        z = centers[c] + rng.normal(0.0, config.spread, (config.per_class, L))
        for k, node in enumerate(nodes):
            block = z[k * 2 * half:(k + 1) * 2 * half]
            for j, row in enumerate(block):
                latents.append(row)
                classes.append(c)
                owners.append(node)
                origins.append(Origin.TRAIN if j < half else Origin.TEST)
    latents = np.array(latents)
    classes = np.array(classes)
    ids = np.array([f"s{i:06d}" for i in range(len(latents))])
    duplicate_of: dict[str, str] = {}
    if config.duplicate_rate > 0:
        drng = rng_for(seed, "duplicates")
        owner_arr = np.array(owners, dtype=object)
        is_train = np.array([o is Origin.TRAIN for o in origins])
        for node in nodes:
            train = np.flatnonzero((owner_arr == node) & is_train)
            n_dup = int(round(config.duplicate_rate * len(train)))
            targets = drng.choice(train, n_dup, replace=False)
            sources_pool = np.setdiff1d(train, targets)
            for t in sorted(targets):
                same = sources_pool[classes[sources_pool] == classes[t]]
                src = drng.choice(same)
                latents[t] = latents[src]
                duplicate_of[ids[t]] = ids[src]
    records = [
        SampleRecord(ids[i], Latent(latents[i], int(classes[i])), origins[i], owners[i], aug_seed=i)
        for i in range(len(ids))
    ]
    splits = {
        n: {
            "train": [r.id for r in records if r.owner == n and r.origin is Origin.TRAIN],
            "test": [r.id for r in records if r.owner == n and r.origin is Origin.TEST],
        }
        for n in nodes
    }
    return WorldDataset(config, seed, records, splits, latents, classes, ids, duplicate_of)
