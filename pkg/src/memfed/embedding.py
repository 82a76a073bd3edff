"""Synthetic ground-truth world, fingerprint embeddings and the contrastive kernel.

Latents stand in for raw image content. A fixed seeded projection followed by
``tanh`` maps a latent to its 256-d fingerprint; a second seeded expansion
produces the H x W x D spatial feature grid consumed by the pair verifier.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ._seeding import rng_for

EMBED_DIM = 256


class DomainError(ValueError):
    """Input outside an operation's mathematical domain."""


class Origin(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"
    GENERATED = "generated"


@dataclass(frozen=True, eq=False)
class Latent:
    values: np.ndarray
    class_id: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or not np.all(np.isfinite(vals)):
            raise DomainError("latent must be a finite 1-d vector")
        if self.class_id < 0:
            raise DomainError(f"class_id must be >= 0, got {self.class_id}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __eq__(self, other):
        if not isinstance(other, Latent):
            return NotImplemented
        return self.class_id == other.class_id and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.class_id, self.values.tobytes()))

    def canonical_bytes(self) -> bytes:
        """Little-endian float64 encoding; used by the privacy scans."""
        return self.values.astype("<f8").tobytes()


@dataclass(frozen=True)
class SampleRecord:
    id: str
    latent: Latent
    origin: Origin
    owner: str | None = None
    aug_seed: int = 0

    @property
    def class_id(self) -> int:
        return self.latent.class_id


@dataclass(frozen=True)
class KernelConfig:
    lam: float = 0.1

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError(f"temperature must be positive, got {self.lam}")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("similarity undefined for zero-norm embedding")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def similarity_kernel(a, b, cfg: KernelConfig = KernelConfig()) -> float:
    """exp(cos(a, b) / lambda)."""
    return math.exp(_cosine(a, b) / cfg.lam)


def contrastive_loss(batch: Sequence[tuple[np.ndarray, np.ndarray]], cfg: KernelConfig = KernelConfig()) -> float:
    """Contrastive objective summed over the batch.

    Each anchor is scored against its augmented view (positive) and the other
    anchors of the batch (negatives). Evaluated in log space, so large
    ``1/lambda`` does not overflow.
    """
    if len(batch) == 0:
        raise DomainError("contrastive loss needs a non-empty batch")
    anchors = np.array([np.asarray(p, dtype=np.float64) for p, _ in batch])
    views = np.array([np.asarray(v, dtype=np.float64) for _, v in batch])
    for arr in (anchors, views):
        norms = np.linalg.norm(arr, axis=1)
        if np.any(norms == 0):
            raise DomainError("similarity undefined for zero-norm embedding")
        arr /= norms[:, None]
    pos = np.clip(np.einsum("ij,ij->i", anchors, views), -1, 1) / cfg.lam
    neg = np.clip(anchors @ anchors.T, -1, 1) / cfg.lam
    total = 0.0
    for i in range(len(batch)):
        others = np.delete(neg[i], i)
        denom = logsumexp(np.concatenate(([pos[i]], others)))
        total -= pos[i] - denom
    return float(total)


@dataclass(frozen=True)
class SpaceConfig:
    latent_dim: int = 32
    height: int = 7
    width: int = 7
    depth: int = 64
    aug_noise: float = 0.05
    # share of the per-cell (spatially varying) component in the feature grid
    local_mix: float = 0.6


@dataclass(eq=False)
class EmbeddingSpace:
    """Seeded maps from latents to fingerprints and spatial feature grids."""

    world_seed: int
    config: SpaceConfig = field(default_factory=SpaceConfig)

    def __post_init__(self):
        c = self.config
        rng = rng_for(self.world_seed, "embedding-projection")
        self._proj = rng.standard_normal((EMBED_DIM, c.latent_dim)) / math.sqrt(c.latent_dim)
        rng = rng_for(self.world_seed, "feature-expansion")
        self._global = rng.standard_normal((c.latent_dim, c.depth)) / math.sqrt(c.latent_dim)
        self._local = rng.standard_normal((c.latent_dim, c.height * c.width * c.depth)) / math.sqrt(c.latent_dim)

    def _check(self, latents: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        if z.shape[1] != self.config.latent_dim:
            raise DomainError(f"latent dim {z.shape[1]} != world dim {self.config.latent_dim}")
        return z

    def embed(self, latents: np.ndarray, aug_seeds: Sequence[int] | None = None) -> np.ndarray:
        """Batch fingerprints, shape (n, 256). ``aug_seeds`` enables augmentation."""
        z = self._check(latents)
        out = np.tanh(z @ self._proj.T)
        if aug_seeds is not None:
            for row, seed in enumerate(aug_seeds):
                out[row] += self.augmentation_noise(int(seed))
        return out

    def augmentation_noise(self, aug_seed: int) -> np.ndarray:
        """Random direction, radius uniform in [0, aug_noise]."""
        rng = rng_for(self.world_seed, "augment", aug_seed)
        direction = rng.standard_normal(EMBED_DIM)
        direction /= np.linalg.norm(direction)
        return direction * (self.config.aug_noise * rng.uniform())

    def feature_maps(self, latents: np.ndarray) -> np.ndarray:
        """Batch feature grids, shape (n, H, W, D); nonnegative like post-ReLU maps."""
        c = self.config
        z = self._check(latents)
        shared = (z @ self._global)[:, None, None, :]
        local = (z @ self._local).reshape(len(z), c.height, c.width, c.depth)
        return np.maximum(shared + c.local_mix * local, 0.0)


@lru_cache(maxsize=32)
def get_space(world_seed: int, config: SpaceConfig = SpaceConfig()) -> EmbeddingSpace:
    return EmbeddingSpace(world_seed, config)


def extract_embedding(record: SampleRecord, world_seed: int, augment: bool = False,
                      config: SpaceConfig | None = None) -> np.ndarray:
    space = get_space(world_seed, config or SpaceConfig(latent_dim=len(record.latent.values)))
    seeds = [record.aug_seed] if augment else None
    return space.embed(record.latent.values, seeds)[0]


def expand_feature_map(record: SampleRecord, world_seed: int, config: SpaceConfig | None = None) -> np.ndarray:
    space = get_space(world_seed, config or SpaceConfig(latent_dim=len(record.latent.values)))
    return space.feature_maps(record.latent.values)[0]
