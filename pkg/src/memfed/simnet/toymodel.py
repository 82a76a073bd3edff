"""Prototype generator standing in for a diffusion model.

Each class owns M latent prototypes. Training pulls, sample by sample, the
nearest same-class prototype toward the sample; prototypes that keep being
pulled by a single sample collapse onto it, which is how this model
memorises. Sampling picks a prototype uniformly and adds Gaussian noise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .._seeding import rng_for
from ..embedding import Latent, Origin, SampleRecord

MODEL_FORMAT = "memfed.toy-model"
MODEL_VERSION = 1


@dataclass(frozen=True, eq=False)
class ToyModel:
    prototypes: np.ndarray  # (classes, M, L)
    noise_sigma: float
    trained_epochs: int = 0

    def __post_init__(self):
        if self.prototypes.ndim != 3:
            raise ValueError("prototypes must be shaped (classes, M, L)")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")

    @property
    def classes(self) -> int:
        return self.prototypes.shape[0]

    def to_bytes(self) -> bytes:
        header = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "shape": list(self.prototypes.shape),
                  "noise_sigma": self.noise_sigma, "trained_epochs": self.trained_epochs, "dtype": "<f8"}
        return json.dumps(header, sort_keys=True).encode() + b"\n" + self.prototypes.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ToyModel":
        head, _, body = data.partition(b"\n")
        h = json.loads(head)
        if h.get("format") != MODEL_FORMAT or h.get("version") != MODEL_VERSION:
            raise ValueError(f"not a toy model blob: {h.get('format')} v{h.get('version')}")
        protos = np.frombuffer(body, dtype="<f8").reshape(h["shape"]).copy()
        return cls(protos, float(h["noise_sigma"]), int(h["trained_epochs"]))


def class_statistics(latents: np.ndarray, classes: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean and per-dimension std; the only data-derived input to a fresh model."""
    means = np.stack([latents[classes == c].mean(axis=0) for c in range(n_classes)])
    stds = np.stack([latents[classes == c].std(axis=0) for c in range(n_classes)])
    return means, stds


def init_model(classes: int, latent_dim: int, seed: int, prototypes_per_class: int = 20,
               noise_sigma: float = 0.05, init_scale: float = 1.0,
               class_means: np.ndarray | None = None, class_stds: np.ndarray | None = None) -> ToyModel:
    """Fresh model.

    With class statistics the prototypes are drawn around each class mean
    with ``init_scale`` times the class std (so they start inside the data
    region); without them they are class-agnostic N(0, init_scale^2).
    """
    rng = rng_for(seed, "toy-init")
    shape = (classes, prototypes_per_class, latent_dim)
    if class_means is None:
        protos = rng.normal(0.0, init_scale, shape)
    else:
        stds = np.ones((classes, latent_dim)) if class_stds is None else class_stds
        protos = class_means[:, None, :] + init_scale * stds[:, None, :] * rng.standard_normal(shape)
    return ToyModel(protos, noise_sigma, 0)


def train_epochs(model: ToyModel, latents: np.ndarray, classes: np.ndarray, epochs: int, seed: int,
                 eta: float = 0.1, excluded: np.ndarray | None = None) -> ToyModel:
    """Online nearest-prototype updates, ``p += eta * (x - p)``.

    Samples are visited in a fresh seeded order every epoch; classes are
    independent, so they advance in lockstep. Rows flagged in ``excluded``
    never touch the prototypes.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    latents = np.asarray(latents, dtype=np.float64)
    classes = np.asarray(classes)
    keep = np.ones(len(latents), dtype=bool) if excluded is None else ~np.asarray(excluded, dtype=bool)
    protos = model.prototypes.copy()
    C = model.classes
    per_class = [np.flatnonzero(keep & (classes == c)) for c in range(C)]
    width = max((len(ix) for ix in per_class), default=0)
    rng = rng_for(seed, "toy-train", model.trained_epochs)
    rows = np.arange(C)
    sq = np.einsum("cml,cml->cm", protos, protos)
    if width:
        for _ in range(epochs):
            # (C, width) schedule of sample indices, -1 = idle slot
            sched = np.full((C, width), -1)
            for c, ix in enumerate(per_class):
                sched[c, :len(ix)] = rng.permutation(ix)
            for step in range(width):
                col = sched[:, step]
                x = latents[col]                            # idle rows read a dummy sample
                # argmin_m |p_m - x|^2 == argmin_m (|p_m|^2 - 2 p_m.x)
                score = sq - 2.0 * np.matmul(protos, x[:, :, None])[:, :, 0]
                j = score.argmin(axis=1)
                act = col >= 0
                r, jj = rows[act], j[act]
                protos[r, jj] += eta * (x[act] - protos[r, jj])
                sq[r, jj] = np.einsum("al,al->a", protos[r, jj], protos[r, jj])
    return ToyModel(protos, model.noise_sigma, model.trained_epochs + epochs)


def class_counts(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def generate_samples(model: ToyModel, n: int, seed: int, prefix: str = "g") -> tuple[np.ndarray, np.ndarray, list[str]]:
    """``n`` samples spread as evenly as possible over classes.

    Returns (latents, class ids, sample ids).
    """
    if n < model.classes:
        raise ValueError(f"need n >= classes ({model.classes}), got {n}")
    rng = rng_for(seed, "toy-sample")
    M = model.prototypes.shape[1]
    counts = class_counts(n, model.classes)
    cls = np.repeat(np.arange(model.classes), counts)
    pick = rng.integers(0, M, n)
    z = model.prototypes[cls, pick] + rng.normal(0.0, model.noise_sigma, (n, model.prototypes.shape[2]))
    ids = [f"{prefix}{i:05d}" for i in range(n)]
    return z, cls, ids


def as_records(latents: np.ndarray, classes: np.ndarray, ids: list[str]) -> list[SampleRecord]:
    return [SampleRecord(i, Latent(z, int(c)), Origin.GENERATED, None, k)
            for k, (z, c, i) in enumerate(zip(latents, classes, ids))]
