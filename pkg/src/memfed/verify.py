"""Pairwise match verification over spatial feature grids.

Pipeline per image: 1x1 reduction D -> D/4, GeM pooling over a fixed
multi-scale window set, unit normalisation. A pair is scored by flattening
the window-correlation matrix through a 3-layer MLP, evaluated in both
argument orders so the score is exactly symmetric.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, logit

from ._seeding import rng_for
from .embedding import EmbeddingSpace, SampleRecord, SpaceConfig, get_space

WEIGHTS_FORMAT = "memfed.verifier-weights"
WEIGHTS_VERSION = 1
DEFAULT_WINDOWS = 55
MLP_HIDDEN = (256, 64)

Window = tuple[int, int, int, int]  # (row0, col0, row1, col1), 1-based inclusive


class ShapeError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


def _scale_order(extent: int) -> list[int]:
    main = [extent, math.ceil(2 * extent / 3), math.ceil(extent / 2), math.ceil(extent / 3)]
    order: list[int] = []
    for side in main + list(range(extent, 0, -1)):
        if side >= 1 and side not in order:
            order.append(side)
    return order


def generate_windows(H: int, W: int, target: int = DEFAULT_WINDOWS) -> list[Window]:
    """Deterministic multi-scale overlapping windows, exactly ``target`` of them.

    Square scales of side H, ceil(2H/3), ceil(H/2), ceil(H/3) (then the
    remaining sides, largest first) at stride 1, row-major within a scale.
    If squares run out, remaining rectangles are appended by descending area.
    """
    if H < 1 or W < 1 or target < 1:
        raise ValueError(f"need H, W, target >= 1, got {(H, W, target)}")
    total = (H * (H + 1) // 2) * (W * (W + 1) // 2)
    if target > total:
        raise ValueError(f"only {total} distinct windows exist in a {H}x{W} grid, asked for {target}")
    out: list[Window] = []
    seen: set[Window] = set()

    def add(win: Window) -> bool:
        if win not in seen:
            seen.add(win)
            out.append(win)
        return len(out) == target

    for side in _scale_order(min(H, W)):
        sh, sw = min(side, H), min(side, W)
        for r in range(1, H - sh + 2):
            for c in range(1, W - sw + 2):
                if add((r, c, r + sh - 1, c + sw - 1)):
                    return out
    rects = [
        (r0, c0, r1, c1)
        for r0 in range(1, H + 1) for r1 in range(r0, H + 1)
        for c0 in range(1, W + 1) for c1 in range(c0, W + 1)
    ]
    rects.sort(key=lambda w: (-(w[2] - w[0] + 1) * (w[3] - w[1] + 1), w))
    for win in rects:
        if add(win):
            return out
    raise AssertionError("unreachable: target bounded by rectangle count")


def gem_pool(fmap: np.ndarray, window: Window, p: float = 3.0) -> tuple[np.ndarray, bool]:
    """GeM-pool one window of an (H, W, C) map; returns (unit vector, ok).

    Pools absolute values. An all-zero pooled vector comes back as zeros
    with ``ok=False``.
    """
    if p < 1:
        raise ValueError(f"GeM exponent must be >= 1, got {p}")
    r0, c0, r1, c1 = window
    cells = np.abs(fmap[r0 - 1:r1, c0 - 1:c1, :]).reshape(-1, fmap.shape[-1])
    if cells.size == 0:
        raise ValueError(f"empty window {window}")
    scale = cells.max(axis=0)
    safe = np.where(scale > 0, scale, 1.0)
    pooled = np.mean((cells / safe) ** p, axis=0) ** (1.0 / p) * scale
    norm = np.linalg.norm(pooled)
    if norm == 0:
        return np.zeros_like(pooled), False
    return pooled / norm, True


def correlation_matrix(q: np.ndarray, i: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    if q.ndim != 2 or q.shape != i.shape:
        raise ShapeError(f"pooled feature shapes differ: {q.shape} vs {i.shape}")
    return q @ i.T


@dataclass(eq=False)
class VerifierWeights:
    reduce: np.ndarray                      # (D, D/4)
    mlp: list[tuple[np.ndarray, np.ndarray]]  # [(w, b)] x 3, w shaped (in, out)
    gem_p: float = 3.0
    n_windows: int = DEFAULT_WINDOWS
    _active: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.mlp) != 3:
            raise ShapeError(f"expected 3 MLP layers, got {len(self.mlp)}")
        d, d4 = self.reduce.shape
        if d4 * 4 != d:
            raise ShapeError(f"reduction must map D -> D/4, got {self.reduce.shape}")
        width = self.n_windows ** 2
        for w, b in self.mlp:
            if w.shape[0] != width or b.shape != (w.shape[1],):
                raise ShapeError(f"MLP layer {w.shape}/{b.shape} does not chain from width {width}")
            width = w.shape[1]
        if width != 1:
            raise ShapeError("MLP must end in a single logit")
        if self.gem_p < 1:
            raise ShapeError("gem_p must be >= 1")

    @property
    def depth(self) -> int:
        return self.reduce.shape[0]

    @property
    def active_inputs(self) -> np.ndarray:
        """Flat correlation cells with a nonzero first-layer weight; the rest cannot affect the output."""
        if self._active is None:
            self._active = np.flatnonzero(np.any(self.mlp[0][0] != 0, axis=1))
        return self._active

    def mlp_logits(self, flat: np.ndarray) -> np.ndarray:
        """MLP over rows of flattened correlation matrices -> (n,) logits."""
        return self.mlp_logits_active(flat[:, self.active_inputs])

    def mlp_logits_active(self, x: np.ndarray) -> np.ndarray:
        """Same as :meth:`mlp_logits` given only the ``active_inputs`` columns."""
        (w1, b1), (w2, b2), (w3, b3) = self.mlp
        h = np.maximum(x @ w1[self.active_inputs] + b1, 0.0)
        h = np.maximum(h @ w2 + b2, 0.0)
        return (h @ w3 + b3)[:, 0]

    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        arrs = [("reduce", self.reduce)]
        for k, (w, b) in enumerate(self.mlp):
            arrs += [(f"mlp{k}_w", w), (f"mlp{k}_b", b)]
        return arrs

    def to_bytes(self) -> bytes:
        """Versioned JSON header line, then raw little-endian float64 arrays."""
        arrs = self._arrays()
        header = {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "gem_p": self.gem_p,
            "n_windows": self.n_windows,
            "dtype": "<f8",
            "arrays": [[name, list(a.shape)] for name, a in arrs],
        }
        buf = io.BytesIO()
        buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrs:
            buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "VerifierWeights":
        head, _, body = data.partition(b"\n")
        header = json.loads(head)
        if header.get("format") != WEIGHTS_FORMAT or header.get("version") != WEIGHTS_VERSION:
            raise ShapeError(f"unsupported weight file header: {header.get('format')} v{header.get('version')}")
        arrays = {}
        offset = 0
        for name, shape in header["arrays"]:
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += count * 8
        if offset != len(body):
            raise ShapeError(f"weight file body has {len(body) - offset} trailing bytes")
        mlp = [(arrays[f"mlp{k}_w"], arrays[f"mlp{k}_b"]) for k in range(3)]
        return cls(arrays["reduce"], mlp, float(header["gem_p"]), int(header["n_windows"]))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VerifierWeights":
        return cls.from_bytes(Path(path).read_bytes())


def zero_weights(depth: int = 64, n_windows: int = DEFAULT_WINDOWS) -> VerifierWeights:
    sizes = (n_windows ** 2,) + MLP_HIDDEN + (1,)
    mlp = [(np.zeros((a, b)), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])]
    return VerifierWeights(np.eye(depth)[:, : depth // 4].copy(), mlp, 3.0, n_windows)


def pooled_features(fmaps: np.ndarray, weights: VerifierWeights, windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray]:
    """Batch window descriptors.

    fmaps: (n, H, W, D). Returns (n, |W|, D/4) unit rows and an (n, |W|)
    validity mask; invalid rows are zero.
    """
    fmaps = np.asarray(fmaps, dtype=np.float64)
    if fmaps.ndim == 3:
        fmaps = fmaps[None]
    if fmaps.shape[-1] != weights.depth:
        raise ShapeError(f"feature depth {fmaps.shape[-1]} != verifier depth {weights.depth}")
    p = weights.gem_p
    reduced = np.abs(fmaps @ weights.reduce)
    scale = reduced.max(axis=(1, 2), keepdims=True)
    scale = np.where(scale > 0, scale, 1.0)
    powered = (reduced / scale) ** p
    # summed-area table, zero-padded so window sums are four lookups
    sat = np.zeros((powered.shape[0], powered.shape[1] + 1, powered.shape[2] + 1, powered.shape[3]))
    sat[:, 1:, 1:, :] = powered.cumsum(axis=1).cumsum(axis=2)
    wins = np.asarray(windows)
    r0, c0, r1, c1 = wins[:, 0] - 1, wins[:, 1] - 1, wins[:, 2], wins[:, 3]
    sums = sat[:, r1, c1] - sat[:, r0, c1] - sat[:, r1, c0] + sat[:, r0, c0]
    area = ((r1 - r0) * (c1 - c0)).astype(np.float64)
    means = np.maximum(sums / area[None, :, None], 0.0)
    pooled = means ** (1.0 / p) * scale[:, 0]
    norms = np.linalg.norm(pooled, axis=2, keepdims=True)
    valid = norms[..., 0] > 0
    pooled = np.where(norms > 0, pooled / np.where(norms > 0, norms, 1.0), 0.0)
    return pooled, valid


_GATHER_BUDGET = 1 << 22  # floats per gathered block


class PairVerifier:
    """Scores (query, candidate) latent pairs with a fixed set of weights."""

    def __init__(self, weights: VerifierWeights, space: EmbeddingSpace):
        c = space.config
        if weights.depth != c.depth:
            raise ShapeError(f"verifier depth {weights.depth} != space depth {c.depth}")
        self.weights = weights
        self.space = space
        self.windows = generate_windows(c.height, c.width, weights.n_windows)

    def describe(self, latents: np.ndarray) -> np.ndarray:
        pooled, _ = pooled_features(self.space.feature_maps(latents), self.weights, self.windows)
        return pooled

    def score_descriptors(self, fq: np.ndarray, fi: np.ndarray) -> np.ndarray:
        """fq, fi: (n, |W|, D/4) -> (n,) scores in (0, 1)."""
        if fq.shape != fi.shape:
            raise ShapeError(f"descriptor batches differ: {fq.shape} vs {fi.shape}")
        rows, cols = np.divmod(self.weights.active_inputs, fq.shape[1])
        n = len(fq)
        out = np.empty(n)
        # only the correlation cells the first layer reads: C_qi[a, b] = fq[a].fi[b], C_iq[a, b] = fi[a].fq[b]
        step = max(1, _GATHER_BUDGET // max(1, len(rows) * fq.shape[2]))
        for s in range(0, n, step):
            q, i = fq[s:s + step], fi[s:s + step]
            c_qi = (q[:, rows] * i[:, cols]).sum(axis=2)
            c_iq = (i[:, rows] * q[:, cols]).sum(axis=2)
            out[s:s + step] = expit(self.weights.mlp_logits_active(c_qi) + self.weights.mlp_logits_active(c_iq))
        return out

    def score_latents(self, zq: np.ndarray, zi: np.ndarray) -> np.ndarray:
        zq = np.atleast_2d(zq)
        zi = np.atleast_2d(zi)
        if len(zq) == 0:
            return np.zeros(0)
        return self.score_descriptors(self.describe(zq), self.describe(zi))


@dataclass(frozen=True)
class EmbeddingPairScorer:
    """Fallback verifier for inputs that carry embeddings but no feature maps.

    score = sigmoid(slope * (cos(a, b) - midpoint)). Symmetric by
    construction. The defaults put near-copies (cos >= 0.995 in the synthetic
    worlds) above 0.9 and nearest distinct same-class neighbours
    (cos <= 0.96) below 0.05.
    """
    midpoint: float = 0.98
    slope: float = 200.0

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        if a.shape != b.shape:
            raise ShapeError(f"embedding batches differ: {a.shape} vs {b.shape}")
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        denom = np.where((na > 0) & (nb > 0), na * nb, 1.0)
        cos = np.clip((a * b).sum(axis=1) / denom, -1.0, 1.0)
        return expit(self.slope * (cos - self.midpoint))


def verify_pair(x_q: SampleRecord, x_i: SampleRecord, weights: VerifierWeights,
                world_seed: int = 0, space: EmbeddingSpace | None = None) -> float:
    """Symmetric match score in (0, 1) for two records."""
    if space is None:
        space = get_space(world_seed, SpaceConfig(latent_dim=len(x_q.latent.values), depth=weights.depth))
    verifier = PairVerifier(weights, space)
    return float(verifier.score_latents(x_q.latent.values, x_i.latent.values)[0])


@dataclass(frozen=True)
class ProbeSpec:
    """Synthetic probe population used to place the decision boundary.

    ``copy_noise`` is the per-coordinate latent perturbation a memorised
    reproduction may carry and still count as a copy. Nearest distinct
    neighbours get closer as classes get denser, so ``per_class`` should be
    at least the densest training split the verifier will face.
    """
    classes: int = 10
    per_class: int = 500
    center_scale: float = 1.0
    spread: float = 0.5
    copy_noise: float = 0.05
    quantile: float = 0.01           # lower tail of near-copies
    neighbor_quantile: float = 0.999  # upper tail of distinct neighbours


def _probe(spec: ProbeSpec, space: EmbeddingSpace, seed: int, tag: str):
    """Probe latents, their near-copies, and partner rows (nearest distinct neighbour, other class)."""
    rng = rng_for(seed, "probe", tag)
    L = space.config.latent_dim
    centers = rng.normal(0, spec.center_scale, (spec.classes, L))
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    z = centers[labels] + rng.normal(0, spec.spread, (len(labels), L))
    emb = space.embed(z)
    nb = np.empty(len(z), dtype=int)
    for c in range(spec.classes):
        idx = np.flatnonzero(labels == c)
        d = cdist(emb[idx], emb[idx])
        np.fill_diagonal(d, np.inf)
        nb[idx] = idx[np.argmin(d, axis=1)]
    copies = z + rng.normal(0, spec.copy_noise, z.shape)
    other = rng.integers(0, len(z), len(z))
    other = np.where(labels[other] == labels, (other + spec.per_class) % len(z), other)
    return z, copies, nb, other


def _diag_mean(fq: np.ndarray, fi: np.ndarray) -> np.ndarray:
    return np.einsum("nad,nad->n", fq, fi) / fq.shape[1]


def calibrate_default_weights(world_seed: int, space: EmbeddingSpace | None = None,
                              probe: ProbeSpec = ProbeSpec(), confirm_at: float = 0.8) -> VerifierWeights:
    """Synthesise verifier weights from a seeded probe population.

    The readout is a function of the mean diagonal correlation (per-window
    agreement of the two images). Its boundary sits halfway between the
    lower tail of near-copy pairs and the upper tail of nearest distinct
    same-class neighbours, and maps to ``confirm_at`` exactly.

    Results are memoised per process; treat the returned weights as read-only.
    """
    if space is None:
        space = get_space(world_seed, SpaceConfig())
    return _calibrate(world_seed, space.world_seed, space.config, probe, confirm_at)


@lru_cache(maxsize=32)
def _calibrate(world_seed: int, space_seed: int, space_config: SpaceConfig, probe: ProbeSpec,
               confirm_at: float) -> VerifierWeights:
    space = get_space(space_seed, space_config)
    c = space.config
    rng = rng_for(world_seed, "verifier-reduce")
    reduce = rng.standard_normal((c.depth, c.depth // 4)) / math.sqrt(c.depth)
    weights = zero_weights(c.depth)
    weights.reduce = reduce
    verifier = PairVerifier(weights, space)

    z, copies, nb, _ = _probe(probe, space, world_seed, "fit")
    fz = verifier.describe(z)
    copy_lo = float(np.quantile(_diag_mean(fz, verifier.describe(copies)), probe.quantile))
    nb_hi = float(np.quantile(_diag_mean(fz, fz[nb]), probe.neighbor_quantile))
    if not copy_lo > nb_hi:
        raise CalibrationError(
            f"near-copies (q{probe.quantile:g}={copy_lo:.4f}) overlap distinct neighbours "
            f"(q{probe.neighbor_quantile:g}={nb_hi:.4f}); raise spread or lower copy_noise"
        )
    boundary = 0.5 * (copy_lo + nb_hi)
    half_gap = 0.5 * (copy_lo - nb_hi)
    base = float(logit(confirm_at))
    # neighbours' upper tail lands at 0.05, so the slope is fixed by the gap
    slope = (base - float(logit(0.05))) / (2 * half_gap)

    n_in = weights.n_windows ** 2
    diag = np.arange(weights.n_windows) * (weights.n_windows + 1)
    w1, b1 = np.zeros((n_in, MLP_HIDDEN[0])), np.zeros(MLP_HIDDEN[0])
    w1[diag, 0] = 1.0 / weights.n_windows
    w1[diag, 1] = -1.0 / weights.n_windows
    b1[0], b1[1] = -boundary, boundary
    w2, b2 = np.zeros((MLP_HIDDEN[0], MLP_HIDDEN[1])), np.zeros(MLP_HIDDEN[1])
    w2[0, 0] = w2[1, 1] = 1.0
    w3, b3 = np.zeros((MLP_HIDDEN[1], 1)), np.array([base / 2])
    w3[0, 0], w3[1, 0] = slope, -slope
    weights = VerifierWeights(reduce, [(w1, b1), (w2, b2), (w3, b3)], 3.0, weights.n_windows)

    verifier = PairVerifier(weights, space)
    z, _, _, other = _probe(probe, space, world_seed, "held-out")
    fz = verifier.describe(z)
    dup = verifier.score_descriptors(fz, fz.copy())
    cross = verifier.score_descriptors(fz, fz[other])
    if dup.min() < 0.9 or cross.max() > 0.2:
        raise CalibrationError(
            f"held-out probe out of contract: min duplicate score {dup.min():.4f} (need >= 0.9), "
            f"max cross-class score {cross.max():.4f} (need <= 0.2)"
        )
    return weights
