from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memfed.embedding import (EMBED_DIM, DomainError, KernelConfig, Latent, Origin, SampleRecord, contrastive_loss,
                              expand_feature_map, extract_embedding, get_space, similarity_kernel)


def _rec(values, cid=0, rid="a", aug=0):
    return SampleRecord(rid, Latent(np.asarray(values, dtype=float), cid), Origin.TRAIN, None, aug)


def _brute_loss(batch, lam):
    """Per-term evaluation straight from the definition, no log-space tricks."""
    def d(a, b):
        return math.exp(float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))) / lam)
    total = 0.0
    for i, (phi, phat) in enumerate(batch):
        num = d(phi, phat)
        den = num + sum(d(phi, batch[j][0]) for j in range(len(batch)) if j != i)
        total -= math.log(num / den)
    return total


class TestKernel:
    def test_identical_unit_vectors(self):
        a = np.zeros(EMBED_DIM)
        a[0] = 1
        assert similarity_kernel(a, a, KernelConfig(1.0)) == pytest.approx(2.718281828, abs=1e-9)

    def test_orthogonal(self):
        a, b = np.eye(EMBED_DIM)[:2]
        assert similarity_kernel(a, b, KernelConfig(1.0)) == pytest.approx(1.0, abs=1e-12)

    def test_opposite(self):
        a = np.ones(EMBED_DIM)
        assert similarity_kernel(a, -a, KernelConfig(0.5)) == pytest.approx(0.135335, abs=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(DomainError):
            similarity_kernel(np.zeros(4), np.ones(4))

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(DomainError):
            KernelConfig(0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(-10, 10)), arrays(np.float64, 8, elements=st.floats(-10, 10)),
           st.floats(0.01, 100), st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, a, b, s, t):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        cfg = KernelConfig(0.5)
        ab = similarity_kernel(a, b, cfg)
        assert ab == similarity_kernel(b, a, cfg)
        assert similarity_kernel(s * a, t * b, cfg) == pytest.approx(ab, rel=1e-9)
        assert math.exp(-2) - 1e-12 <= ab <= math.exp(2) + 1e-12


class TestContrastiveLoss:
    def test_single_pair_is_zero(self):
        rng = np.random.default_rng(0)
        assert contrastive_loss([(rng.normal(size=16), rng.normal(size=16))]) == 0.0

    def test_two_orthogonal_hand_value(self):
        e = np.eye(4)
        batch = [(e[0], e[0]), (e[1], e[1])]
        expected = 2 * -math.log(math.e / (math.e + 1))
        assert contrastive_loss(batch, KernelConfig(1.0)) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.626, abs=1e-3)

    def test_random_batch_matches_brute_force(self):
        rng = np.random.default_rng(7)
        batch = [(rng.normal(size=EMBED_DIM), rng.normal(size=EMBED_DIM)) for _ in range(8)]
        assert contrastive_loss(batch, KernelConfig(1.0)) == pytest.approx(_brute_loss(batch, 1.0), abs=1e-12)
        assert contrastive_loss(batch, KernelConfig(0.1)) == pytest.approx(_brute_loss(batch, 0.1), rel=1e-12)

    def test_frozen_value(self):
        rng = np.random.default_rng(7)
        batch = [(rng.normal(size=EMBED_DIM), rng.normal(size=EMBED_DIM)) for _ in range(8)]
        assert contrastive_loss(batch) == pytest.approx(FROZEN_LOSS_8, rel=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(DomainError):
            contrastive_loss([])

    def test_no_overflow_at_small_temperature(self):
        e = np.eye(3)
        assert math.isfinite(contrastive_loss([(e[0], e[0]), (e[1], e[1])], KernelConfig(1e-3)))


# value of the per-term oracle above, lambda = 0.1
FROZEN_LOSS_8 = 18.536806813574


class TestExtraction:
    def test_deterministic(self):
        r = _rec(np.arange(32) / 32.0)
        a = extract_embedding(r, 3)
        assert a.shape == (EMBED_DIM,)
        assert np.array_equal(a, extract_embedding(r, 3))

    def test_equal_latents_equal_embeddings(self):
        z = np.random.default_rng(1).normal(size=32)
        assert np.array_equal(extract_embedding(_rec(z, rid="x"), 0), extract_embedding(_rec(z, rid="y"), 0))

    def test_world_seed_changes_embedding(self):
        z = np.random.default_rng(1).normal(size=32)
        assert not np.array_equal(extract_embedding(_rec(z), 0), extract_embedding(_rec(z), 1))

    def test_augmentation_bounded(self):
        z = np.random.default_rng(2).normal(size=32)
        base = extract_embedding(_rec(z), 0)
        space = get_space(0)
        dists = [np.linalg.norm(extract_embedding(_rec(z, aug=s), 0, augment=True) - base) for s in range(1000)]
        assert max(dists) <= space.config.aug_noise + 1e-12
        assert min(dists) >= 0 and np.std(dists) > 0

    def test_feature_maps(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=32)
        m = expand_feature_map(_rec(z), 0)
        assert m.shape == (7, 7, 64)
        assert np.array_equal(m, expand_feature_map(_rec(z, rid="other"), 0))
        for _ in range(100):
            a, b = rng.normal(size=32), rng.normal(size=32)
            assert np.any(expand_feature_map(_rec(a), 0) != expand_feature_map(_rec(b), 0))

    def test_latent_validation(self):
        with pytest.raises(DomainError):
            Latent(np.array([1.0, np.nan]), 0)
        with pytest.raises(DomainError):
            Latent(np.ones(3), -1)
        with pytest.raises(DomainError):
            get_space(0).embed(np.ones((2, 5)))

    def test_canonical_bytes(self):
        lat = Latent(np.array([1.5, -2.0]), 0)
        assert lat.canonical_bytes() == np.array([1.5, -2.0], dtype="<f8").tobytes()
