from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import authpct_oracle, ct_oracle, fid_oracle, kde_oracle, rank_sum_z

from memfed.metrics import (CTReference, GaussianSummary, ScoreBundle, authpct, blended_fld_fid, ct_score,
                            default_k_cells, fid, fld_lite, mann_whitney_z, novelty_term, qn_score, scott_bandwidth)


class TestFormulas:
    def test_qn_hand_value(self):
        assert qn_score(600, 0.9, 0.85, 0.02) == pytest.approx(307.65, abs=1e-9)

    def test_qn_edges(self):
        assert qn_score(123.4, 0.9, 0.9, 0.0) == pytest.approx(61.7, abs=1e-12)
        assert qn_score(0, 1, 1, 1) == 500

    def test_novelty(self):
        assert novelty_term(0.9, 0.85, 0.02) == pytest.approx(15.3, abs=1e-9)

    def test_blend(self):
        assert blended_fld_fid(600, 6) == 600.0
        assert blended_fld_fid(80, 0) == 40
        assert blended_fld_fid(624.22, 6.26) == pytest.approx(625.11, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1e3), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 10))
    def test_qn_monotone(self, f, vc, va, rc, step):
        base = qn_score(f, vc, va, rc)
        assert qn_score(f + step, vc, va, rc) >= base
        assert qn_score(f, min(1, vc + step), va, rc) >= base
        assert qn_score(f, vc, min(1, va + step), rc) >= base
        assert qn_score(f, vc, va, min(1, rc + step)) >= base

    def test_bundle(self):
        b = ScoreBundle(qn_score(10, .9, .5, .1), 10, 3, 50, 1, .5, .9, .1)
        assert b.novelty == pytest.approx(45.0)
        assert b.fld_fid == blended_fld_fid(10, 3)
        assert b.objective("qn_dedup") == b.qn
        with pytest.raises(ValueError):
            b.objective("nope")


class TestFid:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=(300, 256))
        assert fid(x, x) < 1e-6

    def test_point_masses(self):
        v = np.zeros(256)
        v[:4] = [1, 2, 3, 4]
        a = np.zeros((2, 256))
        assert fid(a, a + v) == pytest.approx(30.0, abs=1e-9)

    def test_oracle_500(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(500, 256))
        b = rng.normal(0.1, 1.2, size=(500, 256)) @ (np.eye(256) + 0.05 * rng.normal(size=(256, 256)))
        got = fid(a, b)
        assert got == pytest.approx(fid_oracle(a, b), abs=1e-6)
        assert got == pytest.approx(fid(b, a), abs=1e-6)

    def test_frozen(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(500, 256))
        b = rng.normal(0.1, 1.2, size=(500, 256)) @ (np.eye(256) + 0.05 * rng.normal(size=(256, 256)))
        assert fid(a, b) == pytest.approx(FROZEN_FID_500, abs=1e-6)

    def test_summary_validation(self):
        with pytest.raises(ValueError):
            GaussianSummary.fit(np.ones((1, 3)))
        s = GaussianSummary.fit(np.random.default_rng(2).normal(size=(10, 5)))
        assert np.allclose(s.covariance, s.covariance.T, atol=1e-12)


class TestAuthPct:
    def test_far_is_authentic(self):
        train = np.random.default_rng(0).normal(size=(50, 8))
        assert authpct(train, train[:10] + 1e3) == 100.0

    def test_exact_copy_inauthentic(self):
        train = np.random.default_rng(0).normal(size=(50, 8))
        assert authpct(train, train[:1]) == 0.0

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        train, gen = rng.normal(size=(100, 6)), rng.normal(size=(100, 6))
        gen[:20] = train[:20] + 0.01
        assert authpct(train, gen) == authpct_oracle(train, gen)

    def test_isometry_and_permutation(self):
        rng = np.random.default_rng(4)
        train, gen = rng.normal(size=(80, 5)), rng.normal(size=(60, 5))
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        shift = rng.normal(size=5)
        base = authpct(train, gen)
        assert authpct(train @ q + shift, gen @ q + shift) == base
        assert authpct(train[::-1], gen[rng.permutation(60)]) == base


class TestCT:
    def test_mann_whitney_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.integers(0, 8, 30).astype(float)
        y = rng.integers(2, 10, 30).astype(float)
        assert mann_whitney_z(x, y) == pytest.approx(rank_sum_z(x, y), abs=1e-9)

    def test_generated_equals_test(self):
        rng = np.random.default_rng(6)
        train, test = rng.normal(size=(200, 8)), rng.normal(size=(200, 8))
        assert abs(ct_score(train, test, test, k_cells=1)) < 0.5

    def test_generated_equals_train(self):
        rng = np.random.default_rng(7)
        train, test = rng.normal(size=(200, 8)), rng.normal(size=(200, 8))
        assert ct_score(train, test, train, k_cells=1) < -10

    def test_cell_oracle(self):
        rng = np.random.default_rng(8)
        train, test, gen = rng.normal(size=(60, 4)), rng.normal(size=(40, 4)), rng.normal(size=(40, 4))
        ref = CTReference.build(train, test, 3, seed=0)
        want = ct_oracle(ref.train, ref.labels, test, gen)
        assert ct_score(train, test, gen, 3) == pytest.approx(want, abs=1e-9)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(9)
        train, test, gen = rng.normal(size=(100, 4)), rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
        a = ct_score(train, test, gen, 4)
        b = ct_score(train[rng.permutation(100)], test[::-1], gen[rng.permutation(50)], 4)
        assert a == pytest.approx(b, abs=1e-12)

    def test_defaults(self):
        assert default_k_cells(400) == 10
        assert default_k_cells(1) == 1


class TestFld:
    def test_copies_of_train(self):
        rng = np.random.default_rng(10)
        train, test = rng.normal(size=(200, 8)), rng.normal(size=(200, 8))
        assert fld_lite(train, test, train[:100]) == 100.0

    def test_train_equals_test_ties(self):
        x = np.random.default_rng(11).normal(size=(50, 4))
        assert fld_lite(x, x.copy(), x[:10] + 0.3) == 0.0

    def test_swap_symmetry(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            a, b, g = rng.normal(size=(60, 3)), rng.normal(size=(60, 3)), rng.normal(size=(77, 3))
            p = fld_lite(a, b, g, 0.7)
            q = fld_lite(b, a, g, 0.7)
            assert p + q == pytest.approx(100.0)

    def test_kde_oracle(self):
        rng = np.random.default_rng(12)
        train, test, gen = rng.normal(size=(40, 3)), rng.normal(size=(30, 3)), rng.normal(size=(50, 3))
        h = scott_bandwidth(train)
        want = 100.0 * sum(kde_oracle(g, train, h) > kde_oracle(g, test, h) for g in gen) / len(gen)
        assert fld_lite(train, test, gen) == pytest.approx(want, abs=1e-9)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(13)
        train, test, gen = rng.normal(size=(40, 3)), rng.normal(size=(30, 3)), rng.normal(size=(50, 3))
        assert fld_lite(train, test, gen) == fld_lite(train[::-1], test[rng.permutation(30)], gen[::-1])

    def test_bad_bandwidth(self):
        x = np.ones((3, 2))
        with pytest.raises(ValueError):
            fld_lite(x, x, x, bandwidth=-1)


class TestDuplicateSweep:
    def test_novelty_rises_fid_need_not(self):
        from memfed.memdetect import detect
        rng = np.random.default_rng(14)
        train = rng.normal(size=(400, 16))
        test = rng.normal(size=(400, 16))
        tc = np.zeros(400, dtype=int)
        scorer = lambda ps: np.array([0.95 if p.l2_distance < 1e-9 else 0.3 for p in ps])  # noqa: E731
        prev = -1.0
        for f in (0.0, 0.1, 0.3, 0.6):
            gen = rng.normal(size=(300, 16))
            k = int(f * 300)
            gen[:k] = train[rng.choice(400, k, replace=False)]
            rep = detect(gen, [f"g{i}" for i in range(300)], np.zeros(300, int), train,
                         [f"t{i}" for i in range(400)], tc, scorer)
            nov = novelty_term(rep.v_c, rep.v_a, rep.r_c)
            assert nov > prev
            prev = nov
            assert fid(test, gen) >= 0


# eigh-path value, cross-checked against the sqrtm oracle above
FROZEN_FID_500 = 232.09857401569673
