"""Scoring a model against one data split (a node's local data or the whole world)."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..embedding import EmbeddingSpace
from ..memdetect import MemorizationReport, aggregate_report, confirm_matches, intra_class_thresholds, knn_candidates
from ..metrics import CTReference, GaussianSummary, ScoreBundle, _nn_within, authpct, fld_lite, frechet_distance, qn_score
from ..verify import PairVerifier
from .toymodel import ToyModel, generate_samples


@dataclass(frozen=True)
class MetricsConfig:
    knn_k: int = 5
    confirm_threshold: float = 0.8
    percentile: float = 95.0
    k_cells: int | None = None
    bandwidth: float | None = None
    baselines: bool = True  # AuthPct and C_T; FLD is always computed


class SplitEvaluator:
    """Caches everything about a fixed train/test split that scoring reuses."""

    def __init__(self, space: EmbeddingSpace, verifier: PairVerifier, train_latents: np.ndarray,
                 train_classes: np.ndarray, train_ids, test_latents: np.ndarray, cfg: MetricsConfig):
        self.space = space
        self.verifier = verifier
        self.cfg = cfg
        self.train_latents = train_latents
        self.train_classes = np.asarray(train_classes)
        self.train_ids = list(train_ids)
        self.train_emb = space.embed(train_latents)
        self.test_emb = space.embed(test_latents)
        self.thresholds = intra_class_thresholds(self.train_emb, self.train_classes)
        self._id_row = {t: i for i, t in enumerate(self.train_ids)}

    @cached_property
    def test_summary(self) -> GaussianSummary:
        return GaussianSummary.fit(self.test_emb)

    @cached_property
    def _train_nn(self) -> np.ndarray:
        return _nn_within(self.train_emb)

    @cached_property
    def _ct_ref(self) -> CTReference:
        return CTReference.build(self.train_emb, self.test_emb, self.cfg.k_cells)

    @cached_property
    def _train_desc(self) -> np.ndarray:
        return self.verifier.describe(self.train_latents)

    def memorization(self, gen_latents, gen_classes, gen_ids, gen_emb) -> MemorizationReport:
        cands = knn_candidates(gen_emb, gen_ids, gen_classes, self.train_emb, self.train_ids,
                               self.train_classes, self.thresholds, self.cfg.knn_k)
        if cands:
            gi = {g: i for i, g in enumerate(gen_ids)}
            g_rows = np.array([gi[p.generated_id] for p in cands])
            t_rows = np.array([self._id_row[p.train_id] for p in cands])
            uniq, inv = np.unique(g_rows, return_inverse=True)
            g_desc = self.verifier.describe(gen_latents[uniq])[inv]
            scores = self.verifier.score_descriptors(g_desc, self._train_desc[t_rows])
        else:
            scores = []
        partial = confirm_matches(cands, confirm_threshold=self.cfg.confirm_threshold, scores=scores)
        return aggregate_report(partial.checked, partial.confirmed, len(gen_ids))

    def score_samples(self, gen_latents, gen_classes, gen_ids) -> tuple[ScoreBundle, MemorizationReport]:
        gen_emb = self.space.embed(gen_latents)
        rep = self.memorization(gen_latents, gen_classes, gen_ids, gen_emb)
        f = frechet_distance(self.test_summary, GaussianSummary.fit(gen_emb))
        fld = fld_lite(self.train_emb, self.test_emb, gen_emb, self.cfg.bandwidth)
        if self.cfg.baselines:
            ap = authpct(self.train_emb, gen_emb, self._train_nn)
            ct = self._ct_ref.score(gen_emb)
        else:
            ap = ct = float("nan")
        bundle = ScoreBundle(qn_score(f, rep.v_c, rep.v_a, rep.r_c), f, fld, ap, ct, rep.v_a, rep.v_c, rep.r_c)
        return bundle, rep

    def score_model(self, model: ToyModel, n: int, seed: int) -> tuple[ScoreBundle, MemorizationReport]:
        z, cls, ids = generate_samples(model, n, seed)
        return self.score_samples(z, cls, ids)
