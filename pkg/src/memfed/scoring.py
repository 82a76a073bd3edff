"""Scoring standalone embedding sets (no simulation, no feature maps)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embio import EmbeddingSet
from .memdetect import MemorizationReport, detect
from .metrics import ScoreBundle, authpct, ct_score, fid, fld_lite, qn_score
from .verify import EmbeddingPairScorer


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ScoreOptions:
    knn_k: int = 5
    confirm_threshold: float = 0.8
    k_cells: int | None = None
    bandwidth: float | None = None
    baselines: bool = True
    seed: int = 0


def score_sets(train: EmbeddingSet, test: EmbeddingSet, generated: EmbeddingSet,
               opts: ScoreOptions = ScoreOptions(),
               scorer: EmbeddingPairScorer = EmbeddingPairScorer()) -> tuple[ScoreBundle, MemorizationReport]:
    """Q-N score plus the baselines for one generated set against train/test."""
    dims = {train.dim, test.dim, generated.dim}
    if len(dims) != 1:
        raise DimensionMismatch(f"embedding dims differ: train {train.dim}, test {test.dim}, "
                                f"generated {generated.dim}")
    t_row = {t: i for i, t in enumerate(train.ids)}
    g_row = {g: i for i, g in enumerate(generated.ids)}

    def verify(pairs):
        if not pairs:
            return np.zeros(0)
        a = generated.embeddings[[g_row[p.generated_id] for p in pairs]]
        b = train.embeddings[[t_row[p.train_id] for p in pairs]]
        return scorer(a, b)

    rep = detect(generated.embeddings, generated.ids, generated.classes, train.embeddings, train.ids,
                 train.classes, verify, k=opts.knn_k, confirm_threshold=opts.confirm_threshold)
    f = fid(test.embeddings, generated.embeddings)
    fld = fld_lite(train.embeddings, test.embeddings, generated.embeddings, opts.bandwidth)
    if opts.baselines:
        ap = authpct(train.embeddings, generated.embeddings)
        ct = ct_score(train.embeddings, test.embeddings, generated.embeddings, opts.k_cells, opts.seed)
    else:
        ap = ct = float("nan")
    return ScoreBundle(qn_score(f, rep.v_c, rep.v_a, rep.r_c), f, fld, ap, ct, rep.v_a, rep.v_c, rep.r_c), rep
