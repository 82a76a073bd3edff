"""Memorised-sample identification.

Per-class L2 thresholds from nearest intra-class neighbour distances, a
same-class KNN shortlist under the threshold, pairwise verification with a
confirmation cutoff, and count-once bookkeeping.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

REPORT_FORMAT_VERSION = 1


class ThresholdError(ValueError):
    pass


@dataclass(frozen=True)
class ClassThreshold:
    t_l2: float
    mean: float
    stdev: float
    n_pairs: int


ClassThresholds = dict[int, ClassThreshold]


def nearest_intra_class_distances(embeddings: np.ndarray, class_ids: Sequence[int]) -> dict[int, np.ndarray]:
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(class_ids)
    out = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise ThresholdError(f"class {int(c)} has {len(idx)} training sample(s); need at least 2")
        d = cdist(emb[idx], emb[idx])
        np.fill_diagonal(d, np.inf)
        out[int(c)] = d.min(axis=1)
    return out


def intra_class_thresholds(embeddings: np.ndarray, class_ids: Sequence[int], ddof: int = 0) -> ClassThresholds:
    """T = mean - 0.5 * stdev of each class's nearest-neighbour distances.

    ``ddof=0`` is the population standard deviation; pass 1 for the sample one.
    """
    return {c: threshold_from_distances(d, ddof) for c, d in nearest_intra_class_distances(embeddings, class_ids).items()}


def threshold_from_distances(distances: Sequence[float], ddof: int = 0) -> ClassThreshold:
    d = np.asarray(distances, dtype=np.float64)
    if len(d) < 1:
        raise ThresholdError("no distances")
    mean = float(d.mean())
    stdev = float(d.std(ddof=ddof)) if len(d) > ddof else 0.0
    return ClassThreshold(mean - 0.5 * stdev, mean, stdev, len(d))


@dataclass(frozen=True)
class CandidatePair:
    generated_id: str
    train_id: str
    l2_distance: float
    class_id: int


def knn_candidates(gen_emb: np.ndarray, gen_ids: Sequence[str], gen_classes: Sequence[int],
                   train_emb: np.ndarray, train_ids: Sequence[str], train_classes: Sequence[int],
                   thresholds: Mapping[int, ClassThreshold], k: int = 5) -> list[CandidatePair]:
    """Up to ``k`` nearest same-class training samples under the class threshold.

    Output is grouped by generated sample (input order) and sorted by
    distance, ties by train id, so it does not depend on train ordering.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    gen_emb = np.asarray(gen_emb, dtype=np.float64)
    train_emb = np.asarray(train_emb, dtype=np.float64)
    gen_classes = np.asarray(gen_classes)
    train_classes = np.asarray(train_classes)
    train_ids = np.asarray(train_ids, dtype=object)
    per_gen: dict[int, list[CandidatePair]] = {}
    for c in np.unique(gen_classes):
        c = int(c)
        if c not in thresholds:
            continue
        t = thresholds[c].t_l2
        g_idx = np.flatnonzero(gen_classes == c)
        t_idx = np.flatnonzero(train_classes == c)
        if len(t_idx) == 0:
            continue
        # canonical train order so equal distances break ties by id
        t_idx = t_idx[np.argsort(train_ids[t_idx].astype(str), kind="stable")]
        d = cdist(gen_emb[g_idx], train_emb[t_idx])
        kk = min(k, len(t_idx))
        for row, g in enumerate(g_idx):
            order = np.argsort(d[row], kind="stable")[:kk]
            per_gen[g] = [
                CandidatePair(str(gen_ids[g]), str(train_ids[t_idx[j]]), float(d[row, j]), c)
                for j in order if d[row, j] < t
            ]
    return [p for g in sorted(per_gen) for p in per_gen[g]]


@dataclass
class MemorizationReport:
    v_a: float = 0.0
    v_c: float = 0.0
    r_c: float = 0.0
    confirmed: list[tuple[CandidatePair, float]] = field(default_factory=list)
    checked: list[tuple[CandidatePair, float]] = field(default_factory=list)
    per_train_counts: dict[str, int] = field(default_factory=dict)
    per_generated_counts: dict[str, int] = field(default_factory=dict)
    n_generated: int = 0

    @property
    def n_confirmed(self) -> int:
        return len(self.confirmed)

    def to_json(self) -> str:
        def pair(p, s):
            return {**asdict(p), "score": s}
        doc = {
            "format_version": REPORT_FORMAT_VERSION,
            "v_a": self.v_a, "v_c": self.v_c, "r_c": self.r_c,
            "n_generated": self.n_generated,
            "confirmed": [pair(p, s) for p, s in self.confirmed],
            "checked": [pair(p, s) for p, s in self.checked],
            "per_train_counts": dict(sorted(self.per_train_counts.items())),
            "per_generated_counts": dict(sorted(self.per_generated_counts.items())),
        }
        return json.dumps(doc, indent=2)

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["generated_id", "train_id", "score", "l2"])
        for p, s in self.confirmed:
            w.writerow([p.generated_id, p.train_id, repr(float(s)), repr(p.l2_distance)])
        return buf.getvalue()


def _count_once(scored: Sequence[tuple[CandidatePair, float]], threshold: float) -> list[tuple[CandidatePair, float]]:
    passing = [(p, s) for p, s in scored if s >= threshold]
    passing.sort(key=lambda ps: (-ps[1], ps[0].l2_distance, ps[0].generated_id, ps[0].train_id))
    used_gen: set[str] = set()
    used_train: set[str] = set()
    kept = []
    for p, s in passing:
        if p.generated_id in used_gen or p.train_id in used_train:
            continue
        used_gen.add(p.generated_id)
        used_train.add(p.train_id)
        kept.append((p, s))
    return kept


def confirm_matches(candidates: Sequence[CandidatePair],
                    scorer: Callable[[Sequence[CandidatePair]], np.ndarray] | None = None,
                    confirm_threshold: float = 0.8, *,
                    scores: Sequence[float] | None = None) -> MemorizationReport:
    """Score every candidate, confirm at ``confirm_threshold``, count each id once.

    Either ``scorer`` (maps the candidate list to verification scores) or
    precomputed ``scores`` must be given. V/R fields stay zero; see
    :func:`aggregate_report`.
    """
    if not 0 < confirm_threshold < 1:
        raise ValueError(f"confirm_threshold must lie in (0, 1), got {confirm_threshold}")
    if scores is None:
        if scorer is None:
            raise ValueError("need a scorer or precomputed scores")
        scores = scorer(candidates) if len(candidates) else []
    scores = [float(s) for s in scores]
    if len(scores) != len(candidates):
        raise ValueError(f"{len(scores)} scores for {len(candidates)} candidates")
    checked = list(zip(candidates, scores))
    confirmed = _count_once(checked, confirm_threshold)
    return MemorizationReport(
        confirmed=confirmed,
        checked=checked,
        per_train_counts={p.train_id: 1 for p, _ in confirmed},
        per_generated_counts={p.generated_id: 1 for p, _ in confirmed},
    )


def aggregate_report(checked: Sequence[tuple[CandidatePair, float]],
                     confirmed: Sequence[tuple[CandidatePair, float]],
                     n_generated: int) -> MemorizationReport:
    if n_generated < 1:
        raise ValueError("n_generated must be >= 1")
    v_a = float(np.mean([s for _, s in checked])) if checked else 0.0
    v_c = float(np.mean([s for _, s in confirmed])) if confirmed else 0.0
    r_c = len({p.generated_id for p, _ in confirmed}) / n_generated
    return MemorizationReport(
        v_a=v_a, v_c=v_c, r_c=r_c,
        confirmed=list(confirmed), checked=list(checked),
        per_train_counts={p.train_id: 1 for p, _ in confirmed},
        per_generated_counts={p.generated_id: 1 for p, _ in confirmed},
        n_generated=n_generated,
    )


def nearest_rank_percentile(values: Sequence[float], percentile: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return ordered[rank - 1]


def exclusion_set(cumulative_counts: Mapping[str, int], percentile: float = 95.0) -> set[str]:
    """Training ids in the top percentile of min-max normalised memorisation counts.

    Only ids with a normalised count above zero qualify, so all-zero and
    all-equal count maps exclude nothing.
    """
    if not 0 < percentile < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {percentile}")
    if not cumulative_counts:
        return set()
    ids = list(cumulative_counts)
    counts = np.array([cumulative_counts[i] for i in ids], dtype=np.float64)
    lo, hi = counts.min(), counts.max()
    if hi == lo:
        return set()
    norm = (counts - lo) / (hi - lo)
    cutoff = nearest_rank_percentile(norm.tolist(), percentile)
    return {i for i, v in zip(ids, norm) if v > 0 and v >= cutoff}


def accumulate_counts(total: dict[str, int], report: MemorizationReport) -> dict[str, int]:
    for tid, n in report.per_train_counts.items():
        total[tid] = total.get(tid, 0) + n
    return total


def detect(gen_emb, gen_ids, gen_classes, train_emb, train_ids, train_classes,
           scorer, *, k: int = 5, confirm_threshold: float = 0.8,
           thresholds: Mapping[int, ClassThreshold] | None = None) -> MemorizationReport:
    """Full pipeline: thresholds, shortlist, verification, aggregation."""
    if thresholds is None:
        thresholds = intra_class_thresholds(train_emb, train_classes)
    cands = knn_candidates(gen_emb, gen_ids, gen_classes, train_emb, train_ids, train_classes, thresholds, k)
    partial = confirm_matches(cands, scorer, confirm_threshold)
    return aggregate_report(partial.checked, partial.confirmed, len(gen_ids))
