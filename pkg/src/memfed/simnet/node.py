"""Trainer and validator agents executing a local strategy against the ledger."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._seeding import derive_seed
from ..ledger import ContentStore, ContractState, EventKind, LedgerEvent, Role, Transaction, TxKind, VoterFilter
from ..memdetect import accumulate_counts, exclusion_set
from ..metrics import ScoreBundle
from ..provenance import (Ingredient, Objective, SigningKey, TrainingAssertion, build_manifest,
                          data_summary_blob, salted_data_digest)
from .evaluate import SplitEvaluator
from .toymodel import ToyModel, class_statistics, init_model, train_epochs


@dataclass(frozen=True)
class NodeStrategy:
    role: Role = Role.TRAINER
    epochs_per_round: int = 50
    samples_per_eval: int = 1000
    objective: Objective = Objective.QN
    vote_blend_alpha: float = 1.0
    vote_source_filter: VoterFilter = VoterFilter.ALL
    wake_interval: float = 100.0
    candidate_pool: str = "latest"  # "latest": newest model of each submitter; "all": every model seen

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "vote_source_filter", VoterFilter(self.vote_source_filter))
        if not 0.0 <= self.vote_blend_alpha <= 1.0:
            raise ValueError(f"vote_blend_alpha must lie in [0, 1], got {self.vote_blend_alpha}")
        if self.role is Role.TRAINER and self.epochs_per_round < 1:
            raise ValueError("a trainer needs epochs_per_round >= 1")
        if self.samples_per_eval < 1:
            raise ValueError("samples_per_eval must be >= 1")
        if not self.wake_interval > 0:
            raise ValueError("wake_interval must be positive")
        if self.candidate_pool not in ("latest", "all"):
            raise ValueError(f"candidate_pool must be 'latest' or 'all', got {self.candidate_pool!r}")


@dataclass(frozen=True)
class ToyConfig:
    """Hyperparameters of the prototype generator shared by all trainers."""
    prototypes_per_class: int = 200
    noise_sigma: float = 0.05
    eta: float = 0.004
    init_scale: float = 0.5


@dataclass
class Candidate:
    cid: str
    seq: int
    manifest_cid: str
    submitter: str
    bundle: ScoreBundle


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def select_candidate(candidates: list[Candidate], objective: Objective, alpha: float,
                     state: ContractState, voter_filter: VoterFilter) -> Candidate:
    """Blend of min-max normalised own score and vote tally; lowest wins.

    The tally enters as ``1 - normalised tally`` so that both terms are
    minimised. Ties go to the earliest submission.
    """
    own = _minmax(np.array([c.bundle.objective(objective.value) for c in candidates]))
    tally = _minmax(np.array([state.tally(c.cid, voter_filter) for c in candidates], dtype=np.float64))
    sel = alpha * own + (1.0 - alpha) * (1.0 - tally)
    order = sorted(range(len(candidates)), key=lambda i: (sel[i], candidates[i].seq))
    return candidates[order[0]]


@dataclass
class StepResult:
    transactions: list[Transaction]
    evaluations: list[tuple[str, ScoreBundle]]
    chosen: str | None = None
    excluded_fraction: float | None = None


@dataclass(eq=False)
class NodeAgent:
    """One participant. All mutable state is private to the node; it talks
    to the rest of the federation only through transactions and the store."""
    node_id: str
    strategy: NodeStrategy
    key: SigningKey
    evaluator: SplitEvaluator
    toy: ToyConfig
    seed: int
    cursor: int = 0
    nonce: int = 0
    steps: int = 0
    candidates: list[Candidate] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def address(self) -> str:
        return self.key.address

    def _tx(self, kind: TxKind, payload: dict, at: float) -> Transaction:
        tx = Transaction(kind, self.address, payload, self.nonce, at)
        self.nonce += 1
        return tx

    def registration(self, at: float) -> Transaction:
        return self._tx(TxKind.REGISTER_NODE, {"role": self.strategy.role.value}, at)

    def _evaluate(self, event: LedgerEvent, store: ContentStore) -> Candidate:
        cid = event.payload["model_cid"]
        model = ToyModel.from_bytes(store.get(cid))
        bundle, report = self.evaluator.score_model(
            model, self.strategy.samples_per_eval, derive_seed(self.seed, self.node_id, "eval", cid))
        accumulate_counts(self.counts, report)
        return Candidate(cid, event.seq, event.payload["manifest_cid"], event.payload["sender"], bundle)

    def pool(self) -> list[Candidate]:
        if self.strategy.candidate_pool == "all":
            return list(self.candidates)
        latest: dict[str, Candidate] = {}
        for c in self.candidates:
            latest[c.submitter] = c
        return sorted(latest.values(), key=lambda c: c.seq)

    def _train_split(self):
        ev = self.evaluator
        return ev.train_latents, ev.train_classes, ev.train_ids

    def step(self, events: list[LedgerEvent], state: ContractState, store: ContentStore, now: float) -> StepResult:
        """One wake-up: evaluate unseen submissions, choose, train, submit, vote.

        ``events`` are the confirmed events this node has not seen yet and
        ``state`` the contract state they fold to.
        """
        self.steps += 1
        fresh = []
        for e in events:
            if e.kind is EventKind.MODEL_SUBMITTED:
                cand = self._evaluate(e, store)
                self.candidates.append(cand)
                fresh.append((cand.cid, cand.bundle))
        if events:
            self.cursor = events[-1].seq + 1
        s = self.strategy
        best = None
        pool = self.pool()
        if pool:
            best = select_candidate(pool, s.objective, s.vote_blend_alpha, state, s.vote_source_filter)
        txs: list[Transaction] = []
        excluded_fraction = None
        if s.role is Role.TRAINER:
            tx, excluded_fraction = self._train_and_submit(best, store, now)
            txs.append(tx)
        if best is not None:
            txs.append(self._tx(TxKind.SUBMIT_VOTE, {"model_cid": best.cid}, now))
        return StepResult(txs, fresh, best.cid if best else None, excluded_fraction)

    def _train_and_submit(self, best: Candidate | None, store: ContentStore, now: float):
        s = self.strategy
        latents, classes, ids = self._train_split()
        n_classes = int(classes.max()) + 1
        step_seed = derive_seed(self.seed, self.node_id, "train", self.steps)
        if best is None:
            mu, sd = class_statistics(latents, classes, n_classes)
            model = init_model(n_classes, latents.shape[1], step_seed, self.toy.prototypes_per_class,
                               self.toy.noise_sigma, self.toy.init_scale, mu, sd)
            parent = None
        else:
            model = ToyModel.from_bytes(store.get(best.cid))
            parent = best
        excluded = None
        fraction = None
        if s.objective is Objective.QN_DEDUP:
            drop = exclusion_set(self.counts, self.evaluator.cfg.percentile)
            excluded = np.array([i in drop for i in ids])
            fraction = float(excluded.mean())
        model = train_epochs(model, latents, classes, s.epochs_per_round, step_seed, self.toy.eta, excluded)
        model_cid = store.put(model.to_bytes())
        counts = {int(c): int(n) for c, n in zip(*np.unique(classes, return_counts=True))}
        salt = self.key.sign(b"data-digest-salt")[:16]
        digest = salted_data_digest(salt, [np.asarray(z, "<f8").tobytes() for z in latents])
        summary_cid = store.put(data_summary_blob(counts, digest))
        assertion = TrainingAssertion(self.node_id, s.epochs_per_round, summary_cid, s.objective, now)
        ingredient = None
        if parent is not None:
            ingredient = Ingredient(parent.cid, parent.manifest_cid)
        _, manifest_cid = build_manifest(store, model_cid, ingredient, assertion, self.key, self.node_id)
        meta = {"node_id": self.node_id, "epochs": s.epochs_per_round, "objective": s.objective.value}
        tx = self._tx(TxKind.SUBMIT_MODEL, {"model_cid": model_cid, "manifest_cid": manifest_cid,
                                            "parent_cid": parent.cid if parent else None, "meta": meta}, now)
        return tx, fraction
