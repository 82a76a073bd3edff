"""Seeded discrete-event loop driving node agents against one ledger."""
from __future__ import annotations

import csv
import hashlib
import heapq
import io
from dataclasses import dataclass, field

import numpy as np

from .._seeding import derive_seed, rng_for
from ..ledger import ContentStore, EventKind, Ledger, Role, Transaction, TxKind
from ..memdetect import exclusion_set
from ..metrics import SCORE_FIELDS, ScoreBundle
from ..provenance import SigningKey, apportion_rewards
from ..verify import PairVerifier, calibrate_default_weights
from .evaluate import MetricsConfig, SplitEvaluator
from .node import NodeAgent, NodeStrategy, ToyConfig
from .toymodel import ToyModel
from .world import WorldConfig, WorldDataset, generate_world

JITTER = 0.25
SCORE_COLUMNS = ["time", "node_id", "model_cid", *SCORE_FIELDS, "scope"]


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    strategy: NodeStrategy
    join_at: float = 0.0
    leave_at: float | None = None


@dataclass(frozen=True)
class Scenario:
    world: WorldConfig
    nodes: tuple[NodeSpec, ...]
    toy: ToyConfig = ToyConfig()
    metrics: MetricsConfig = MetricsConfig()
    confirmation_delay: float = 2.0
    reward_pool: int = 0
    max_submissions: int = 20
    max_time: float = 1e9
    global_eval: bool = True
    global_eval_samples: int = 1000

    def check(self) -> list[str]:
        """Every inconsistency, so a config can be fixed in one pass."""
        problems = []
        ids = [n.node_id for n in self.nodes]
        if not ids:
            problems.append("scenario has no nodes")
        if len(set(ids)) != len(ids):
            problems.append(f"duplicate node ids: {sorted({i for i in ids if ids.count(i) > 1})}")
        if not any(n.strategy.role is Role.TRAINER for n in self.nodes):
            problems.append("at least one trainer is required")
        for n in self.nodes:
            if n.join_at < 0:
                problems.append(f"node {n.node_id}: join_at must be >= 0")
            if n.leave_at is not None and n.leave_at <= n.join_at:
                problems.append(f"node {n.node_id}: leave_at must come after join_at")
            if n.strategy.samples_per_eval < self.world.classes:
                problems.append(f"node {n.node_id}: samples_per_eval below class count")
        if self.max_submissions < 1:
            problems.append("max_submissions must be >= 1")
        if self.confirmation_delay < 0:
            problems.append("confirmation_delay must be >= 0")
        if self.reward_pool < 0:
            problems.append("reward_pool must be >= 0")
        if ids and self.world.per_class // (2 * len(ids)) < 2:
            problems.append(f"per_class={self.world.per_class} too small to split over {len(ids)} nodes")
        return problems


@dataclass(frozen=True)
class ScoreRow:
    time: float
    node_id: str
    model_cid: str
    bundle: ScoreBundle
    scope: str  # "local": a node's own evaluation; "global": observer on the whole world

    def as_list(self) -> list:
        return [self.time, self.node_id, self.model_cid, *(getattr(self.bundle, f) for f in SCORE_FIELDS), self.scope]


@dataclass
class Trace:
    ledger: Ledger
    store: ContentStore
    world: WorldDataset
    scores: list[ScoreRow]
    transactions: list[tuple[float, str, str]]  # (time, node_id, tx kind)
    excluded_fractions: dict[str, list[float]]
    final_exclusions: dict[str, float]
    addresses: dict[str, str]
    rewards: list[tuple[str, int]] = field(default_factory=list)

    def global_rows(self) -> list[ScoreRow]:
        return [r for r in self.scores if r.scope == "global"]

    def scores_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in self.scores:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r.as_list()])
        return buf.getvalue()

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.ledger.digest().encode())
        h.update(self.scores_csv().encode())
        return h.hexdigest()


def node_key(seed: int, node_id: str) -> SigningKey:
    return SigningKey(f"{seed}:{node_id}")


def _first_wake(seed: int, spec: NodeSpec, delay: float) -> float:
    u = rng_for(seed, spec.node_id, "first-wake").uniform(0.0, 1.0)
    return spec.join_at + delay + u * spec.strategy.wake_interval


def _next_wake(seed: int, spec: NodeSpec, t: float, k: int) -> float:
    j = rng_for(seed, spec.node_id, "wake", k).uniform(-JITTER, JITTER)
    return t + spec.strategy.wake_interval * (1.0 + j)


def run_schedule(scenario: Scenario, seed: int, world: WorldDataset | None = None,
                 verifier: PairVerifier | None = None) -> Trace:
    """Run until ``max_submissions`` models have been submitted (or ``max_time``).

    Node wake-ups are processed in (time, node id) order; each executes
    atomically against the events confirmed so far. Every confirmed model is
    also scored by a global observer on the union of all nodes' data.
    """
    problems = scenario.check()
    if problems:
        raise ScenarioError("; ".join(problems))
    specs = {n.node_id: n for n in scenario.nodes}
    order = [n.node_id for n in scenario.nodes]
    if world is None:
        world = generate_world(scenario.world, seed, order)
    space = world.space
    if verifier is None:
        verifier = PairVerifier(calibrate_default_weights(seed, space), space)
    store = ContentStore()
    ledger = Ledger(store, scenario.confirmation_delay)

    agents: dict[str, NodeAgent] = {}
    for nid in order:
        tr = world.split_indices(nid, "train")
        te = world.split_indices(nid, "test")
        ev = SplitEvaluator(space, verifier, world.latents[tr], world.classes[tr], world.ids[tr],
                            world.latents[te], MetricsConfig(**{**scenario.metrics.__dict__, "baselines": False}))
        agents[nid] = NodeAgent(nid, specs[nid].strategy, node_key(seed, nid), ev, scenario.toy,
                                derive_seed(seed, "agent", nid))
    observer = None
    if scenario.global_eval:
        tr = world.all_indices("train")
        te = world.all_indices("test")
        observer = SplitEvaluator(space, verifier, world.latents[tr], world.classes[tr], world.ids[tr],
                                  world.latents[te], scenario.metrics)

    scores: list[ScoreRow] = []
    txlog: list[tuple[float, str, str]] = []
    excluded: dict[str, list[float]] = {nid: [] for nid in order}

    def confirm(now: float) -> None:
        for e in ledger.advance(now):
            if e.kind is EventKind.MODEL_SUBMITTED and observer is not None:
                model = ToyModel.from_bytes(store.get(e.payload["model_cid"]))
                bundle, _ = observer.score_model(model, scenario.global_eval_samples,
                                                 derive_seed(seed, "observer", e.seq))
                scores.append(ScoreRow(e.confirmed_at, e.payload["meta"]["node_id"], e.payload["model_cid"],
                                       bundle, "global"))

    def send(tx: Transaction, nid: str) -> None:
        ledger.submit(tx)
        txlog.append((tx.submitted_at, nid, tx.kind.value))

    # registrations are ordinary transactions submitted at join time
    queue: list[tuple[float, int, str, int]] = []
    for nid in order:
        spec = specs[nid]
        send(agents[nid].registration(spec.join_at), nid)
        heapq.heappush(queue, (_first_wake(seed, spec, scenario.confirmation_delay), order.index(nid), nid, 0))

    submitted = 0
    while queue and submitted < scenario.max_submissions:
        t, rank, nid, k = heapq.heappop(queue)
        if t > scenario.max_time:
            break
        spec = specs[nid]
        if spec.leave_at is not None and t >= spec.leave_at:
            continue
        confirm(t)
        agent = agents[nid]
        if agent.address in ledger.state.nodes:
            res = agent.step(ledger.events_since(agent.cursor), ledger.state, store, t)
            for nid_eval, b in res.evaluations:
                scores.append(ScoreRow(t, nid, nid_eval, b, "local"))
            if res.excluded_fraction is not None:
                excluded[nid].append(res.excluded_fraction)
            for tx in res.transactions:
                if tx.kind is TxKind.SUBMIT_MODEL:
                    if submitted >= scenario.max_submissions:
                        continue
                    submitted += 1
                send(tx, nid)
        heapq.heappush(queue, (_next_wake(seed, spec, t, k), rank, nid, k + 1))

    # drain the queue so every submitted transaction is confirmed
    while ledger.next_due() is not None:
        confirm(ledger.next_due())

    final_excl = {}
    for nid, a in agents.items():
        if a.strategy.objective.value == "qn_dedup" and a.strategy.role is Role.TRAINER:
            final_excl[nid] = len(exclusion_set(a.counts, a.evaluator.cfg.percentile)) / len(a.evaluator.train_ids)

    trace = Trace(ledger, store, world, scores, txlog, excluded, final_excl,
                  {nid: a.address for nid, a in agents.items()})
    if scenario.reward_pool > 0:
        head = _reward_head(ledger)
        if head is not None:
            end = max((e.confirmed_at for e in ledger.events_since(0)), default=0.0)
            manifest = ledger.state.models[head]["manifest_cid"]
            trace.rewards = apportion_rewards(store, manifest, scenario.reward_pool, ledger, at=end)
    return trace


def _reward_head(ledger: Ledger) -> str | None:
    """Most-voted model (latest votes), earliest submission on ties."""
    models = ledger.state.models
    if not models:
        return None
    return min(models, key=lambda cid: (-ledger.tally_votes(cid), models[cid]["seq"]))


def final_means(rows: list[ScoreRow], last: int = 10) -> dict[str, float]:
    """Mean of every score field over the ``last`` rows (submission order)."""
    tail = rows[-last:]
    if not tail:
        return {}
    out = {f: float(np.mean([getattr(r.bundle, f) for r in tail])) for f in SCORE_FIELDS}
    out["novelty"] = float(np.mean([r.bundle.novelty for r in tail]))
    out["fld_fid"] = float(np.mean([r.bundle.fld_fid for r in tail]))
    out["n"] = len(tail)
    return out
