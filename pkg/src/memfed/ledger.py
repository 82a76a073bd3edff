"""Contract stand-in: ordered append-only event log over registry, models and votes.

Writes arrive as transactions. :meth:`Ledger.apply` executes one immediately
(the contract call); :meth:`Ledger.submit` queues it until its confirmation
time and :meth:`Ledger.advance` confirms everything due, in
``(confirm_time, submitted_at, sender, nonce)`` order. State is always
the fold of the event log.
"""
from __future__ import annotations

import enum
import hashlib
import heapq
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

LOG_FORMAT_VERSION = 1


class LedgerError(Exception):
    pass


class Rejected(LedgerError):
    """A transaction failed contract validation; no event was emitted."""


class NotFound(KeyError):
    pass


def cid_of(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ContentStore:
    """Content-addressed blob store (SHA-256 hex CIDs), optionally backed by a directory."""

    def __init__(self, root: str | os.PathLike | None = None):
        self._blobs: dict[str, bytes] = {}
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            for path in sorted(self.root.iterdir()):
                if path.is_file():
                    self._blobs[path.name] = path.read_bytes()

    def put(self, data: bytes) -> str:
        cid = cid_of(data)
        if cid not in self._blobs:
            self._blobs[cid] = bytes(data)
            if self.root is not None:
                (self.root / cid).write_bytes(data)
        return cid

    def get(self, cid: str) -> bytes:
        try:
            return self._blobs[cid]
        except KeyError:
            raise NotFound(cid) from None

    def has(self, cid: str) -> bool:
        return cid in self._blobs

    def intact(self, cid: str) -> bool:
        return self.has(cid) and cid_of(self._blobs[cid]) == cid

    def cids(self) -> list[str]:
        return sorted(self._blobs)

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for cid, data in self._blobs.items():
            (root / cid).write_bytes(data)

    def __len__(self) -> int:
        return len(self._blobs)


class TxKind(str, enum.Enum):
    REGISTER_NODE = "RegisterNode"
    SUBMIT_MODEL = "SubmitModel"
    SUBMIT_VOTE = "SubmitVote"


class EventKind(str, enum.Enum):
    NODE_REGISTERED = "NodeRegistered"
    MODEL_SUBMITTED = "ModelSubmitted"
    VOTE_SUBMITTED = "VoteSubmitted"
    REWARD_PAID = "RewardPaid"


class Role(str, enum.Enum):
    TRAINER = "trainer"
    VALIDATOR = "validator"


class VoterFilter(str, enum.Enum):
    ALL = "all"
    TRAINERS = "trainers"
    VALIDATORS = "validators"


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    sender: str
    payload: dict
    nonce: int
    submitted_at: float


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    kind: EventKind
    payload: dict
    confirmed_at: float

    def canonical_line(self) -> str:
        # fixed field order; payload keys sorted
        return json.dumps(
            {"seq": self.seq, "kind": self.kind.value, "confirmed_at": self.confirmed_at, "payload": self.payload},
            sort_keys=False, separators=(",", ":"), default=_json_default,
        )

    @classmethod
    def from_line(cls, line: str) -> "LedgerEvent":
        doc = json.loads(line)
        if list(doc) != ["seq", "kind", "confirmed_at", "payload"]:
            raise LedgerError(f"malformed event line: fields {list(doc)}")
        return cls(doc["seq"], EventKind(doc["kind"]), doc["payload"], doc["confirmed_at"])


def _json_default(o):
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(f"not serialisable: {type(o)}")


def _canonical_payload(payload: dict) -> dict:
    return json.loads(json.dumps(payload, sort_keys=True, default=_json_default))


@dataclass
class ContractState:
    nodes: dict[str, dict] = field(default_factory=dict)
    models: dict[str, dict] = field(default_factory=dict)
    votes: list[dict] = field(default_factory=list)
    rewards: list[dict] = field(default_factory=list)

    def apply(self, event: LedgerEvent) -> None:
        p = event.payload
        if event.kind is EventKind.NODE_REGISTERED:
            self.nodes[p["address"]] = {"role": p["role"], "registered_at": event.confirmed_at}
        elif event.kind is EventKind.MODEL_SUBMITTED:
            self.models[p["model_cid"]] = {
                "submitter": p["sender"], "manifest_cid": p["manifest_cid"], "parent_cid": p["parent_cid"],
                "meta": p["meta"], "seq": event.seq, "submitted_at": event.confirmed_at,
            }
        elif event.kind is EventKind.VOTE_SUBMITTED:
            self.votes.append({"voter": p["voter"], "model_cid": p["model_cid"], "time": event.confirmed_at})
        elif event.kind is EventKind.REWARD_PAID:
            self.rewards.append(dict(p))

    def latest_votes(self) -> dict[str, str]:
        latest: dict[str, str] = {}
        for v in self.votes:
            latest[v["voter"]] = v["model_cid"]
        return latest

    def tally(self, model_cid: str, voter_filter: VoterFilter | str = VoterFilter.ALL) -> int:
        if model_cid not in self.models:
            raise NotFound(model_cid)
        voter_filter = VoterFilter(voter_filter)
        wanted = {VoterFilter.TRAINERS: Role.TRAINER.value, VoterFilter.VALIDATORS: Role.VALIDATOR.value}.get(voter_filter)
        return sum(
            1 for voter, cid in self.latest_votes().items()
            if cid == model_cid and (wanted is None or self.nodes[voter]["role"] == wanted)
        )

    def snapshot(self) -> dict:
        return json.loads(json.dumps(
            {"nodes": self.nodes, "models": self.models, "votes": self.votes, "rewards": self.rewards},
            sort_keys=True))


def fold_events(events: Iterable[LedgerEvent]) -> ContractState:
    state = ContractState()
    for e in events:
        state.apply(e)
    return state


class Ledger:
    def __init__(self, store: ContentStore | None = None, confirmation_delay: float = 2.0):
        self.store = store if store is not None else ContentStore()
        self.confirmation_delay = confirmation_delay
        self._events: list[LedgerEvent] = []
        self.state = ContractState()
        self._nonces: dict[str, int] = {}
        self._pending: list[tuple] = []
        self.rejections: list[tuple[Transaction, str]] = []

    # -- reads -------------------------------------------------------------
    @property
    def head(self) -> int:
        return len(self._events)

    def events_since(self, cursor: int = 0) -> list[LedgerEvent]:
        if cursor < 0:
            raise ValueError("cursor must be >= 0")
        return list(self._events[cursor:])

    def state_at(self, cursor: int) -> ContractState:
        return fold_events(self._events[:cursor])

    def tally_votes(self, model_cid: str, voter_filter: VoterFilter | str = VoterFilter.ALL) -> int:
        return self.state.tally(model_cid, voter_filter)

    def digest(self) -> str:
        return log_digest(self._events)

    # -- writes ------------------------------------------------------------
    def _emit(self, kind: EventKind, payload: dict, at: float) -> LedgerEvent:
        ev = LedgerEvent(len(self._events), kind, _canonical_payload(payload), at)
        self._events.append(ev)
        self.state.apply(ev)
        return ev

    def _check_nonce(self, tx: Transaction) -> None:
        last = self._nonces.get(tx.sender, -1)
        if tx.nonce <= last:
            raise Rejected(f"nonce {tx.nonce} from {tx.sender} not above {last}")

    def apply(self, tx: Transaction, at: float | None = None) -> LedgerEvent:
        """Execute a transaction now. Raises :class:`Rejected` without side effects."""
        at = tx.submitted_at if at is None else at
        self._check_nonce(tx)
        p = tx.payload
        st = self.state
        if tx.kind is TxKind.REGISTER_NODE:
            if tx.sender in st.nodes:
                raise Rejected(f"address {tx.sender} already registered")
            role = Role(p["role"])
            payload = {"address": tx.sender, "role": role.value}
            kind = EventKind.NODE_REGISTERED
        elif tx.kind is TxKind.SUBMIT_MODEL:
            node = st.nodes.get(tx.sender)
            if node is None:
                raise Rejected(f"unregistered sender {tx.sender}")
            if node["role"] != Role.TRAINER.value:
                raise Rejected(f"{tx.sender} is a validator and cannot submit models")
            for key in ("model_cid", "manifest_cid"):
                if not self.store.has(p[key]):
                    raise Rejected(f"{key} {p[key]} not resolvable in content store")
            if p["model_cid"] in st.models:
                raise Rejected(f"model {p['model_cid']} already submitted")
            parent = p.get("parent_cid")
            if parent is not None and parent not in st.models:
                raise Rejected(f"unknown parent model {parent}")
            payload = {"sender": tx.sender, "model_cid": p["model_cid"], "manifest_cid": p["manifest_cid"],
                       "parent_cid": parent, "meta": p.get("meta", {})}
            kind = EventKind.MODEL_SUBMITTED
        elif tx.kind is TxKind.SUBMIT_VOTE:
            if tx.sender not in st.nodes:
                raise Rejected(f"unregistered voter {tx.sender}")
            if p["model_cid"] not in st.models:
                raise Rejected(f"vote for unknown model {p['model_cid']}")
            payload = {"voter": tx.sender, "model_cid": p["model_cid"]}
            kind = EventKind.VOTE_SUBMITTED
        else:  # pragma: no cover - enum exhaustive
            raise Rejected(f"unknown transaction kind {tx.kind}")
        self._nonces[tx.sender] = tx.nonce
        return self._emit(kind, payload, at)

    def submit(self, tx: Transaction) -> None:
        """Queue ``tx``; it confirms ``confirmation_delay`` after submission."""
        due = tx.submitted_at + self.confirmation_delay
        heapq.heappush(self._pending, (due, tx.submitted_at, tx.sender, tx.nonce, len(self._pending), tx))

    def next_due(self) -> float | None:
        return self._pending[0][0] if self._pending else None

    def advance(self, now: float) -> list[LedgerEvent]:
        """Confirm every queued transaction due at or before ``now``."""
        emitted = []
        while self._pending and self._pending[0][0] <= now:
            due, *_, tx = heapq.heappop(self._pending)
            try:
                emitted.append(self.apply(tx, at=due))
            except Rejected as exc:
                self.rejections.append((tx, str(exc)))
        return emitted

    def pay_reward(self, wallet: str, amount: int, head_cid: str, at: float) -> LedgerEvent:
        return self._emit(EventKind.REWARD_PAID, {"wallet": wallet, "amount": int(amount), "head_cid": head_cid}, at)

    # -- convenience wrappers ---------------------------------------------
    def _next_nonce(self, sender: str) -> int:
        pending = [t[3] for t in self._pending if t[2] == sender]
        return max([self._nonces.get(sender, -1)] + pending) + 1

    def register_node(self, address: str, role: Role | str, at: float = 0.0) -> LedgerEvent:
        tx = Transaction(TxKind.REGISTER_NODE, address, {"role": Role(role).value}, self._next_nonce(address), at)
        return self.apply(tx)

    def submit_model(self, sender: str, model_cid: str, manifest_cid: str, parent_cid: str | None,
                     meta: dict | None = None, at: float = 0.0) -> LedgerEvent:
        tx = Transaction(TxKind.SUBMIT_MODEL, sender,
                         {"model_cid": model_cid, "manifest_cid": manifest_cid, "parent_cid": parent_cid,
                          "meta": meta or {}}, self._next_nonce(sender), at)
        return self.apply(tx)

    def submit_vote(self, voter: str, model_cid: str, at: float = 0.0) -> LedgerEvent:
        tx = Transaction(TxKind.SUBMIT_VOTE, voter, {"model_cid": model_cid}, self._next_nonce(voter), at)
        return self.apply(tx)

    # -- persistence -------------------------------------------------------
    def write_jsonl(self, path) -> str:
        write_event_log(self._events, path)
        return self.digest()


def log_digest(events: Iterable[LedgerEvent]) -> str:
    h = hashlib.sha256()
    for e in events:
        h.update((e.canonical_line() + "\n").encode("utf-8"))
    return h.hexdigest()


def write_event_log(events: Iterable[LedgerEvent], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(e.canonical_line() + "\n")


def read_event_log(path) -> list[LedgerEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                events.append(LedgerEvent.from_line(line))
            except (ValueError, KeyError, LedgerError) as exc:
                raise LedgerError(f"line {lineno}: {exc}") from exc
    return events


def check_event_log(events: list[LedgerEvent]) -> list[str]:
    """Structural problems in a loaded log: gaps in seq, dangling references, parent cycles."""
    problems = []
    state = ContractState()
    for i, e in enumerate(events):
        if e.seq != i:
            problems.append(f"event {i}: seq {e.seq} breaks dense ordering")
        p = e.payload
        if e.kind is EventKind.MODEL_SUBMITTED:
            if p["sender"] not in state.nodes:
                problems.append(f"event {e.seq}: model from unregistered {p['sender']}")
            if p["parent_cid"] is not None and p["parent_cid"] not in state.models:
                problems.append(f"event {e.seq}: parent {p['parent_cid']} not previously submitted")
        elif e.kind is EventKind.VOTE_SUBMITTED:
            if p["model_cid"] not in state.models:
                problems.append(f"event {e.seq}: vote for unknown model {p['model_cid']}")
        state.apply(e)
    return problems
