"""Signed provenance manifests for model blobs, lineage validation and rewards.

A manifest binds a model CID to at most one parent ingredient (the model it
continued training, plus that model's manifest), a training assertion, and
the author's wallet address. Each manifest carries only its own assertion;
history is reached by walking ingredients back to a genesis manifest.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .ledger import ContentStore, Ledger, NotFound, cid_of

MANIFEST_FORMAT_VERSION = 1
CLAIM_GENERATOR = "memfed/0.1"
TRAINING_LABEL = "memfed.training"
ADDRESSES_LABEL = "crypto.addresses"


class ProvenanceError(Exception):
    pass


class LineageError(ProvenanceError):
    def __init__(self, cid: str, reason: str):
        super().__init__(f"{cid}: {reason}")
        self.cid = cid
        self.reason = reason


class Objective(str, enum.Enum):
    FLD_FID = "fld_fid"
    QN = "qn"
    QN_DEDUP = "qn_dedup"


def wallet_address(public_key: bytes) -> str:
    return "0x" + hashlib.sha256(public_key).hexdigest()[:40]


class SigningKey:
    """Ed25519 key pair derived deterministically from a seed."""

    def __init__(self, seed: bytes | int | str):
        if not isinstance(seed, bytes):
            seed = hashlib.sha256(f"memfed-key:{seed}".encode()).digest()
        self._private = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
        self.public_key = self._private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    @property
    def address(self) -> str:
        return wallet_address(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class TrainingAssertion:
    author: str
    epochs: int
    data_digest: str
    objective: Objective
    timestamp: float

    def __post_init__(self):
        if self.epochs < 0:
            raise ProvenanceError(f"epochs must be >= 0, got {self.epochs}")
        object.__setattr__(self, "objective", Objective(self.objective))

    def to_dict(self) -> dict:
        return {"author": self.author, "epochs": int(self.epochs), "data_digest": self.data_digest,
                "objective": self.objective.value, "timestamp": float(self.timestamp)}


@dataclass(frozen=True)
class Ingredient:
    asset_cid: str
    manifest_cid: str


@dataclass(frozen=True)
class Manifest:
    asset_cid: str
    ingredients: tuple[Ingredient, ...]
    assertions: tuple[TrainingAssertion, ...]
    wallet_address: str
    signer_id: str
    public_key: bytes
    signature: bytes = b""

    def __post_init__(self):
        if len(self.ingredients) > 1:
            raise ProvenanceError("a manifest has at most one parent ingredient")

    @property
    def parent(self) -> Ingredient | None:
        return self.ingredients[0] if self.ingredients else None

    def _body(self) -> dict:
        return {
            "format_version": MANIFEST_FORMAT_VERSION,
            "claim_generator": CLAIM_GENERATOR,
            "asset": {"cid": self.asset_cid},
            "ingredients": [{"cid": i.asset_cid, "manifest": i.manifest_cid, "relationship": "parentOf"}
                            for i in self.ingredients],
            "assertions": [{"label": TRAINING_LABEL, "data": a.to_dict()} for a in self.assertions]
            + [{"label": ADDRESSES_LABEL, "data": {"addresses": [self.wallet_address]}}],
            "signer_id": self.signer_id,
            "public_key": self.public_key.hex(),
        }

    def signing_bytes(self) -> bytes:
        return _canonical(self._body())

    def serialize(self) -> bytes:
        return _canonical({**self._body(), "signature": self.signature.hex()})

    @classmethod
    def parse(cls, data: bytes) -> "Manifest":
        try:
            doc = json.loads(data)
            if doc.get("format_version") != MANIFEST_FORMAT_VERSION:
                raise ProvenanceError(f"unsupported manifest version {doc.get('format_version')}")
            training = [a["data"] for a in doc["assertions"] if a["label"] == TRAINING_LABEL]
            addresses = [a["data"]["addresses"] for a in doc["assertions"] if a["label"] == ADDRESSES_LABEL]
            if len(addresses) != 1 or len(addresses[0]) != 1:
                raise ProvenanceError("manifest must name exactly one wallet address")
            return cls(
                asset_cid=doc["asset"]["cid"],
                ingredients=tuple(Ingredient(i["cid"], i["manifest"]) for i in doc["ingredients"]),
                assertions=tuple(TrainingAssertion(**a) for a in training),
                wallet_address=addresses[0][0],
                signer_id=doc["signer_id"],
                public_key=bytes.fromhex(doc["public_key"]),
                signature=bytes.fromhex(doc["signature"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ProvenanceError(f"malformed manifest: {exc}") from exc


def _canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def data_summary_blob(class_counts: Mapping[int, int], salted_digest: str) -> bytes:
    """Training-data summary: per-class counts and a salted digest, never raw data."""
    return _canonical({"format_version": 1, "class_counts": {str(k): int(v) for k, v in sorted(class_counts.items())},
                       "salted_digest": salted_digest})


def salted_data_digest(salt: bytes, chunks: Sequence[bytes]) -> str:
    h = hashlib.sha256(salt)
    for c in chunks:
        h.update(hashlib.sha256(c).digest())
    return h.hexdigest()


def build_manifest(store: ContentStore, asset_cid: str, parent: Ingredient | None,
                   assertion: TrainingAssertion, key: SigningKey, signer_id: str) -> tuple[Manifest, str]:
    """Sign and store a manifest; returns it with its CID."""
    if not store.has(asset_cid):
        raise ProvenanceError(f"asset {asset_cid} not in content store")
    if parent is not None:
        try:
            parent_manifest = Manifest.parse(store.get(parent.manifest_cid))
        except NotFound:
            raise ProvenanceError(f"parent manifest {parent.manifest_cid} not resolvable") from None
        if parent_manifest.asset_cid != parent.asset_cid:
            raise ProvenanceError(f"parent manifest {parent.manifest_cid} describes {parent_manifest.asset_cid}, "
                                  f"not {parent.asset_cid}")
    unsigned = Manifest(asset_cid, (parent,) if parent else (), (assertion,), key.address, signer_id, key.public_key)
    signed = Manifest(**{**unsigned.__dict__, "signature": key.sign(unsigned.signing_bytes())})
    return signed, store.put(signed.serialize())


def verify_manifest(m: Manifest, public_key: bytes) -> bool:
    return verify_signature(public_key, m.signing_bytes(), m.signature)


@dataclass
class LineageChain:
    entries: list[tuple[Manifest, str]] = field(default_factory=list)  # genesis -> head

    def __len__(self) -> int:
        return len(self.entries)

    def assertions(self) -> list[TrainingAssertion]:
        return [a for m, _ in self.entries for a in m.assertions]


def _load_verified(store: ContentStore, cid: str) -> bytes:
    try:
        data = store.get(cid)
    except NotFound:
        raise LineageError(cid, "blob missing from content store") from None
    if cid_of(data) != cid:
        raise LineageError(cid, "blob content does not match its CID")
    return data


def validate_lineage(store: ContentStore, head_manifest_cid: str,
                     keyring: Mapping[str, bytes] | None = None) -> LineageChain:
    """Walk ingredients from ``head_manifest_cid`` to genesis, checking everything.

    Checks per manifest: blob integrity, parseability, signature against the
    signer's registered key (``keyring``) or the embedded key, wallet bound
    to that key, asset and data-summary blobs intact, and that each
    ingredient names its parent's asset. Raises :class:`LineageError`
    naming the first offending CID.
    """
    chain: list[tuple[Manifest, str]] = []
    seen: set[str] = set()
    cid: str | None = head_manifest_cid
    expected_asset: str | None = None
    while cid is not None:
        if cid in seen:
            raise LineageError(cid, "cycle in ingredient chain")
        seen.add(cid)
        try:
            m = Manifest.parse(_load_verified(store, cid))
        except ProvenanceError as exc:
            if isinstance(exc, LineageError):
                raise
            raise LineageError(cid, str(exc)) from None
        key = m.public_key
        if keyring is not None:
            if m.signer_id not in keyring:
                raise LineageError(cid, f"unknown signer {m.signer_id}")
            key = keyring[m.signer_id]
        if not verify_manifest(m, key):
            raise LineageError(cid, "signature does not verify")
        if wallet_address(key) != m.wallet_address:
            raise LineageError(cid, "wallet address not bound to signing key")
        if expected_asset is not None and m.asset_cid != expected_asset:
            raise LineageError(cid, f"describes asset {m.asset_cid}, child ingredient expects {expected_asset}")
        _load_verified(store, m.asset_cid)
        for a in m.assertions:
            _load_verified(store, a.data_digest)
        chain.append((m, cid))
        parent = m.parent
        cid = parent.manifest_cid if parent else None
        expected_asset = parent.asset_cid if parent else None
    chain.reverse()
    return LineageChain(chain)


def apportion(contributions: Mapping[str, int], pool: int) -> list[tuple[str, int]]:
    """Split ``pool`` proportionally to ``contributions`` by largest remainder.

    Integer arithmetic throughout, so the payouts always sum to ``pool``.
    Remainder ties go to the lexicographically smaller wallet.
    """
    if pool < 0:
        raise ValueError("pool must be >= 0")
    total = sum(contributions.values())
    if total <= 0:
        raise ValueError("contributions must have a positive total")
    wallets = sorted(contributions)
    base = {w: pool * contributions[w] // total for w in wallets}
    rem = {w: pool * contributions[w] % total for w in wallets}
    leftover = pool - sum(base.values())
    for w in sorted(wallets, key=lambda w: (-rem[w], w))[:leftover]:
        base[w] += 1
    return [(w, base[w]) for w in wallets]


def apportion_rewards(store: ContentStore, head_manifest_cid: str, pool: int,
                      ledger: Ledger | None = None, at: float = 0.0,
                      keyring: Mapping[str, bytes] | None = None) -> list[tuple[str, int]]:
    """Epoch-proportional payouts over the validated lineage of a head model."""
    chain = validate_lineage(store, head_manifest_cid, keyring)
    epochs: dict[str, int] = {}
    for m, _ in chain.entries:
        for a in m.assertions:
            epochs[m.wallet_address] = epochs.get(m.wallet_address, 0) + a.epochs
    if sum(epochs.values()) == 0:
        payouts = [(chain.entries[-1][0].wallet_address, pool)]
    else:
        payouts = [(w, amt) for w, amt in apportion(epochs, pool) if w in epochs]
    if ledger is not None:
        head_asset = chain.entries[-1][0].asset_cid
        for w, amt in payouts:
            ledger.pay_reward(w, amt, head_asset, at)
    return payouts
