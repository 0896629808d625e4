"""Subject-signed endpoint records with newest-record-wins resolution.

The ledger that would normally hold DID records is modeled as one logically
central registry that keeps its whole history. A record is accepted only if
it verifies under the key bound to its DID and its ``recorded_at`` is strictly
later than the current head for that DID.

Public and pair-wise DIDs use the same record format.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from .actor import Context, Node
from .envelope import (
    EnvelopeError,
    KeyDirectory,
    KeyPair,
    PayloadType,
    SignedEnvelope,
    canonicalize,
    seal,
    verify,
)

if TYPE_CHECKING:
    from .network_sim.bus import BusMessage


class DidError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


class BadSignature(DidError):
    pass


class StaleRecord(DidError):
    pass


class NotFound(DidError):
    pass


def pairwise_did(subject_id: str, relying_party: str) -> str:
    return f"did:claimsnet:pw:{subject_id}:{relying_party}"


@dataclass(frozen=True)
class EndpointRecord:
    did: str
    claims_provider_id: str
    endpoint_address: str
    recorded_at: int
    envelope: SignedEnvelope

    @classmethod
    def from_envelope(cls, envelope: SignedEnvelope) -> EndpointRecord:
        if envelope.payload_type != PayloadType.ENDPOINT_RECORD:
            raise BadSignature("not an endpoint record")
        try:
            b = envelope.body()
            return cls(b["did"], b["claims_provider_id"], b["endpoint_address"], b["recorded_at"], envelope)
        except (EnvelopeError, KeyError, TypeError) as exc:
            raise BadSignature(f"unreadable record: {exc}") from exc


def make_endpoint_record(
    subject: KeyPair, did: str, claims_provider_id: str, endpoint_address: str, now: int
) -> EndpointRecord:
    env = seal(
        subject,
        PayloadType.ENDPOINT_RECORD,
        {
            "claims_provider_id": claims_provider_id,
            "did": did,
            "endpoint_address": endpoint_address,
            "recorded_at": now,
        },
        now,
    )
    return EndpointRecord.from_envelope(env)


class DidResolver:
    def __init__(self) -> None:
        self._keys: dict[str, bytes] = {}
        self._heads: dict[str, EndpointRecord] = {}
        self.history: list[dict[str, Any]] = []

    def bind(self, did: str, public_key: bytes) -> None:
        """Bind a DID to the subject key that controls it (first bind wins)."""
        existing = self._keys.get(did)
        if existing is not None and existing != bytes(public_key):
            raise BadSignature(f"{did} is already bound to another key")
        self._keys[did] = bytes(public_key)

    def key_for(self, did: str) -> bytes | None:
        return self._keys.get(did)

    def register(self, record: EndpointRecord) -> DidResolver:
        entry = {"did": record.did, "recorded_at": record.recorded_at}
        try:
            self._check(record)
        except DidError as exc:
            self.history.append({**entry, "accepted": False, "error": exc.code})
            raise
        self._heads[record.did] = record
        self.history.append({**entry, "accepted": True, "envelope": record.envelope.to_wire()})
        return self

    def _check(self, record: EndpointRecord) -> None:
        key = self._keys.get(record.did)
        if key is None:
            raise BadSignature(f"no key bound to {record.did}")
        try:
            good = verify(record.envelope, key)
        except EnvelopeError:
            good = False
        if not good or EndpointRecord.from_envelope(record.envelope) != record:
            raise BadSignature(record.did)
        head = self._heads.get(record.did)
        if head is not None and record.recorded_at <= head.recorded_at:
            raise StaleRecord(f"{record.did}: {record.recorded_at} <= head {head.recorded_at}")

    def resolve(self, did: str) -> EndpointRecord:
        try:
            return self._heads[did]
        except KeyError:
            raise NotFound(did) from None

    def dumps(self) -> bytes:
        return b"".join(canonicalize(h) + b"\n" for h in self.history)


class DidResolverNode(Node):
    kind = "did_resolver"

    def __init__(self, node_id: str, keypair: KeyPair, keys: KeyDirectory, resolver: DidResolver | None = None) -> None:
        super().__init__(node_id, keypair, keys)
        self.resolver = resolver or DidResolver()

    def on_resolve_request(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        corr = body.get("request_id", "")
        try:
            record = self.resolver.resolve(body["did"])
        except (DidError, KeyError) as exc:
            self.reply_error(ctx, msg.from_node, corr, getattr(exc, "code", "NotFound"), str(exc))
            return
        self.send(
            ctx,
            msg.from_node,
            PayloadType.ENDPOINT_RECORD,
            {"record": record.envelope.to_wire(), "request_id": corr},
        )
