"""VASP node: onboarding, claims gathering, key verification, Travel Rule
exchange with countersigned receipts, and transfer finalization.

Per transfer the originating VASP runs::

    Initiated -> ClaimsGathered -> CounterpartyVerified -> InfoExchanged -> Finalized

and may drop to ``Rejected(reason)`` from any non-final state. The
beneficiary VASP runs the same machine for its own customer once it receives
the transfer intent. Packets are only sent from CounterpartyVerified.

Every delivered packet is covered by a :class:`NonRepudiationReceipt`: the
sender signs ``(transfer_id, hash(packet))`` and the receiver countersigns the
hash of that signature. All of it is retained in both audit logs.
"""

from __future__ import annotations

import threading
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any

from .actor import Context, Node
from .audit_log import AuditLog
from .claims_provider import AccessToken, ClaimSet, make_credential
from .envelope import (
    EnvelopeError,
    KeyDirectory,
    KeyPair,
    PayloadType,
    SignedEnvelope,
    b64d,
    digest,
    seal,
    verify,
)
from .key_registry import (
    AttestationExpired as _RegistryExpired,
    CustodyAttestation,
    KeyOwnershipAttestation,
    KeyRegistryError,
    UntrustedRoot as _RegistryUntrusted,
    check_custody,
    check_ownership,
    evidence_from_wire,
    evidence_to_wire,
)

if TYPE_CHECKING:
    from .network_sim.bus import BusMessage

LOCATOR_KINDS = (
    "geographic_address",
    "national_identity_number",
    "customer_identification_number",
    "date_and_place_of_birth",
)
FIELD_GROUPS = (
    "originator_name",
    "originator_account",
    "originator_locator",
    "beneficiary_name",
    "beneficiary_account",
)

DEFAULT_CP_TIMEOUT_MS = 10_000
DEFAULT_RECEIPT_TIMEOUT_MS = 10_000
DEFAULT_READY_TIMEOUT_MS = 30_000


class VaspError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


class UnknownCustomer(VaspError):
    pass


class InvalidAmount(VaspError, ValueError):
    pass


class InvalidTransition(VaspError):
    pass


class ClaimsUnavailable(VaspError):
    pass


class SignatureInvalid(VaspError):
    pass


class OwnershipUnattested(VaspError):
    pass


class UntrustedRoot(VaspError):
    pass


class AttestationExpired(VaspError):
    pass


class IncompletePacket(VaspError):
    def __init__(self, missing: Sequence[str]) -> None:
        self.missing = tuple(missing)
        super().__init__("missing field groups: " + ", ".join(self.missing))


class ReceiptMissing(VaspError):
    pass


class ReceiptInvalid(VaspError):
    pass


class PolicyBlocked(VaspError):
    pass


class InsufficientFunds(VaspError):
    pass


class ProtocolViolation(VaspError):
    pass


# ---------------------------------------------------------------------------
# Travel Rule packet
# ---------------------------------------------------------------------------


def _nonempty_str(v: Any) -> bool:
    return isinstance(v, str) and v.strip() != ""


def present_field_groups(data: Mapping[str, Any]) -> list[str]:
    present = []
    for group in FIELD_GROUPS:
        value = data.get(group)
        if group == "originator_locator":
            ok = (
                isinstance(value, Mapping)
                and len(value) == 1
                and next(iter(value)) in LOCATOR_KINDS
                and _nonempty_str(next(iter(value.values())))
            )
        else:
            ok = _nonempty_str(value)
        if ok:
            present.append(group)
    return present


@dataclass(frozen=True)
class TravelRulePacket:
    originator_name: str
    originator_account: str
    originator_locator: tuple[str, str]  # (kind, value)
    beneficiary_name: str
    beneficiary_account: str

    def to_wire(self) -> dict[str, Any]:
        kind, value = self.originator_locator
        return {
            "beneficiary_account": self.beneficiary_account,
            "beneficiary_name": self.beneficiary_name,
            "originator_account": self.originator_account,
            "originator_locator": {kind: value},
            "originator_name": self.originator_name,
        }


def validate_packet(data: Mapping[str, Any]) -> TravelRulePacket:
    """All five field groups present, locator holding exactly one variant."""
    present = present_field_groups(data)
    missing = [g for g in FIELD_GROUPS if g not in present]
    if missing:
        raise IncompletePacket(missing)
    ((kind, value),) = data["originator_locator"].items()
    return TravelRulePacket(
        data["originator_name"],
        data["originator_account"],
        (kind, value),
        data["beneficiary_name"],
        data["beneficiary_account"],
    )


# ---------------------------------------------------------------------------
# transfer records and receipts
# ---------------------------------------------------------------------------


class TransferState(str, Enum):
    INITIATED = "Initiated"
    CLAIMS_GATHERED = "ClaimsGathered"
    COUNTERPARTY_VERIFIED = "CounterpartyVerified"
    INFO_EXCHANGED = "InfoExchanged"
    FINALIZED = "Finalized"
    REJECTED = "Rejected"


_NEXT = {
    TransferState.INITIATED: TransferState.CLAIMS_GATHERED,
    TransferState.CLAIMS_GATHERED: TransferState.COUNTERPARTY_VERIFIED,
    TransferState.COUNTERPARTY_VERIFIED: TransferState.INFO_EXCHANGED,
    TransferState.INFO_EXCHANGED: TransferState.FINALIZED,
}


@dataclass(frozen=True)
class NonRepudiationReceipt:
    transfer_id: str
    delivered_hash: bytes
    sender_signature: SignedEnvelope
    receiver_countersignature: SignedEnvelope

    def verify(self, sender_key: bytes, receiver_key: bytes) -> bool:
        try:
            s = self.sender_signature.body()
            c = self.receiver_countersignature.body()
            return (
                verify(self.sender_signature, sender_key)
                and verify(self.receiver_countersignature, receiver_key)
                and s.get("kind") == "delivery"
                and c.get("kind") == "countersignature"
                and s.get("transfer_id") == c.get("transfer_id") == self.transfer_id
                and b64d(s["delivered_hash"]) == self.delivered_hash
                and b64d(c["signed_hash"]) == self.sender_signature.digest()
            )
        except (EnvelopeError, KeyError, ValueError):
            return False

    @property
    def receipt_hash(self) -> bytes:
        return self.receiver_countersignature.digest()

    def to_wire(self) -> dict[str, Any]:
        return {
            "delivered_hash": self.delivered_hash,
            "receiver_countersignature": self.receiver_countersignature.to_wire(),
            "sender_signature": self.sender_signature.to_wire(),
            "transfer_id": self.transfer_id,
        }


def sign_delivery(keypair: KeyPair, transfer_id: str, delivered: SignedEnvelope, now: int) -> SignedEnvelope:
    return seal(
        keypair,
        PayloadType.RECEIPT,
        {"delivered_hash": delivered.digest(), "kind": "delivery", "transfer_id": transfer_id},
        now,
    )


def countersign(keypair: KeyPair, sender_signature: SignedEnvelope, now: int) -> SignedEnvelope:
    transfer_id = sender_signature.body()["transfer_id"]
    return seal(
        keypair,
        PayloadType.RECEIPT,
        {"kind": "countersignature", "signed_hash": sender_signature.digest(), "transfer_id": transfer_id},
        now,
    )


def reconstruct_receipts(
    log_a: AuditLog, log_b: AuditLog, transfer_id: str
) -> list[NonRepudiationReceipt]:
    """Rebuild every receipt for ``transfer_id`` from two audit logs alone.

    Each packet found in either log must appear in both, together with the
    sender's delivery signature and the receiver's countersignature.
    Raises :class:`ReceiptInvalid` when the evidence is incomplete.
    """
    if not (log_a.verify_chain() and log_b.verify_chain()):
        raise ReceiptInvalid("an audit log fails chain verification")

    def index(log: AuditLog) -> tuple[dict[bytes, SignedEnvelope], list[tuple[dict, SignedEnvelope]]]:
        packets: dict[bytes, SignedEnvelope] = {}
        receipts = []
        for env in log.envelopes():
            try:
                body = env.body()
            except EnvelopeError:
                continue
            if body.get("transfer_id") != transfer_id:
                continue
            if env.payload_type == PayloadType.TRAVEL_RULE_PACKET:
                packets[env.digest()] = env
            elif env.payload_type == PayloadType.RECEIPT:
                receipts.append((body, env))
        return packets, receipts

    pa, ra = index(log_a)
    pb, rb = index(log_b)
    if set(pa) != set(pb):
        raise ReceiptInvalid("the two logs disagree about which packets were exchanged")
    out = []
    for h in sorted(pa):
        packet = pa[h]
        both = []
        for receipts in (ra, rb):
            sender = next(
                (e for b, e in receipts if b.get("kind") == "delivery" and b.get("delivered_hash") and b64d(b["delivered_hash"]) == h),
                None,
            )
            if sender is None or sender.signer_id != packet.signer_id:
                raise ReceiptInvalid(f"no sender signature for packet {h.hex()[:12]}")
            counter = next(
                (
                    e
                    for b, e in receipts
                    if b.get("kind") == "countersignature" and b64d(b["signed_hash"]) == sender.digest()
                ),
                None,
            )
            if counter is None or counter.signer_id == sender.signer_id:
                raise ReceiptMissing(f"no countersignature for packet {h.hex()[:12]}")
            both.append(NonRepudiationReceipt(transfer_id, h, sender, counter))
        if both[0] != both[1]:
            raise ReceiptInvalid("logs hold different receipts for the same packet")
        out.append(both[0])
    if not out:
        raise ReceiptInvalid(f"no packets logged for {transfer_id}")
    return out


@dataclass
class TransferRecord:
    transfer_id: str
    originator: str
    beneficiary: str
    originating_vasp: str
    beneficiary_vasp: str
    amount: int
    role: str = "originator"
    beneficiary_name: str = ""
    beneficiary_account: str = ""
    state: TransferState = TransferState.INITIATED
    reason: str | None = None
    detail: str = ""
    claimsets: list[ClaimSet] = field(default_factory=list)
    counterparty_claimsets: list[ClaimSet] = field(default_factory=list)
    attestations: list[Any] = field(default_factory=list)
    packets: list[SignedEnvelope] = field(default_factory=list)
    receipts: list[NonRepudiationReceipt] = field(default_factory=list)
    history: list[tuple[int, str, str | None]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if isinstance(self.amount, bool) or not isinstance(self.amount, int) or self.amount <= 0:
            raise InvalidAmount(f"amount must be a positive integer, got {self.amount!r}")

    @property
    def final(self) -> bool:
        return self.state in (TransferState.FINALIZED, TransferState.REJECTED)

    @property
    def own_subject(self) -> str:
        return self.originator if self.role == "originator" else self.beneficiary

    def advance(self, state: TransferState, now: int) -> None:
        if _NEXT.get(self.state) is not state:
            raise InvalidTransition(f"{self.state.value} -> {state.value}")
        self.state = state
        self.history.append((now, state.value, None))

    def reject(self, reason: str, now: int, detail: str = "") -> bool:
        if self.final:
            return False
        self.state = TransferState.REJECTED
        self.reason = reason
        self.detail = detail
        self.history.append((now, TransferState.REJECTED.value, reason))
        return True


class AssetLedger:
    """Flat account map keyed ``<vasp_id>/<account>``. Moves are keyed by
    transfer id and applied at most once."""

    def __init__(self) -> None:
        self.balances: dict[str, int] = {}
        self.minted = 0
        self._moved: set[str] = set()
        self._lock = threading.Lock()

    @staticmethod
    def key(vasp_id: str, account: str) -> str:
        return f"{vasp_id}/{account}"

    def mint(self, vasp_id: str, account: str, amount: int) -> None:
        with self._lock:
            k = self.key(vasp_id, account)
            self.balances[k] = self.balances.get(k, 0) + amount
            self.minted += amount

    def move(self, transfer_id: str, source: str, dest: str, amount: int) -> bool:
        with self._lock:
            if transfer_id in self._moved:
                return False
            if self.balances.get(source, 0) < amount:
                raise InsufficientFunds(f"{source} holds {self.balances.get(source, 0)} < {amount}")
            self.balances[source] -= amount
            self.balances[dest] = self.balances.get(dest, 0) + amount
            self._moved.add(transfer_id)
            return True

    def total(self) -> int:
        return sum(self.balances.values())

    def to_wire(self) -> dict[str, Any]:
        return {"balances": dict(sorted(self.balances.items())), "minted": self.minted, "total": self.total()}


# ---------------------------------------------------------------------------
# customers and policy
# ---------------------------------------------------------------------------

Evidence = KeyOwnershipAttestation | CustodyAttestation | SignedEnvelope


@dataclass
class Customer:
    subject_id: str
    name: str
    account: str
    locator: dict[str, str]
    public_key: bytes
    claims_provider: str | None = None
    did: str | None = None
    evidence: Evidence | None = None


@dataclass(frozen=True)
class PolicyRule:
    action: str  # allowed | blocked | require_extra_claim
    algo: str | None = None

    def __post_init__(self) -> None:
        if self.action not in ("allowed", "blocked", "require_extra_claim"):
            raise ValueError(f"unknown policy action {self.action!r}")
        if self.action == "require_extra_claim" and not self.algo:
            raise ValueError("require_extra_claim needs an algorithm reference")


ALLOW = PolicyRule("allowed")


def parse_policy(data: Mapping[str, Any] | None) -> dict[str, PolicyRule]:
    """``{jurisdiction: "allowed" | "blocked" | {"require_extra_claim": ref}}``;
    the key ``"*"`` sets the default."""
    out = {}
    for juris, rule in (data or {}).items():
        if isinstance(rule, str):
            out[juris] = PolicyRule(rule)
        else:
            out[juris] = PolicyRule("require_extra_claim", rule["require_extra_claim"])
    return out


def evidence_envelopes(evidence: Evidence | None) -> list[SignedEnvelope]:
    if evidence is None:
        return []
    if isinstance(evidence, SignedEnvelope):
        return [evidence]
    return list(evidence.chain)


# ---------------------------------------------------------------------------
# node
# ---------------------------------------------------------------------------


@dataclass
class _Session:
    counterparty: str
    counter_jurisdiction: str | None = None
    ready: bool = False
    gathering: bool = False
    cp: str | None = None
    omit: tuple[str, ...] = ()
    outgoing: tuple[SignedEnvelope, SignedEnvelope] | None = None
    incoming: tuple[SignedEnvelope, SignedEnvelope, SignedEnvelope] | None = None
    receipt_ok: bool = False
    settled: bool = False
    traced: int = 0


class VaspNode(Node):
    kind = "vasp"

    def __init__(
        self,
        vasp_id: str,
        keypair: KeyPair,
        keys: KeyDirectory,
        *,
        jurisdiction: str,
        trusted_roots: Mapping[str, bytes],
        ledger: AssetLedger,
        policy: Mapping[str, PolicyRule] | None = None,
        claim_algos: Sequence[str] = ("tx-range v1",),
        resolver_id: str | None = None,
        cp_timeout_ms: int = DEFAULT_CP_TIMEOUT_MS,
        receipt_timeout_ms: int = DEFAULT_RECEIPT_TIMEOUT_MS,
        ready_timeout_ms: int = DEFAULT_READY_TIMEOUT_MS,
    ) -> None:
        super().__init__(vasp_id, keypair, keys)
        self.jurisdiction = jurisdiction
        self.trusted_roots = dict(trusted_roots)
        self.ledger = ledger
        self.policy = dict(policy or {})
        self.claim_algos = list(claim_algos)
        self.resolver_id = resolver_id
        self.cp_timeout_ms = cp_timeout_ms
        self.receipt_timeout_ms = receipt_timeout_ms
        self.ready_timeout_ms = ready_timeout_ms
        self.customers: dict[str, Customer] = {}
        self._accounts: dict[str, str] = {}
        self.transfers: dict[str, TransferRecord] = {}
        self._sessions: dict[str, _Session] = {}
        self._requests: dict[str, tuple[str, str]] = {}
        self._tokens: dict[str, AccessToken] = {}
        self._claim_cache: dict[tuple[str, str], ClaimSet] = {}
        # aborts that overtook their transfer intent on the bus
        self._early_aborts: dict[tuple[str, str], Mapping[str, Any]] = {}
        self._counter = 0

    # -- plain operations --------------------------------------------------

    def onboard(self, customer: Customer, now: int) -> Customer:
        if len(customer.locator) != 1 or next(iter(customer.locator)) not in LOCATOR_KINDS:
            raise IncompletePacket(["originator_locator"])
        self.customers[customer.subject_id] = customer
        self._accounts[customer.account] = customer.subject_id
        for env in evidence_envelopes(customer.evidence):
            self.retain(env, now)
        return customer

    def initiate_transfer(
        self,
        originator: str,
        beneficiary: str,
        beneficiary_vasp: str,
        amount: int,
        now: int,
        *,
        transfer_id: str | None = None,
        beneficiary_name: str = "",
        beneficiary_account: str = "",
    ) -> TransferRecord:
        if originator not in self.customers:
            raise UnknownCustomer(originator)
        self._counter += 1
        tid = transfer_id or f"{self.node_id}-T{self._counter}"
        rec = TransferRecord(
            transfer_id=tid,
            originator=originator,
            beneficiary=beneficiary,
            originating_vasp=self.node_id,
            beneficiary_vasp=beneficiary_vasp,
            amount=amount,
            role="originator",
            beneficiary_name=beneficiary_name,
            beneficiary_account=beneficiary_account,
        )
        rec.history.append((now, rec.state.value, None))
        self.transfers[tid] = rec
        return rec

    def accept_claimset(
        self, transfer: TransferRecord, envelope: SignedEnvelope, now: int, *, issuer: str | None = None
    ) -> TransferRecord:
        """Verify a delivered claim set about our customer and attach it."""
        if transfer.state is not TransferState.INITIATED:
            raise InvalidTransition(f"claims arrive in state {transfer.state.value}")
        try:
            claimset = ClaimSet.from_envelope(envelope)
        except (EnvelopeError, KeyError, TypeError, ValueError) as exc:
            raise SignatureInvalid(f"unreadable claim set: {exc}") from exc
        if issuer is not None and claimset.issuer_id != issuer:
            raise SignatureInvalid(f"claim set issued by {claimset.issuer_id}, expected {issuer}")
        pub = self.keys.get(claimset.issuer_id)
        if pub is None or not claimset.verify(pub):
            raise SignatureInvalid(f"claim set {claimset.claimset_id} does not verify")
        if claimset.subject_id != transfer.own_subject:
            raise SignatureInvalid("claim set is about another subject")
        if not claimset.claims or any(not c.provenance for c in claimset.claims):
            raise ClaimsUnavailable("claim set carries no claims with provenance")
        self.retain(envelope, now)
        transfer.claimsets.append(claimset)
        self._claim_cache[(claimset.subject_id, claimset.issuer_id)] = claimset
        transfer.advance(TransferState.CLAIMS_GATHERED, now)
        return transfer

    def check_evidence(self, evidence: Evidence | None, subject_id: str, custodian: str, now: int) -> None:
        """Key ownership (or custody by ``custodian``) for ``subject_id``."""
        if evidence is None or isinstance(evidence, SignedEnvelope):
            raise OwnershipUnattested(f"no ownership or custody attestation for {subject_id}")
        try:
            if isinstance(evidence, CustodyAttestation):
                if evidence.vasp_id != custodian or evidence.subject_id != subject_id:
                    raise OwnershipUnattested("custody attestation names another party")
                check_custody(evidence, self.trusted_roots, now)
            else:
                if evidence.subject_id != subject_id:
                    raise OwnershipUnattested("attestation names another subject")
                check_ownership(evidence, self.trusted_roots, now)
        except _RegistryUntrusted as exc:
            raise UntrustedRoot(str(exc)) from exc
        except _RegistryExpired as exc:
            raise AttestationExpired(str(exc)) from exc
        except (KeyRegistryError, EnvelopeError, KeyError, ValueError) as exc:
            raise OwnershipUnattested(str(exc)) from exc

    def verify_counterparty(self, transfer: TransferRecord, now: int) -> TransferRecord:
        if transfer.state is not TransferState.CLAIMS_GATHERED:
            raise InvalidTransition(f"verify_counterparty in state {transfer.state.value}")
        customer = self.customers.get(transfer.own_subject)
        if customer is None:
            raise UnknownCustomer(transfer.own_subject)
        self.check_evidence(customer.evidence, customer.subject_id, self.node_id, now)
        transfer.attestations.append(customer.evidence)
        transfer.advance(TransferState.COUNTERPARTY_VERIFIED, now)
        return transfer

    def packet_fields(self, transfer: TransferRecord, incoming: Mapping[str, Any] | None = None) -> dict[str, Any]:
        """Field map this side asserts. The originator fills everything from
        its records; the beneficiary echoes the originator groups and fills in
        its own customer."""
        customer = self.customers[transfer.own_subject]
        if transfer.role == "originator":
            fields: dict[str, Any] = {
                "beneficiary_account": transfer.beneficiary_account,
                "beneficiary_name": transfer.beneficiary_name,
                "originator_account": customer.account,
                "originator_locator": dict(customer.locator),
                "originator_name": customer.name,
            }
        else:
            src = incoming or {}
            fields = {
                "beneficiary_account": customer.account,
                "beneficiary_name": customer.name,
                "originator_account": src.get("originator_account"),
                "originator_locator": src.get("originator_locator"),
                "originator_name": src.get("originator_name"),
            }
        session = self._sessions.get(transfer.transfer_id)
        for group in session.omit if session else ():
            fields.pop(group, None)
        return fields

    def finalize(self, transfer: TransferRecord, now: int) -> TransferRecord:
        if transfer.state is TransferState.FINALIZED:
            return transfer
        if transfer.state is not TransferState.INFO_EXCHANGED:
            raise InvalidTransition(f"finalize in state {transfer.state.value}")
        self.check_receipts(transfer)
        if transfer.role == "originator":
            customer = self.customers[transfer.originator]
            self.ledger.move(
                transfer.transfer_id,
                AssetLedger.key(self.node_id, customer.account),
                AssetLedger.key(transfer.beneficiary_vasp, transfer.beneficiary_account),
                transfer.amount,
            )
        transfer.advance(TransferState.FINALIZED, now)
        return transfer

    def check_receipts(self, transfer: TransferRecord) -> None:
        logged = {e.digest() for e in self.log.envelopes(PayloadType.TRAVEL_RULE_PACKET)}
        counterparty = (
            transfer.beneficiary_vasp if transfer.role == "originator" else transfer.originating_vasp
        )
        senders = set()
        for r in transfer.receipts:
            sender = r.sender_signature.signer_id
            receiver = r.receiver_countersignature.signer_id
            if {sender, receiver} != {self.node_id, counterparty}:
                raise ReceiptInvalid("receipt names the wrong parties")
            if not r.verify(self.keys.get(sender, b""), self.keys.get(receiver, b"")):
                raise ReceiptInvalid(f"receipt for {transfer.transfer_id} does not verify")
            if r.delivered_hash not in logged:
                raise ReceiptInvalid("receipt covers a packet absent from the audit log")
            senders.add(sender)
        if senders != {self.node_id, counterparty}:
            raise ReceiptInvalid("a receipt is missing for one direction")

    def report(self) -> list[dict[str, Any]]:
        rows = []
        for tid in sorted(self.transfers):
            rec = self.transfers[tid]
            groups: list[str] = []
            for env in rec.packets:
                groups = sorted(set(groups) | set(present_field_groups(env.body()["packet"])))
            rows.append(
                {
                    "amount": rec.amount,
                    "claimsets": [c.claimset_id for c in rec.claimsets + rec.counterparty_claimsets],
                    "counterparty": rec.beneficiary_vasp if rec.role == "originator" else rec.originating_vasp,
                    "detail": rec.detail,
                    "packet_field_groups": groups,
                    "reason": rec.reason,
                    "receipt_hashes": sorted(r.receipt_hash.hex() for r in rec.receipts),
                    "role": rec.role,
                    "state": rec.state.value,
                    "transfer_id": tid,
                    "vasp_id": self.node_id,
                }
            )
        return rows

    # -- actor: transfer start ---------------------------------------------

    def start_transfer(self, ctx: Context, event: Mapping[str, Any]) -> TransferRecord | None:
        """Script stimulus: a customer asks to send assets."""
        try:
            rec = self.initiate_transfer(
                event["originator"],
                event["beneficiary"],
                event["beneficiary_vasp"],
                event["amount"],
                ctx.now,
                transfer_id=event.get("transfer_id"),
                beneficiary_name=event.get("beneficiary_name", ""),
                beneficiary_account=event.get("beneficiary_account", ""),
            )
        except VaspError as exc:
            ctx.trace("transfer_refused", node=self.node_id, error=exc.code, detail=str(exc))
            return None
        session = _Session(counterparty=rec.beneficiary_vasp, omit=tuple(event.get("omit_packet_fields", ())))
        self._sessions[rec.transfer_id] = session
        self._emit(rec, ctx)
        self.send(
            ctx,
            rec.beneficiary_vasp,
            PayloadType.TRANSFER_INTENT,
            {
                "amount": rec.amount,
                "beneficiary_account": rec.beneficiary_account,
                "jurisdiction": self.jurisdiction,
                "originator": rec.originator,
                "transfer_id": rec.transfer_id,
            },
        )
        self.set_timer(ctx, f"ready:{rec.transfer_id}", self.ready_timeout_ms)
        self._start_gather(rec, ctx)
        return rec

    def on_transfer_intent(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        tid = body["transfer_id"]
        if tid in self.transfers:
            return
        rule = self._rule(body.get("jurisdiction"))
        subject = self._accounts.get(body.get("beneficiary_account", ""))
        if subject is None:
            ctx.trace("transfer_refused", node=self.node_id, transfer_id=tid, error="UnknownCustomer")
            self.send(ctx, msg.from_node, PayloadType.ABORT, {"detail": "", "reason": "UnknownCustomer", "transfer_id": tid})
            return
        try:
            rec = TransferRecord(
                transfer_id=tid,
                originator=body["originator"],
                beneficiary=subject,
                originating_vasp=msg.from_node,
                beneficiary_vasp=self.node_id,
                amount=body["amount"],
                role="beneficiary",
                beneficiary_name=self.customers[subject].name,
                beneficiary_account=body["beneficiary_account"],
            )
        except InvalidAmount as exc:
            self.send(ctx, msg.from_node, PayloadType.ABORT, {"detail": str(exc), "reason": exc.code, "transfer_id": tid})
            return
        rec.history.append((ctx.now, rec.state.value, None))
        self.transfers[tid] = rec
        self._sessions[tid] = _Session(counterparty=msg.from_node, counter_jurisdiction=body.get("jurisdiction"))
        self._emit(rec, ctx)
        early = self._early_aborts.pop((msg.from_node, tid), None)
        if early is not None:
            self._fail(rec, early.get("reason", "Aborted"), f"counterparty: {early.get('detail', '')}", ctx, notify=False)
            return
        if rule.action == "blocked":
            self._fail(rec, "PolicyBlocked", f"jurisdiction {body.get('jurisdiction')}", ctx)
            return
        self._start_gather(rec, ctx)

    def on_ready(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        rec, session = self._lookup(body["transfer_id"], msg.from_node)
        if rec is None or rec.role != "originator":
            return
        self.cancel_timer(f"ready:{rec.transfer_id}")
        session.ready = True
        session.counter_jurisdiction = body.get("jurisdiction")
        self._maybe_send_packet(rec, ctx)

    # -- actor: claims gathering -------------------------------------------

    def _next_request_id(self, tid: str) -> str:
        self._counter += 1
        return f"{self.node_id}:{tid}:{self._counter}"

    def _start_gather(self, rec: TransferRecord, ctx: Context) -> None:
        session = self._sessions[rec.transfer_id]
        customer = self.customers[rec.own_subject]
        session.gathering = True
        if customer.claims_provider:
            self._request_claims(rec, customer.claims_provider, ctx)
        elif customer.did and self.resolver_id:
            rid = self._next_request_id(rec.transfer_id)
            self._requests[rid] = (rec.transfer_id, "resolve")
            self.send(ctx, self.resolver_id, PayloadType.RESOLVE_REQUEST, {"did": customer.did, "request_id": rid})
            self.set_timer(ctx, f"cp:{rec.transfer_id}", self.cp_timeout_ms)
        else:
            self._fail(rec, "ClaimsUnavailable", "no claims provider known for the customer", ctx)

    def _request_claims(self, rec: TransferRecord, cp: str, ctx: Context) -> None:
        session = self._sessions[rec.transfer_id]
        session.cp = cp
        cached = self._claim_cache.get((rec.own_subject, cp))
        if cached is not None and cached.is_fresh(ctx.now):
            ctx.trace("claims_reused", node=self.node_id, transfer_id=rec.transfer_id, claimset_id=cached.claimset_id)
            self._on_claimset(rec, cached.envelope, ctx)
            return
        rid = self._next_request_id(rec.transfer_id)
        token = self._tokens.get(cp)
        if token is not None and ctx.now < token.expires_at:
            self._requests[rid] = (rec.transfer_id, "claims")
            self.send(
                ctx,
                cp,
                PayloadType.CLAIMS_REQUEST,
                {
                    "algo_ids": [a for a in self.claim_algos if a in token.allowed_algos],
                    "request_id": rid,
                    "subject_id": rec.own_subject,
                    "token": token.to_wire(),
                    "vasp_id": self.node_id,
                },
            )
        else:
            self._requests[rid] = (rec.transfer_id, "auth")
            cred = make_credential(self.keypair, self.claim_algos, ctx.now)
            body = cred.body()
            body["request_id"] = rid
            self.send(ctx, cp, PayloadType.AUTH_REQUEST, body)
        self.set_timer(ctx, f"cp:{rec.transfer_id}", self.cp_timeout_ms)

    def _pending(self, body: Mapping[str, Any], stage: str) -> TransferRecord | None:
        entry = self._requests.pop(body.get("request_id", ""), None)
        if entry is None or entry[1] != stage:
            return None
        rec = self.transfers.get(entry[0])
        session = self._sessions.get(entry[0])
        if rec is None or session is None or rec.final or not session.gathering:
            return None
        return rec

    def on_endpoint_record(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        rec = self._pending(body, "resolve")
        if rec is None:
            return
        customer = self.customers[rec.own_subject]
        try:
            env = SignedEnvelope.from_wire(body["record"])
            record = env.body()
            ok = verify(env, customer.public_key) and record["did"] == customer.did
        except (EnvelopeError, KeyError):
            ok = False
        if not ok:
            self._fail(rec, "ClaimsUnavailable", "endpoint record not signed by the subject", ctx)
            return
        self.retain(env, ctx.now)
        ctx.trace("did_resolved", node=self.node_id, transfer_id=rec.transfer_id, did=customer.did,
                  claims_provider=record["claims_provider_id"])
        self._request_claims(rec, record["claims_provider_id"], ctx)

    def on_access_token(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        rec = self._pending(body, "auth")
        if rec is None:
            return
        try:
            token = AccessToken.from_envelope(SignedEnvelope.from_wire(body["token"]))
            good = self.keys.verify(token.envelope) and token.vasp_id == self.node_id
        except Exception:  # noqa: BLE001 - any defect means no usable token
            good = False
        if not good:
            self._fail(rec, "ClaimsUnavailable", "TokenInvalid", ctx)
            return
        self.retain(token.envelope, ctx.now)
        self._tokens[msg.from_node] = token
        self._request_claims(rec, msg.from_node, ctx)

    def on_claim_set(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        rec = self._pending(body, "claims")
        if rec is None:
            ctx.trace("late_response", node=self.node_id, request_id=body.get("request_id", ""))
            return
        try:
            env = SignedEnvelope.from_wire(body["claimset"])
        except EnvelopeError:
            self._fail(rec, "SignatureInvalid", "malformed claim set", ctx)
            return
        self._on_claimset(rec, env, ctx, issuer=msg.from_node)

    def _on_claimset(self, rec: TransferRecord, env: SignedEnvelope, ctx: Context, issuer: str | None = None) -> None:
        session = self._sessions[rec.transfer_id]
        self.cancel_timer(f"cp:{rec.transfer_id}")
        session.gathering = False
        try:
            self.accept_claimset(rec, env, ctx.now, issuer=issuer)
            self._emit(rec, ctx)
            self.verify_counterparty(rec, ctx.now)
            self._emit(rec, ctx)
        except VaspError as exc:
            self._fail(rec, exc.code, str(exc), ctx)
            return
        if rec.role == "beneficiary":
            self.send(
                ctx,
                session.counterparty,
                PayloadType.READY,
                {"jurisdiction": self.jurisdiction, "transfer_id": rec.transfer_id},
            )
        else:
            self._maybe_send_packet(rec, ctx)

    def on_error(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        entry = self._requests.get(body.get("correlation_id", ""))
        if entry is None:
            return
        rec = self._pending({"request_id": body["correlation_id"]}, entry[1])
        if rec is None:
            return
        self._fail(rec, "ClaimsUnavailable", f"{body.get('error')}: {body.get('detail', '')}", ctx)

    # -- actor: Travel Rule exchange ---------------------------------------

    def _rule(self, jurisdiction: str | None) -> PolicyRule:
        if jurisdiction in self.policy:
            return self.policy[jurisdiction]
        return self.policy.get("*", ALLOW)

    def _maybe_send_packet(self, rec: TransferRecord, ctx: Context) -> None:
        session = self._sessions[rec.transfer_id]
        if rec.state is not TransferState.COUNTERPARTY_VERIFIED or not session.ready or session.outgoing:
            return
        if self._rule(session.counter_jurisdiction).action == "blocked":
            self._fail(rec, "PolicyBlocked", f"jurisdiction {session.counter_jurisdiction}", ctx)
            return
        try:
            packet = validate_packet(self.packet_fields(rec))
        except IncompletePacket as exc:
            self._fail(rec, exc.code, str(exc), ctx)
            return
        self._deliver_packet(rec, packet, ctx)

    def _deliver_packet(self, rec: TransferRecord, packet: TravelRulePacket, ctx: Context) -> None:
        session = self._sessions[rec.transfer_id]
        customer = self.customers[rec.own_subject]
        packet_env = seal(
            self.keypair,
            PayloadType.TRAVEL_RULE_PACKET,
            {
                "claimsets": [c.envelope.to_wire() for c in rec.claimsets],
                "direction": rec.role,
                "evidence": evidence_to_wire(customer.evidence) if customer.evidence else None,
                "packet": packet.to_wire(),
                "transfer_id": rec.transfer_id,
            },
            ctx.now,
        )
        sender_sig = sign_delivery(self.keypair, rec.transfer_id, packet_env, ctx.now)
        self.retain(packet_env, ctx.now)
        self.retain(sender_sig, ctx.now)
        rec.packets.append(packet_env)
        session.outgoing = (packet_env, sender_sig)
        ctx.trace("packet_sent", node=self.node_id, transfer_id=rec.transfer_id, state=rec.state.value)
        self.send(
            ctx,
            session.counterparty,
            PayloadType.TRAVEL_RULE_PACKET,
            {"packet": packet_env.to_wire(), "sender_signature": sender_sig.to_wire(), "transfer_id": rec.transfer_id},
        )
        self.set_timer(ctx, f"receipt:{rec.transfer_id}", self.receipt_timeout_ms)

    def on_travel_rule_packet(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        rec, session = self._lookup(body["transfer_id"], msg.from_node)
        if rec is None or rec.final or session.incoming is not None:
            ctx.trace("packet_ignored", node=self.node_id, transfer_id=body["transfer_id"])
            return
        try:
            packet_env = SignedEnvelope.from_wire(body["packet"])
            sender_sig = SignedEnvelope.from_wire(body["sender_signature"])
            ok = (
                packet_env.signer_id == sender_sig.signer_id == msg.from_node
                and self.keys.verify(packet_env)
                and self.keys.verify(sender_sig)
                and b64d(sender_sig.body()["delivered_hash"]) == packet_env.digest()
                and sender_sig.body()["transfer_id"] == rec.transfer_id
            )
            inner = packet_env.body()
        except (EnvelopeError, KeyError, ValueError):
            ok = False
        if not ok:
            self._fail(rec, "SignatureInvalid", "packet or delivery signature does not verify", ctx)
            return
        try:
            if rec.state is not TransferState.COUNTERPARTY_VERIFIED:
                raise ProtocolViolation(f"packet arrived in state {rec.state.value}")
            validate_packet(inner["packet"])
            claimsets = self._check_counterparty_claims(rec, inner)
            evidence = evidence_from_wire(inner["evidence"]) if inner.get("evidence") else None
            counter_subject = rec.originator if rec.role == "beneficiary" else rec.beneficiary
            self.check_evidence(evidence, counter_subject, msg.from_node, ctx.now)
            self._check_extra_claims(session, claimsets)
        except VaspError as exc:
            self._fail(rec, exc.code, str(exc), ctx)
            return
        except (KeyRegistryError, EnvelopeError, KeyError, TypeError) as exc:
            self._fail(rec, "OwnershipUnattested", str(exc), ctx)
            return

        self.retain(packet_env, ctx.now)
        self.retain(sender_sig, ctx.now)
        for cs in claimsets:
            self.retain(cs.envelope, ctx.now)
        for env in evidence_envelopes(evidence):
            self.retain(env, ctx.now)
        rec.counterparty_claimsets.extend(claimsets)
        rec.attestations.append(evidence)
        rec.packets.append(packet_env)
        counter = countersign(self.keypair, sender_sig, ctx.now)
        self.retain(counter, ctx.now)
        rec.receipts.append(NonRepudiationReceipt(rec.transfer_id, packet_env.digest(), sender_sig, counter))
        session.incoming = (packet_env, sender_sig, counter)
        self.send(
            ctx,
            msg.from_node,
            PayloadType.RECEIPT,
            {"countersignature": counter.to_wire(), "transfer_id": rec.transfer_id},
        )
        if rec.role == "beneficiary" and session.outgoing is None:
            try:
                packet = validate_packet(self.packet_fields(rec, inner["packet"]))
            except IncompletePacket as exc:
                self._fail(rec, exc.code, str(exc), ctx)
                return
            self._deliver_packet(rec, packet, ctx)
        self._maybe_info_exchanged(rec, ctx)

    def _check_counterparty_claims(self, rec: TransferRecord, inner: Mapping[str, Any]) -> list[ClaimSet]:
        counter_subject = rec.originator if rec.role == "beneficiary" else rec.beneficiary
        out = []
        for wire in inner.get("claimsets", []):
            try:
                cs = ClaimSet.from_envelope(SignedEnvelope.from_wire(wire))
            except (EnvelopeError, KeyError, TypeError, ValueError) as exc:
                raise SignatureInvalid(f"unreadable claim set: {exc}") from exc
            if not self.keys.verify(cs.envelope) or cs.envelope.signer_id != cs.issuer_id:
                raise SignatureInvalid(f"claim set {cs.claimset_id} does not verify")
            if cs.subject_id != counter_subject:
                raise SignatureInvalid("claim set is about another subject")
            out.append(cs)
        if not out:
            raise ClaimsUnavailable("packet carries no claim set")
        return out

    def _check_extra_claims(self, session: _Session, claimsets: Iterable[ClaimSet]) -> None:
        rule = self._rule(session.counter_jurisdiction)
        if rule.action == "blocked":
            raise PolicyBlocked(f"jurisdiction {session.counter_jurisdiction}")
        if rule.action == "require_extra_claim":
            refs = {r for cs in claimsets for c in cs.claims for r in c.algo_refs}
            if rule.algo not in refs:
                raise PolicyBlocked(f"jurisdiction {session.counter_jurisdiction} requires a {rule.algo} claim")

    def on_receipt(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        rec, session = self._lookup(body["transfer_id"], msg.from_node)
        if rec is None or rec.final:
            return
        self._accept_countersignature(rec, session, body["countersignature"], msg.from_node, ctx)

    def _accept_countersignature(
        self, rec: TransferRecord, session: _Session, wire: Any, peer: str, ctx: Context
    ) -> None:
        if session.outgoing is None or session.receipt_ok:
            return
        packet_env, sender_sig = session.outgoing
        try:
            counter = SignedEnvelope.from_wire(wire)
            cb = counter.body()
            ok = (
                counter.signer_id == peer
                and self.keys.verify(counter)
                and cb.get("kind") == "countersignature"
                and b64d(cb["signed_hash"]) == sender_sig.digest()
            )
        except (EnvelopeError, KeyError, ValueError):
            ok = False
        if not ok:
            ctx.trace("receipt_rejected", node=self.node_id, transfer_id=rec.transfer_id)
            return
        self.cancel_timer(f"receipt:{rec.transfer_id}")
        self.retain(counter, ctx.now)
        rec.receipts.append(NonRepudiationReceipt(rec.transfer_id, packet_env.digest(), sender_sig, counter))
        session.receipt_ok = True
        self._maybe_info_exchanged(rec, ctx)

    def _maybe_info_exchanged(self, rec: TransferRecord, ctx: Context) -> None:
        session = self._sessions[rec.transfer_id]
        if rec.state is not TransferState.COUNTERPARTY_VERIFIED or not (session.receipt_ok and session.incoming):
            return
        rec.advance(TransferState.INFO_EXCHANGED, ctx.now)
        self._emit(rec, ctx)
        if rec.role == "originator" or session.settled:
            self._finalize(rec, ctx)

    def _finalize(self, rec: TransferRecord, ctx: Context) -> None:
        try:
            self.finalize(rec, ctx.now)
        except VaspError as exc:
            self._fail(rec, exc.code, str(exc), ctx)
            return
        self._emit(rec, ctx)
        session = self._sessions[rec.transfer_id]
        if rec.role == "originator":
            ctx.trace("ledger_moved", node=self.node_id, transfer_id=rec.transfer_id, amount=rec.amount,
                      total=self.ledger.total())
            self.send(
                ctx,
                rec.beneficiary_vasp,
                PayloadType.SETTLEMENT,
                {
                    "amount": rec.amount,
                    "beneficiary_account": rec.beneficiary_account,
                    # a second copy, so a lost receipt message alone cannot strand the beneficiary
                    "countersignature": session.incoming[2].to_wire(),
                    "transfer_id": rec.transfer_id,
                },
            )

    def on_settlement(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        rec, session = self._lookup(body["transfer_id"], msg.from_node)
        if rec is None or rec.role != "beneficiary" or rec.final:
            return
        self.retain(msg.envelope, ctx.now)
        session.settled = True
        if not session.receipt_ok and body.get("countersignature") is not None:
            self._accept_countersignature(rec, session, body["countersignature"], msg.from_node, ctx)
        elif rec.state is TransferState.INFO_EXCHANGED:
            self._finalize(rec, ctx)

    def on_abort(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        rec, session = self._lookup(body["transfer_id"], msg.from_node)
        if rec is None and body["transfer_id"] not in self.transfers:
            self._early_aborts[(msg.from_node, body["transfer_id"])] = dict(body)
            self.retain(msg.envelope, ctx.now)
            return
        if rec is None or rec.final:
            return
        self.retain(msg.envelope, ctx.now)
        self._fail(rec, body.get("reason", "Aborted"), f"counterparty: {body.get('detail', '')}", ctx, notify=False)

    def on_timer(self, tag: str, ctx: Context) -> None:
        kind, _, tid = tag.partition(":")
        rec = self.transfers.get(tid)
        session = self._sessions.get(tid)
        if rec is None or session is None or rec.final:
            return
        if kind == "cp" and session.gathering:
            session.gathering = False
            self._fail(rec, "ClaimsUnavailable", "claims provider timed out", ctx)
        elif kind == "receipt" and not session.receipt_ok:
            self._fail(rec, "ReceiptMissing", "counterparty did not countersign in time", ctx)
        elif kind == "ready" and not session.ready:
            self._fail(rec, "CounterpartyUnavailable", "beneficiary VASP never became ready", ctx)

    # -- helpers -----------------------------------------------------------

    def _lookup(self, tid: str, peer: str) -> tuple[TransferRecord | None, _Session | None]:
        rec = self.transfers.get(tid)
        session = self._sessions.get(tid)
        if rec is None or session is None or session.counterparty != peer:
            return None, None
        return rec, session

    def _fail(self, rec: TransferRecord, reason: str, detail: str, ctx: Context, notify: bool = True) -> None:
        if not rec.reject(reason, ctx.now, detail):
            return
        for t in ("cp", "receipt", "ready"):
            self.cancel_timer(f"{t}:{rec.transfer_id}")
        session = self._sessions.get(rec.transfer_id)
        if session is not None:
            session.gathering = False
        self._emit(rec, ctx)
        if notify and session is not None:
            self.send(
                ctx,
                session.counterparty,
                PayloadType.ABORT,
                {"detail": detail, "reason": reason, "transfer_id": rec.transfer_id},
            )

    def _emit(self, rec: TransferRecord, ctx: Context) -> None:
        session = self._sessions.get(rec.transfer_id)
        start = session.traced if session else 0
        for t, state, reason in rec.history[start:]:
            ctx.trace(
                "transfer_state",
                node=self.node_id,
                transfer_id=rec.transfer_id,
                role=rec.role,
                state=state,
                reason=reason,
            )
        if session is not None:
            session.traced = len(rec.history)
