"""Post-run invariant checks. Each returns a list of violations (empty = ok)."""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterator
from typing import TYPE_CHECKING, Any

from ..claims_provider import ClaimSet
from ..envelope import EnvelopeError, PayloadType, SignedEnvelope, b64e, canonicalize
from ..vasp_node import FIELD_GROUPS, ReceiptInvalid, TransferState, VaspError, present_field_groups, reconstruct_receipts

if TYPE_CHECKING:
    from .runner import World

_ORDER = ["Initiated", "ClaimsGathered", "CounterpartyVerified", "InfoExchanged", "Finalized"]


def expand_envelope(env: SignedEnvelope) -> Iterator[bytes]:
    """Wire bytes of ``env`` and of every envelope nested in its payload,
    decoded level by level."""
    yield canonicalize(env.to_wire())
    yield env.payload
    try:
        body = env.body()
    except EnvelopeError:
        return
    for nested in _nested(body):
        yield from expand_envelope(nested)


def _nested(value: Any) -> Iterator[SignedEnvelope]:
    if isinstance(value, dict):
        if {"payload", "payload_type", "signature", "signer_id"} <= set(value):
            try:
                yield SignedEnvelope.from_wire(value)
                return
            except EnvelopeError:
                pass
        for v in value.values():
            yield from _nested(v)
    elif isinstance(value, list):
        for v in value:
            yield from _nested(v)


def check_logs(world: World) -> list[str]:
    return [f"{nid}: chain does not verify" for nid, log in world.logs.items() if not log.verify_chain()]


def check_safety_ordering(trace: list[dict[str, Any]]) -> list[str]:
    """States advance in the fixed order; no packet leaves a node before
    that node's side of the transfer reached CounterpartyVerified."""
    problems = []
    last: dict[tuple[str, str], str] = {}
    for e in trace:
        if e["kind"] == "transfer_state":
            key = (e["node"], e["transfer_id"])
            prev, state = last.get(key), e["state"]
            if prev in ("Finalized", "Rejected"):
                problems.append(f"{key}: {state} after final state {prev}")
            elif state == "Rejected":
                pass
            elif prev is None and state != "Initiated":
                problems.append(f"{key}: starts in {state}")
            elif prev is not None and _ORDER.index(state) != _ORDER.index(prev) + 1:
                problems.append(f"{key}: {prev} -> {state}")
            last[key] = state
        elif e["kind"] == "packet_sent":
            key = (e["node"], e["transfer_id"])
            if last.get(key) != "CounterpartyVerified":
                problems.append(f"{key}: packet sent in state {last.get(key)}")
    return problems


def check_conservation(world: World) -> list[str]:
    total = world.ledger.total()
    if total != world.ledger.minted:
        return [f"ledger total {total} != minted {world.ledger.minted}"]
    return []


def delivered_claimsets(world: World) -> Counter:
    """Multiset of (provider, subject, claim set digest) the CPs sent out."""
    out: Counter = Counter()
    for msg in world.bus.sent:
        if msg.from_node in world.claims_providers and msg.payload_type == PayloadType.CLAIM_SET:
            cs = ClaimSet.from_envelope(SignedEnvelope.from_wire(msg.envelope.body()["claimset"]))
            out[(msg.from_node, cs.subject_id, cs.envelope.digest())] += 1
    return out


def pds_claimsets(world: World) -> Counter:
    out: Counter = Counter()
    for cp_id, cp in world.claims_providers.items():
        for subject_id, store in cp.pds.items():
            for cs in store.stored_claimsets:
                out[(cp_id, subject_id, cs.envelope.digest())] += 1
    return out


def check_pds_mirror(world: World) -> list[str]:
    sent, stored = delivered_claimsets(world), pds_claimsets(world)
    if sent == stored:
        return []
    keys = sorted({(k[0], k[1]) for k in (sent - stored) + (stored - sent)})
    return [f"{cp}/{subject}: delivered and PDS multisets differ" for cp, subject in keys]


def raw_row_leaks(world: World) -> list[str]:
    """Byte-scan every bus message, nested envelopes decoded, for the
    canonical encoding of any dataset row.

    Rows are canonical objects, so a hit must start at a ``{``; probing each
    ``{`` with every needle length is equivalent to a substring search.
    """
    owner = {enc: pid for pid, dp in world.providers.items() for enc in dp.record_encodings()}
    lengths = sorted({len(n) for n in owner})
    leaks = []
    for msg in world.bus.sent:
        hit = None
        for blob in expand_envelope(msg.envelope):
            start = blob.find(b"{")
            while start != -1 and hit is None:
                for n in lengths:
                    if blob[start : start + n] in owner:
                        hit = owner[blob[start : start + n]]
                        break
                start = blob.find(b"{", start + 1)
            if hit:
                break
        if hit:
            leaks.append(f"{msg.msg_id} ({msg.from_node}->{msg.to_node}) carries a row of {hit}")
    return leaks


def private_key_leaks(world: World, files: dict[str, bytes]) -> list[str]:
    leaks = []
    for key_id, kp in sorted(world.keypairs.items()):
        forms = (kp.private_key, b64e(kp.private_key).encode(), kp.private_key.hex().encode())
        for name, data in files.items():
            if any(f in data for f in forms):
                leaks.append(f"private key of {key_id} appears in {name}")
    return leaks


def check_travel_rule(world: World) -> list[str]:
    """Both logs of every Finalized transfer hold a complete packet, the
    originator's claim set and both countersigned receipts."""
    problems = []
    for vasp in world.vasps.values():
        for tid, rec in vasp.transfers.items():
            if rec.state is not TransferState.FINALIZED or rec.role != "originator":
                continue
            other = world.vasps[rec.beneficiary_vasp]
            for node in (vasp, other):
                packets = [
                    e.body() for e in node.log.envelopes(PayloadType.TRAVEL_RULE_PACKET)
                    if e.body()["transfer_id"] == tid
                ]
                if not any(len(present_field_groups(p["packet"])) == len(FIELD_GROUPS) for p in packets):
                    problems.append(f"{node.node_id}/{tid}: no complete packet logged")
                claimsets = [ClaimSet.from_envelope(e) for e in node.log.envelopes(PayloadType.CLAIM_SET)]
                if not any(c.subject_id == rec.originator for c in claimsets):
                    problems.append(f"{node.node_id}/{tid}: originator claim set not logged")
            try:
                receipts = reconstruct_receipts(vasp.log, other.log, tid)
            except (ReceiptInvalid, VaspError) as exc:
                problems.append(f"{tid}: {exc}")
                continue
            keys = world.keys
            senders = {r.sender_signature.signer_id for r in receipts}
            if senders != {vasp.node_id, other.node_id}:
                problems.append(f"{tid}: receipts do not cover both directions")
            for r in receipts:
                s, c = r.sender_signature.signer_id, r.receiver_countersignature.signer_id
                if not r.verify(keys[s], keys[c]):
                    problems.append(f"{tid}: receipt from {s} does not verify")
    return problems


def check_sealed_trace(world: World, trace: list[dict[str, Any]], trace_bytes: bytes) -> list[str]:
    """With sealed transport no claim payload is readable from the trace."""
    if not world.bus.sealed:
        return []
    problems = [f"trace entry {e['seq']} exposes an envelope" for e in trace if "envelope" in e]
    for msg in world.bus.sent:
        for blob in expand_envelope(msg.envelope):
            if blob.startswith(b"{") and b'"claims"' in blob and blob in trace_bytes:
                problems.append(f"{msg.msg_id}: claim payload readable in trace")
            if b64e(blob).encode() in trace_bytes and b'"claims"' in blob:
                problems.append(f"{msg.msg_id}: encoded claim payload readable in trace")
    return problems


def aggregate_violations(world: World) -> list[str]:
    """Aggregate responses that used fewer than the provider's k_min subjects."""
    problems = []
    for msg in world.bus.sent:
        if msg.payload_type != PayloadType.ALGO_RESPONSE or msg.from_node not in world.providers:
            continue
        resp = msg.envelope.body()["response"]
        k_min = world.providers[msg.from_node].k_min
        if resp["output_kind"] == "aggregate" and resp["records_used"] < k_min:
            problems.append(f"{msg.msg_id}: aggregate over {resp['records_used']} < {k_min}")
    return problems


def run_checks(world: World, trace: list[dict[str, Any]], files: dict[str, bytes]) -> dict[str, list[str]]:
    return {
        "aggregate_threshold": aggregate_violations(world),
        "conservation": check_conservation(world),
        "logs": check_logs(world),
        "pds_mirror": check_pds_mirror(world),
        "private_keys": private_key_leaks(world, files),
        "raw_rows": raw_row_leaks(world),
        "safety_ordering": check_safety_ordering(trace),
        "sealed_transport": check_sealed_trace(world, trace, files.get("trace.jsonl", b"")),
        "travel_rule": check_travel_rule(world),
    }

