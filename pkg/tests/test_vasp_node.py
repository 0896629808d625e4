from __future__ import annotations

import dataclasses

import pytest

from claimsnet.audit_log import AuditLog
from claimsnet.envelope import PayloadType, seal
from claimsnet.key_registry import Authority, KeyRegistry, OwnershipEvidence, respond_to_challenge
from claimsnet.network_sim import library
from claimsnet.network_sim.runner import run_scenario
from claimsnet.network_sim.scenario import ScenarioConfig
from claimsnet.vasp_node import (
    FIELD_GROUPS,
    AssetLedger,
    AttestationExpired,
    Customer,
    IncompletePacket,
    InsufficientFunds,
    InvalidAmount,
    InvalidTransition,
    NonRepudiationReceipt,
    OwnershipUnattested,
    ReceiptInvalid,
    SignatureInvalid,
    TransferRecord,
    TransferState,
    UnknownCustomer,
    UntrustedRoot,
    VaspNode,
    countersign,
    present_field_groups,
    reconstruct_receipts,
    sign_delivery,
    validate_packet,
)
from support import fixture, kp, run

PACKET = {
    "beneficiary_account": "acct-bob",
    "beneficiary_name": "Bob Tan",
    "originator_account": "acct-alice",
    "originator_locator": {"national_identity_number": "FR-1985-0412-77"},
    "originator_name": "Alice Moreau",
}


class World:
    """One VASP holding customer S, a CP that knows S, and a key registry."""

    def __init__(self, trusted: tuple[str, ...] = ("root",)):
        self.f = fixture()
        keys = self.f.keys
        root = Authority.root(keys.add(kp("root")))
        self.registry = KeyRegistry(root.delegate(keys.add(kp("kr")), 0), keys)
        self.ledger = AssetLedger()
        keys.add(kp("vasp-b"))
        self.vasp = VaspNode(
            "vasp-o", self.f.vasp, keys, jurisdiction="EU",
            trusted_roots={r: keys[r] for r in trusted}, ledger=self.ledger,
        )
        self.vasp.onboard(
            Customer("S", "Sam Subject", "acct-s", {"customer_identification_number": "C-1"}, self.f.subject.public_key,
                     claims_provider="cp-1", evidence=self.ownership()),
            0,
        )
        self.ledger.mint("vasp-o", "acct-s", 10_000)

    def ownership(self, now: int = 0):
        s = self.f.subject
        challenge = self.registry.new_challenge(s.public_key, now)
        proof = respond_to_challenge(s, challenge, now)
        self.registry.check_response(challenge.nonce, proof)
        return self.registry.issue_ownership(
            "S", s.public_key, OwnershipEvidence(proof, self.registry.enroll("S", s.public_key, now)), now
        )

    def transfer(self, amount: int = 1000) -> TransferRecord:
        return self.vasp.initiate_transfer("S", "bob", "vasp-b", amount, 1, beneficiary_name="Bob", beneficiary_account="acct-bob")

    def claimset(self, now: int = 2):
        return self.f.cp.handle_request(self.f.request(["tx-range v1"], now=now), now, self.f.executor(now))

    def gathered(self) -> TransferRecord:
        rec = self.transfer()
        return self.vasp.accept_claimset(rec, self.claimset().envelope, 3, issuer="cp-1")


def test_initiate_for_onboarded_originator():
    rec = World().transfer(1000)
    assert rec.state is TransferState.INITIATED and rec.amount == 1000


def test_initiate_for_unknown_originator():
    with pytest.raises(UnknownCustomer):
        World().vasp.initiate_transfer("nobody", "bob", "vasp-b", 10, 1)


@pytest.mark.parametrize("amount", [0, -5, True, 1.5])
def test_amount_must_be_positive_units(amount):
    with pytest.raises(InvalidAmount):
        TransferRecord("T", "a", "b", "o", "b", amount)


def test_valid_claim_set_moves_to_claims_gathered():
    w = World()
    rec = w.gathered()
    assert rec.state is TransferState.CLAIMS_GATHERED
    assert len(rec.claimsets) == 1 and rec.claimsets[0].claims[0].attributes == {"tx_max": 900, "tx_min": 80}
    assert rec.claimsets[0].envelope in w.vasp.log.envelopes(PayloadType.CLAIM_SET)


def test_broken_claim_set_signature_leaves_state_unchanged():
    w = World()
    rec = w.transfer()
    env = w.claimset().envelope
    sig = bytearray(env.signature)
    sig[5] ^= 0x40
    with pytest.raises(SignatureInvalid):
        w.vasp.accept_claimset(rec, dataclasses.replace(env, signature=bytes(sig)), 3)
    assert rec.state is TransferState.INITIATED and rec.claimsets == []


def test_claim_set_from_unexpected_issuer():
    w = World()
    rec = w.transfer()
    with pytest.raises(SignatureInvalid):
        w.vasp.accept_claimset(rec, w.claimset().envelope, 3, issuer="cp-9")


def test_valid_attestation_verifies_counterparty():
    w = World()
    rec = w.vasp.verify_counterparty(w.gathered(), 4)
    assert rec.state is TransferState.COUNTERPARTY_VERIFIED
    assert rec.attestations == [w.vasp.customers["S"].evidence]


def test_possession_proof_alone_is_not_ownership():
    w = World()
    s = w.f.subject
    challenge = w.registry.new_challenge(s.public_key, 0)
    w.vasp.customers["S"].evidence = respond_to_challenge(s, challenge, 0)
    rec = w.gathered()
    with pytest.raises(OwnershipUnattested):
        w.vasp.verify_counterparty(rec, 4)
    assert rec.state is TransferState.CLAIMS_GATHERED


def test_missing_evidence_is_not_ownership():
    w = World()
    w.vasp.customers["S"].evidence = None
    with pytest.raises(OwnershipUnattested):
        w.vasp.verify_counterparty(w.gathered(), 4)


def test_chain_to_untrusted_root():
    w = World(trusted=())
    with pytest.raises(UntrustedRoot):
        w.vasp.verify_counterparty(w.gathered(), 4)


def test_expired_attestation():
    w = World()
    rec = w.gathered()
    with pytest.raises(AttestationExpired):
        w.vasp.verify_counterparty(rec, w.vasp.customers["S"].evidence.valid_to)


def test_custody_attestation_for_this_vasp():
    w = World()
    w.vasp.customers["S"].evidence = w.registry.issue_custody("vasp-o", "S", w.f.subject.public_key, 0)
    assert w.vasp.verify_counterparty(w.gathered(), 4).state is TransferState.COUNTERPARTY_VERIFIED


def test_custody_attestation_for_another_vasp():
    w = World()
    w.vasp.customers["S"].evidence = w.registry.issue_custody("vasp-x", "S", w.f.subject.public_key, 0)
    with pytest.raises(OwnershipUnattested):
        w.vasp.verify_counterparty(w.gathered(), 4)


def test_out_of_order_transition():
    with pytest.raises(InvalidTransition):
        World().vasp.verify_counterparty(World().transfer(), 4)


def test_complete_packet_with_national_identity_number():
    packet = validate_packet(PACKET)
    assert packet.originator_locator == ("national_identity_number", "FR-1985-0412-77")
    assert present_field_groups(PACKET) == list(FIELD_GROUPS)


def test_missing_beneficiary_account():
    data = {k: v for k, v in PACKET.items() if k != "beneficiary_account"}
    with pytest.raises(IncompletePacket) as err:
        validate_packet(data)
    assert list(err.value.missing) == ["beneficiary_account"]


@pytest.mark.parametrize("group", FIELD_GROUPS)
def test_each_missing_group_is_reported(group):
    with pytest.raises(IncompletePacket) as err:
        validate_packet({k: v for k, v in PACKET.items() if k != group})
    assert list(err.value.missing) == [group]


@pytest.mark.parametrize(
    "locator",
    [{}, {"national_identity_number": ""}, {"shoe_size": "42"},
     {"national_identity_number": "X", "geographic_address": "Y"}, "FR-1985"],
)
def test_locator_holds_exactly_one_known_variant(locator):
    with pytest.raises(IncompletePacket):
        validate_packet(dict(PACKET, originator_locator=locator))


def exchanged(w: World):
    """Drive a transfer to InfoExchanged with hand-made packets and receipts."""
    rec = w.vasp.verify_counterparty(w.gathered(), 4)
    o, b = kp("vasp-o"), kp("vasp-b")
    tid = rec.transfer_id
    out_pkt = seal(o, PayloadType.TRAVEL_RULE_PACKET, {"packet": PACKET, "transfer_id": tid}, 5)
    in_pkt = seal(b, PayloadType.TRAVEL_RULE_PACKET, {"packet": PACKET, "transfer_id": tid}, 6)
    receipts = []
    for sender, receiver, pkt in ((o, b, out_pkt), (b, o, in_pkt)):
        sig = sign_delivery(sender, tid, pkt, 7)
        receipts.append(NonRepudiationReceipt(tid, pkt.digest(), sig, countersign(receiver, sig, 8)))
    for env in (out_pkt, in_pkt):
        w.vasp.retain(env, 9)
    rec.packets = [out_pkt, in_pkt]
    rec.receipts = receipts
    rec.advance(TransferState.INFO_EXCHANGED, 9)
    return rec


def test_valid_receipts_finalize_and_shift_balances():
    w = World()
    rec = w.vasp.finalize(exchanged(w), 10)
    assert rec.state is TransferState.FINALIZED
    assert w.ledger.balances == {"vasp-o/acct-s": 9_000, "vasp-b/acct-bob": 1_000}
    assert w.ledger.total() == w.ledger.minted


def test_tampered_receipt_blocks_finalization():
    w = World()
    rec = exchanged(w)
    r = rec.receipts[0]
    bad = dataclasses.replace(r.receiver_countersignature, signed_at=r.receiver_countersignature.signed_at + 1)
    rec.receipts[0] = dataclasses.replace(r, receiver_countersignature=bad)
    with pytest.raises(ReceiptInvalid):
        w.vasp.finalize(rec, 10)
    assert rec.state is TransferState.INFO_EXCHANGED
    assert w.ledger.balances == {"vasp-o/acct-s": 10_000}


def test_missing_direction_blocks_finalization():
    w = World()
    rec = exchanged(w)
    rec.receipts = rec.receipts[:1]
    with pytest.raises(ReceiptInvalid):
        w.vasp.finalize(rec, 10)


def test_double_finalize_moves_once():
    w = World()
    rec = exchanged(w)
    w.vasp.finalize(rec, 10)
    w.vasp.finalize(rec, 11)
    assert w.ledger.balances["vasp-o/acct-s"] == 9_000
    assert [h[1] for h in rec.history].count("Finalized") == 1


def test_ledger_moves_once_and_refuses_overdraw():
    ledger = AssetLedger()
    ledger.mint("v", "a", 100)
    assert ledger.move("T1", "v/a", "v/b", 60)
    assert not ledger.move("T1", "v/a", "v/b", 60)
    with pytest.raises(InsufficientFunds):
        ledger.move("T2", "v/a", "v/b", 60)
    assert ledger.total() == 100 == ledger.minted


def test_reject_is_final():
    rec = TransferRecord("T", "a", "b", "o", "b", 1)
    assert rec.reject("PolicyBlocked", 1)
    assert not rec.reject("ReceiptMissing", 2)
    assert rec.reason == "PolicyBlocked"


# -- over the simulated network ---------------------------------------------


def test_baseline_transfer_finalizes_on_both_sides():
    r = run("baseline")
    assert r.final_states() == {("vasp-b", "T1"): ("Finalized", None), ("vasp-o", "T1"): ("Finalized", None)}
    for row in r.reports:
        assert row["packet_field_groups"] == sorted(FIELD_GROUPS)
        assert len(row["receipt_hashes"]) == 2


def test_receipts_reconstruct_from_logs_alone():
    r = run("baseline")
    o, b = r.world.vasps["vasp-o"].log, r.world.vasps["vasp-b"].log
    receipts = reconstruct_receipts(o, b, "T1")
    assert len(receipts) == 2
    keys = r.world.keys
    for rc in receipts:
        assert rc.verify(keys[rc.sender_signature.signer_id], keys[rc.receiver_countersignature.signer_id])
    assert sorted(rc.receipt_hash.hex() for rc in receipts) == r.reports[0]["receipt_hashes"]


def test_deleting_a_receipt_from_one_log_is_detected():
    r = run("baseline")
    log = r.world.vasps["vasp-b"].log
    lines = log.dumps().splitlines(keepends=True)
    idx = next(i for i, e in enumerate(log) if e.envelope.payload_type is PayloadType.RECEIPT)
    cut = AuditLog.loads(b"".join(lines[:idx] + lines[idx + 1 :]), r.world.keys)
    assert not cut.verify_chain()
    with pytest.raises(ReceiptInvalid):
        reconstruct_receipts(r.world.vasps["vasp-o"].log, cut, "T1")


def test_receiver_never_countersigns():
    r = run("fault-drop-receipts")
    assert set(r.final_states().values()) == {("Rejected", "ReceiptMissing")}
    sent = [m for m in r.messages if m.payload_type is PayloadType.TRAVEL_RULE_PACKET]
    delivered = {e["msg_id"] for e in r.trace if e["kind"] == "deliver"}
    assert sent and all(m.msg_id in delivered for m in sent)
    for vasp in r.world.vasps.values():
        assert vasp.log.envelopes(PayloadType.TRAVEL_RULE_PACKET)
    assert r.world.ledger.balances["vasp-o/acct-alice"] == 1_000_000


def test_cp_unreachable_past_timeout():
    r = run("fault-delay-cp")
    rec = r.world.vasps["vasp-o"].transfers["T1"]
    assert (rec.state, rec.reason) == (TransferState.REJECTED, "ClaimsUnavailable")
    assert [h[1] for h in rec.history] == ["Initiated", "Rejected"]
    assert rec.claimsets == []


def test_jurisdiction_policy():
    states = run("policy").final_states()
    assert states[("vasp-o", "T1")] == ("Finalized", None)
    assert states[("vasp-o", "T2")] == ("Rejected", "PolicyBlocked")
    assert states[("vasp-o", "T3")] == ("Rejected", "PolicyBlocked")
    # the beneficiary demanded a residency claim for EU originators; it was sent
    b = run("policy").world.vasps["vasp-b"].transfers["T1"]
    assert {ref for cs in b.counterparty_claimsets for c in cs.claims for ref in c.algo_refs} >= {"residency v1"}


def test_key_evidence_outcomes():
    states = run("custody").final_states()
    assert states[("vasp-o", "T1")] == ("Finalized", None)
    assert states[("vasp-o", "T2")] == ("Rejected", "UntrustedRoot")
    assert states[("vasp-o", "T3")] == ("Rejected", "OwnershipUnattested")
    assert states[("vasp-o", "T4")] == ("Rejected", "OwnershipUnattested")


def test_withheld_field_group_rejects_transfer():
    r = run_scenario(ScenarioConfig.from_dict(library.mutation("beneficiary_account")))
    assert set(r.final_states().values()) == {("Rejected", "IncompletePacket")}
