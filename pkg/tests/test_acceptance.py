"""End-to-end acceptance criteria. Each test prints one PASS/FAIL line."""

from __future__ import annotations

import json
import random
import time
from collections import Counter

import pytest

from claimsnet.audit_log import AuditLog
from claimsnet.claims_provider import ClaimsProvider, ClaimsRequest
from claimsnet.did_resolver import DidResolver, StaleRecord, make_endpoint_record
from claimsnet.envelope import KeyDirectory, KeyPair, PayloadType
from claimsnet.key_registry import Authority, EnrollmentMissing, KeyRegistry, OwnershipEvidence, respond_to_challenge
from claimsnet.network_sim import library
from claimsnet.network_sim.runner import run_scenario
from claimsnet.network_sim.scenario import ScenarioConfig
from claimsnet.opal_provider import CATALOGUE, DataProvider, Dataset, grant_consent, standard_registry
from claimsnet.vasp_node import (
    FIELD_GROUPS,
    AssetLedger,
    Customer,
    OwnershipUnattested,
    ReceiptInvalid,
    TransferState,
    VaspNode,
    reconstruct_receipts,
)
from oracles import decoded_layers, envelope_ok, naive_canonical, tx_range, unb64url, walk_log
from support import fixture, kp

K_MIN = 5
CONSENT_FAMILY = {"ConsentMissing", "ConsentExpired", "ConsentInvalid"}


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def wire(msg) -> dict:
    return json.loads(naive_canonical(msg.envelope.to_wire()))


def body(env_wire: dict) -> dict:
    return json.loads(unb64url(env_wire["payload"]))


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_travel_rule_packet(verdict):
    start = time.perf_counter()
    base = run_scenario(library.scenario("baseline"))
    groups_ok = True
    for m in base.messages:
        if m.payload_type is PayloadType.TRAVEL_RULE_PACKET:
            inner = body(body(wire(m))["packet"])
            groups_ok &= all(inner["packet"].get(g) for g in FIELD_GROUPS)
    finalized = set(base.final_states().values()) == {("Finalized", None)}
    rejected = 0
    for group in FIELD_GROUPS:
        r = run_scenario(ScenarioConfig.from_dict(library.mutation(group)))
        reasons = {reason for _, reason in r.final_states().values()}
        rejected += reasons == {"IncompletePacket"} and r.world.ledger.balances["vasp-o/acct-alice"] == 1_000_000
    elapsed = time.perf_counter() - start
    ok = groups_ok and finalized and rejected == 5 and elapsed < 5
    verdict(1, ok, f"baseline 5/5 groups={groups_ok} finalized={finalized}; "
                   f"mutations rejected {rejected}/5 with IncompletePacket; {elapsed:.2f}s (<5s)")


# -- 2 -----------------------------------------------------------------------


def consent_valid(consent_wire: dict | None, row: dict, keys: KeyDirectory) -> bool:
    """Judge a consent envelope from scratch against one execution row."""
    if consent_wire is None:
        return False
    subject = row["subject_id"]
    pub = keys.get(subject)
    if pub is None or consent_wire.get("signer_id") != subject or consent_wire.get("payload_type") != "consent":
        return False
    if not envelope_ok(consent_wire, pub):
        return False
    c = body(consent_wire)
    return (
        c["subject_id"] == subject
        and c["algo"] == row["algo"]
        and c["audience"] == row["requester"]
        and c["granted_at"] <= row["at"] < c["expires_at"]
    )


def test_criterion_2_privacy_under_fuzz(verdict):
    start = time.perf_counter()
    r = run_scenario(library.scenario("fuzz"))
    world = r.world
    n_msgs = len(r.messages)

    # (a) no raw record bytes anywhere on the wire, nested layers decoded
    needles = {enc for dp in world.providers.values() for enc in dp.record_encodings()}
    leaks = 0
    for m in r.messages:
        for layer in decoded_layers(wire(m)):
            leaks += sum(1 for n in needles if n in layer)

    # (b) every aggregate answer rests on at least k_min subjects
    aggregates, small = [], 0
    for m in r.messages:
        if m.payload_type is PayloadType.ALGO_RESPONSE:
            resp = body(wire(m))["response"]
            if resp["output_kind"] == "aggregate":
                aggregates.append(resp["records_used"])
        if m.payload_type is PayloadType.ERROR and body(wire(m))["error"] == "AggregateTooSmall":
            small += 1
    agg_ok = all(u >= K_MIN for u in aggregates)

    # (c) subject-level runs without valid consent all fail in the consent family
    subject_level = {ref for ref, e in CATALOGUE.items() if e.descriptor.output_kind.value == "subject_level"}
    unconsented = consented_ok = 0
    wrong = []
    for dp in world.providers.values():
        for row in dp.executions:
            if row["algo"] not in subject_level:
                continue
            if consent_valid(row["consent"], row, world.keys):
                consented_ok += row["outcome"] == "ok"
                continue
            unconsented += 1
            if row["outcome"] not in CONSENT_FAMILY:
                wrong.append(row["outcome"])
    elapsed = time.perf_counter() - start
    ok = n_msgs >= 200 and leaks == 0 and agg_ok and aggregates and unconsented > 0 and not wrong and elapsed < 30
    verdict(
        2, ok,
        f"{n_msgs} messages; (a) raw-row hits {leaks}; (b) {len(aggregates)} aggregate answers, "
        f"min records_used {min(aggregates, default=None)} (k_min {K_MIN}), {small} refused as too small; "
        f"(c) {unconsented - len(wrong)}/{unconsented} unconsented runs refused with consent errors "
        f"({consented_ok} consented runs ok); {elapsed:.2f}s (<30s)",
    )


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_possession_is_not_ownership(verdict):
    keys = KeyDirectory()
    root = Authority.root(keys.add(kp("root")))
    registry = KeyRegistry(root.delegate(keys.add(kp("kr")), 0), keys, seed=3)
    f = fixture()
    f.keys.add(kp("root"))
    node = VaspNode("vasp-o", f.vasp, f.keys, jurisdiction="EU", trusted_roots={"root": keys["root"]},
                    ledger=AssetLedger())
    rng = random.Random("criterion-3")
    registry_refusals = node_refusals = 0
    for i in range(1000):
        holder = f.keys.add(KeyPair.from_seed(f"h{i}", rng.randbytes(32)))
        now = rng.randint(0, 10_000_000)
        challenge = registry.new_challenge(holder.public_key, now)
        proof = respond_to_challenge(holder, challenge, now)
        assert registry.check_response(challenge.nonce, proof)
        # no enrollment at all, or an enrollment for somebody else's key
        enrollment = None
        if rng.random() < 0.5:
            enrollment = registry.enroll(holder.key_id, KeyPair.from_seed("o", rng.randbytes(32)).public_key, now)
        try:
            registry.issue_ownership(holder.key_id, holder.public_key, OwnershipEvidence(proof, enrollment), now)
        except EnrollmentMissing:
            registry_refusals += 1
        node.onboard(Customer("S", "Sam", "acct-s", {"customer_identification_number": "C"}, holder.public_key,
                              claims_provider="cp-1", evidence=proof), now)
        rec = node.initiate_transfer("S", "bob", "vasp-b", 1 + i, now, beneficiary_name="Bob", beneficiary_account="b")
        rec.advance(TransferState.CLAIMS_GATHERED, now)
        try:
            node.verify_counterparty(rec, now)
        except OwnershipUnattested:
            node_refusals += rec.state is TransferState.CLAIMS_GATHERED
    network = run_scenario(library.scenario("custody")).final_states()
    over_bus = network[("vasp-o", "T3")] == network[("vasp-o", "T4")] == ("Rejected", "OwnershipUnattested")
    ok = registry_refusals == 1000 and node_refusals == 1000 and over_bus
    verdict(3, ok, f"registry refused {registry_refusals}/1000, VASP returned OwnershipUnattested "
                   f"{node_refusals}/1000; over the network possession-only and unenrolled rejected={over_bus}")


# -- 4 -----------------------------------------------------------------------


def drop_variant(pattern: dict, seed: int) -> ScenarioConfig:
    d = library.baseline(seed)
    d["settings"] = {"jitter_ms": 40}
    d["script"].insert(0, {"at": 0, "event": "drop_message", "pattern": pattern})
    return ScenarioConfig.from_dict(d)


def test_criterion_4_non_repudiation(verdict):
    # receipts reconstruct from logs alone for every finalized transfer
    finalized = rebuilt = 0
    runs = [run_scenario(library.scenario(name)) for name in library.FAULT_SUITE]
    for r in runs:
        for (vasp_id, tid), (state, _) in r.final_states().items():
            if state != "Finalized":
                continue
            rec = r.world.vasps[vasp_id].transfers[tid]
            if rec.role != "originator":
                continue
            finalized += 1
            o = r.world.vasps[rec.originating_vasp].log
            b = r.world.vasps[rec.beneficiary_vasp].log
            try:
                receipts = reconstruct_receipts(o, b, tid)
            except ReceiptInvalid:
                continue
            rebuilt += len(receipts) == 2 and all(
                rc.verify(r.world.keys[rc.sender_signature.signer_id],
                          r.world.keys[rc.receiver_countersignature.signer_id])
                for rc in receipts
            )

    # countersignatures withheld: all receipts, or the receiver's only
    cases = rejected = 0
    for pattern in ({"payload_type": "receipt"}, {"from": "vasp-b", "payload_type": "receipt"}):
        for seed in range(1, 6):
            r = run_scenario(drop_variant(pattern, seed))
            for state in r.final_states().values():
                cases += 1
                rejected += state == ("Rejected", "ReceiptMissing")

    # any single flipped byte in a persisted log breaks the chain
    rng = random.Random("criterion-4")
    flips = caught = 0
    for r in runs:
        for node_id in ("vasp-o", "vasp-b"):
            data = r.files[f"logs/{node_id}.log"]
            assert walk_log(data, r.world.keys.to_wire())
            for pos in rng.sample(range(len(data)), 150):
                tampered = bytearray(data)
                tampered[pos] ^= 1 << rng.randrange(8)
                flips += 1
                log = AuditLog.loads(bytes(tampered), r.world.keys, node_id)
                caught += not log.verify_chain()
    ok = finalized > 0 and rebuilt == finalized and cases > 0 and rejected == cases and caught == flips
    verdict(4, ok, f"receipts rebuilt for {rebuilt}/{finalized} finalized transfers; "
                   f"withheld countersignatures rejected {rejected}/{cases}; tampered logs caught {caught}/{flips}")


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_pds_mirror(verdict):
    mismatched = []
    total = 0
    for name in sorted(library.BUILDERS):
        r = run_scenario(library.scenario(name))
        delivered: Counter = Counter()
        for m in r.messages:
            if m.payload_type is PayloadType.CLAIM_SET and m.from_node in r.world.claims_providers:
                inner = body(wire(m))["claimset"]
                delivered[(m.from_node, body(inner)["subject_id"], naive_canonical(inner))] += 1
        stored: Counter = Counter()
        for path, data in r.files.items():
            if path.startswith("pds/"):
                _, cp_id, fname = path.split("/")
                for line in data.splitlines():
                    stored[(cp_id, fname.removesuffix(".jsonl"), line)] += 1
        total += sum(delivered.values())
        if delivered != stored:
            mismatched.append(name)
    ok = not mismatched and total > 0
    verdict(5, ok, f"{total} delivered claim sets across {len(library.BUILDERS)} scenarios; "
                   f"scenarios with delivered != PDS: {mismatched or 'none'}")


# -- 6 -----------------------------------------------------------------------


def test_criterion_6_did_ordering(verdict):
    rng = random.Random("criterion-6")
    dids = [f"did:claimsnet:s{i}" for i in range(4)]
    owners = {d: kp(d) for d in dids}
    resolver = DidResolver()
    for d in dids:
        resolver.bind(d, owners[d].public_key)
    heads: dict[str, int] = {}
    monotone = True
    equal = equal_rejected = 0
    for _ in range(1000):
        d = rng.choice(dids)
        head = heads.get(d)
        roll = rng.random()
        if head is None or roll < 0.5:
            t = (head or 0) + rng.randint(1, 50)
        elif roll < 0.8:
            t = head
        else:
            t = max(0, head - rng.randint(1, 50))
        try:
            resolver.register(make_endpoint_record(owners[d], d, "cp-1", f"bus://cp-{t}", t))
        except StaleRecord:
            equal_rejected += t == head
        equal += t == head
        now = resolver.resolve(d).recorded_at
        monotone &= head is None or now >= head
        heads[d] = now
    accepted: dict[str, list[int]] = {}
    for h in resolver.history:
        if h["accepted"]:
            accepted.setdefault(h["did"], []).append(h["recorded_at"])
    monotone &= all(ts == sorted(ts) for ts in accepted.values())
    ok = monotone and equal > 0 and equal_rejected == equal
    verdict(6, ok, f"1000 ops over {len(dids)} DIDs; head recorded_at non-decreasing={monotone}; "
                   f"equal-timestamp updates rejected {equal_rejected}/{equal}")


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_determinism_and_conservation(verdict):
    start = time.perf_counter()
    differing, leaking = [], []
    for name in sorted(library.BUILDERS):
        a = run_scenario(library.scenario(name))
        b = run_scenario(library.scenario(name))
        if a.files != b.files:
            differing.append(name)
        ledger = a.world.ledger
        if sum(ledger.balances.values()) != ledger.minted:
            leaking.append(name)
    elapsed = time.perf_counter() - start
    ok = not differing and not leaking and elapsed < 120
    verdict(7, ok, f"{len(library.BUILDERS)} scenarios run twice; byte-different: {differing or 'none'}; "
                   f"value not conserved: {leaking or 'none'}; {elapsed:.1f}s (<120s)")


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_tx_range_matches_brute_force(verdict):
    rng = random.Random("criterion-8")
    keys = KeyDirectory()
    subjects = {f"u{i:03d}": keys.add(kp(f"u{i:03d}")) for i in range(100)}
    amounts = {s: [rng.randint(1, 1_000_000) for _ in range(rng.randint(1, 12))] for s in subjects}
    rows = [(s, {"amount": a}) for s, xs in amounts.items() for a in xs]
    registry = standard_registry()
    provider = DataProvider("dp-bank", keys.add(kp("dp-bank")), keys, registry,
                            [Dataset("bank-tx", "dp-bank", ("amount",), rows)])
    cp = ClaimsProvider("cp-1", keys.add(kp("cp-1")), keys.add(kp("cp-1/as")), keys, registry,
                        {"tx-range v1": "dp-bank"})
    vasp = keys.add(kp("vasp-o"))
    cp.auth.enroll("vasp-o", vasp.public_key, ["tx-range v1"])
    f = fixture()
    f.cp, f.provider, f.vasp = cp, provider, vasp
    matches = 0
    for i, (s, holder) in enumerate(subjects.items()):
        cp.add_consent(grant_consent(holder, "tx-range v1", "cp-1", 0, 10_000))
        req = ClaimsRequest(f"r{i}", "vasp-o", s, ("tx-range v1",), f.token(["tx-range v1"], i))
        cs = cp.handle_request(req, i, f.executor(i))
        want = tx_range(amounts[s])
        matches += cs.claims[0].attributes == {"tx_max": want["max"], "tx_min": want["min"]}
    verdict(8, matches == 100, f"tx-range claim equals brute force for {matches}/100 subjects")
