from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from claimsnet.envelope import KeyDirectory, PayloadType, canonicalize, parse_canonical, seal
from claimsnet.network_sim.bus import BusMessage
from claimsnet.opal_provider import (
    AggregateTooSmall,
    AlgorithmDescriptor,
    AlgorithmRegistry,
    ConsentExpired,
    ConsentInvalid,
    ConsentMissing,
    DataProvider,
    Dataset,
    DuplicateAlgorithm,
    OutputKind,
    SchemaMismatch,
    SubjectNotFound,
    UnknownAlgorithm,
    VettingRequired,
    grant_consent,
    standard_registry,
)
from oracles import tx_range
from support import DAY, S_AMOUNTS, Ctx, bank_dataset, kp

TX = AlgorithmDescriptor(
    "tx-range", "v1", "Smallest and largest transaction amount.", OutputKind.SUBJECT_LEVEL, ("amount",), True
)


def provider(datasets=None, registry=None, k_min=5):
    keys = KeyDirectory()
    for name in ("S", "T", "U", "dp-bank"):
        keys.add(kp(name))
    return DataProvider(
        "dp-bank", kp("dp-bank"), keys, registry or standard_registry(), datasets or [bank_dataset()], k_min=k_min
    )


def consent(subject="S", algo="tx-range v1", audience="cp-1", now=0, ttl=DAY):
    return grant_consent(kp(subject), algo, audience, now, ttl)


def accounts(n):
    return Dataset(
        "census", "dp-bank", ("active", "balance"),
        [(f"s{i}", {"active": i % 2 == 0, "balance": 100 * i + 1}) for i in range(n)],
    )


def test_registered_algorithm_is_published():
    reg = AlgorithmRegistry().register(TX)
    assert "tx-range v1" in reg.published_refs()
    doc = parse_canonical(reg.publish())
    assert doc["algorithms"][0]["algo_id"] == "tx-range"


def test_unvetted_algorithm_cannot_run():
    reg = standard_registry(vetted=[])
    dp = provider(registry=reg)
    assert reg.published_refs() == set()
    with pytest.raises(VettingRequired):
        dp.execute("tx-range", "v1", {"subject_id": "S"}, consent(), 1, requester="cp-1")


def test_duplicate_registration():
    reg = AlgorithmRegistry().register(TX)
    with pytest.raises(DuplicateAlgorithm):
        reg.register(TX)


def test_unknown_algorithm():
    with pytest.raises(UnknownAlgorithm):
        provider().execute("nope", "v1", {}, None, 1, requester="cp-1")


def test_consent_grant_is_valid_and_scoped():
    c = consent()
    assert (c.subject_id, c.algo_id, c.audience) == ("S", "tx-range v1", "cp-1")
    assert c.is_valid(10, kp("S").public_key)


def test_consent_invalid_after_expiry():
    c = consent(ttl=100)
    assert c.is_valid(99, kp("S").public_key)
    assert not c.is_valid(100, kp("S").public_key)
    with pytest.raises(ConsentExpired):
        provider().execute("tx-range", "v1", {"subject_id": "S"}, c, 100, requester="cp-1")


def test_consent_signed_by_wrong_key_is_rejected_at_execution():
    forged = grant_consent(kp("T"), "tx-range v1", "cp-1", 0, DAY)
    forged = forged.__class__("S", forged.algo_id, forged.audience, 0, DAY, forged.envelope)
    with pytest.raises(ConsentInvalid):
        provider().execute("tx-range", "v1", {"subject_id": "S"}, forged, 1, requester="cp-1")


def test_consent_for_other_audience_is_rejected():
    with pytest.raises(ConsentInvalid):
        provider().execute("tx-range", "v1", {"subject_id": "S"}, consent(audience="cp-2"), 1, requester="cp-1")


def test_consent_failures_share_one_family():
    assert issubclass(ConsentExpired, ConsentMissing) and issubclass(ConsentInvalid, ConsentMissing)


def test_tx_range_six_monthly_amounts():
    assert tx_range(S_AMOUNTS) == {"min": 80, "max": 900}
    resp = provider().execute("tx-range", "v1", {"subject_id": "S"}, consent(), 5, requester="cp-1")
    assert resp.result == tx_range(S_AMOUNTS)
    assert resp.records_used == 6
    assert resp.subject_id == "S"
    p = resp.provenance
    assert (p.dataset_id, p.provider_id, p.algo_id, p.version, p.executed_at) == ("bank-tx", "dp-bank", "tx-range", "v1", 5)


def test_count_active_over_four_subjects_is_too_small():
    # hand count: s0..s3 are four distinct subjects, k_min is five
    with pytest.raises(AggregateTooSmall):
        provider([accounts(4)]).execute("count-active-accounts", "v1", {}, None, 1, requester="cp-1")


def test_aggregates_at_threshold():
    dp = provider([accounts(5)])
    resp = dp.execute("count-active-accounts", "v1", {}, None, 1, requester="cp-1")
    assert resp.result == {"active_accounts": 3} and resp.records_used == 5
    assert resp.subject_id is None and "subject_id" not in resp.to_wire()
    mean = dp.execute("mean-balance", "v1", {}, None, 1, requester="cp-1")
    assert mean.result == {"mean_balance": (1 + 101 + 201 + 301 + 401) // 5}


def test_no_consent_gives_consent_missing():
    with pytest.raises(ConsentMissing):
        provider().execute("tx-range", "v1", {"subject_id": "S"}, None, 1, requester="cp-1")


def test_subject_without_rows():
    with pytest.raises(SubjectNotFound):
        provider().execute("tx-range", "v1", {"subject_id": "U"}, consent("U"), 1, requester="cp-1")


def test_schema_mismatch():
    with pytest.raises(SchemaMismatch):
        Dataset("d", "p", ("amount",), [("S", {"amt": 1})])
    with pytest.raises(SchemaMismatch):
        provider().execute("mean-balance", "v1", {}, None, 1, requester="cp-1")


@settings(max_examples=50)
@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=30))
def test_tx_range_matches_oracle_and_needs_consent(amounts):
    ds = Dataset("bank-tx", "dp-bank", ("amount",), [("S", {"amount": a}) for a in amounts])
    dp = provider([ds])
    resp = dp.execute("tx-range", "v1", {"subject_id": "S"}, consent(), 1, requester="cp-1")
    assert resp.result == tx_range(amounts) and resp.records_used == len(amounts)
    with pytest.raises(ConsentMissing):
        dp.execute("tx-range", "v1", {"subject_id": "S"}, None, 1, requester="cp-1")


def test_dataset_file_round_trip(tmp_path):
    ds = bank_dataset()
    path = tmp_path / "bank.jsonl"
    path.write_bytes(ds.dumps())
    assert Dataset.load(path) == ds


def test_actor_response_carries_no_rows():
    dp = provider()
    ctx = Ctx(now=3)
    body = {
        "algo_id": "tx-range",
        "consent": consent().envelope.to_wire(),
        "correlation_id": "c1",
        "params": {"subject_id": "S"},
        "version": "v1",
    }
    env = seal(kp("cp-1"), PayloadType.ALGO_REQUEST, body, 3)
    dp.on_algo_request(BusMessage("m1", "cp-1", "dp-bank", env, 0, 3), parse_canonical(env.payload), ctx)
    ((_, to, out),) = ctx.posted
    assert to == "cp-1" and out.payload_type is PayloadType.ALGO_RESPONSE
    wire = canonicalize(out.to_wire()) + out.payload
    assert not any(enc in wire for enc in dp.record_encodings())
    assert dp.executions[-1]["outcome"] == "ok"
