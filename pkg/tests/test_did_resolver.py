from __future__ import annotations

import pytest

from claimsnet.did_resolver import (
    BadSignature,
    DidResolver,
    NotFound,
    StaleRecord,
    make_endpoint_record,
    pairwise_did,
)
from claimsnet.envelope import parse_canonical
from support import kp

DID = "did:claimsnet:alice"


def resolver() -> DidResolver:
    r = DidResolver()
    r.bind(DID, kp("alice").public_key)
    return r


def rec(t: int, endpoint: str = "bus://cp-1", signer: str = "alice"):
    return make_endpoint_record(kp(signer), DID, "cp-1", endpoint, t)


def test_first_record_becomes_head():
    r = resolver().register(rec(1))
    assert r.resolve(DID).recorded_at == 1


def test_later_record_replaces_head():
    r = resolver().register(rec(1, "bus://old")).register(rec(2, "bus://new"))
    assert r.resolve(DID).endpoint_address == "bus://new"


def test_equal_timestamp_is_stale():
    r = resolver().register(rec(5, "bus://a"))
    with pytest.raises(StaleRecord):
        r.register(rec(5, "bus://b"))


def test_newest_of_three_wins():
    r = resolver()
    for t in (1, 5, 9):
        r.register(rec(t))
    assert r.resolve(DID).recorded_at == 9


def test_unknown_did():
    with pytest.raises(NotFound):
        resolver().resolve("did:claimsnet:nobody")


def test_rejected_stale_register_leaves_head_unchanged():
    r = resolver()
    r.register(rec(1, "bus://a"))
    r.register(rec(7, "bus://b"))
    with pytest.raises(StaleRecord):
        r.register(rec(3, "bus://c"))
    # replay the history: the head is the last accepted entry
    accepted = [h for h in r.history if h["accepted"]]
    assert [h["recorded_at"] for h in r.history] == [1, 7, 3]
    assert r.resolve(DID).recorded_at == accepted[-1]["recorded_at"] == 7
    assert r.resolve(DID).endpoint_address == "bus://b"


def test_record_signed_by_another_key():
    with pytest.raises(BadSignature):
        resolver().register(rec(1, signer="mallory"))


def test_unbound_did():
    with pytest.raises(BadSignature):
        DidResolver().register(rec(1))


def test_rebinding_to_another_key_is_refused():
    r = resolver()
    with pytest.raises(BadSignature):
        r.bind(DID, kp("mallory").public_key)


def test_dump_is_line_per_event():
    r = resolver().register(rec(1))
    with pytest.raises(StaleRecord):
        r.register(rec(1))
    lines = [parse_canonical(ln) for ln in r.dumps().splitlines()]
    assert [ln["accepted"] for ln in lines] == [True, False]
    assert lines[1]["error"] == "StaleRecord"


def test_pairwise_did_is_a_naming_convention():
    assert pairwise_did("alice", "vasp-o") != pairwise_did("alice", "vasp-b")
