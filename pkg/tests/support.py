"""Small builders shared by the unit tests."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any

from claimsnet.claims_provider import ClaimsProvider, ClaimsRequest, PlannedExecution, make_credential
from claimsnet.envelope import KeyDirectory, KeyPair, SignedEnvelope
from claimsnet.network_sim import library
from claimsnet.network_sim.runner import run_scenario
from claimsnet.opal_provider import DataProvider, Dataset, grant_consent, parse_algo_ref, standard_registry

S_AMOUNTS = [120, 450, 80, 900, 300, 150]
DAY = 86_400_000


def kp(name: str) -> KeyPair:
    return KeyPair.from_seed(name, f"test|{name}".encode())


@dataclass
class Ctx:
    """Records what a node posts, schedules and traces."""

    now: int = 0
    posted: list[tuple[str, str, SignedEnvelope]] = field(default_factory=list)
    timers: list[tuple[str, str, int, int]] = field(default_factory=list)
    events: list[dict[str, Any]] = field(default_factory=list)

    def post(self, from_node: str, to_node: str, envelope: SignedEnvelope) -> None:
        self.posted.append((from_node, to_node, envelope))

    def schedule_timer(self, node_id: str, tag: str, generation: int, at: int) -> None:
        self.timers.append((node_id, tag, generation, at))

    def trace(self, kind: str, **fields: Any) -> None:
        self.events.append({"kind": kind, **fields})


def bank_dataset(provider_id: str = "dp-bank") -> Dataset:
    rows = [("S", {"amount": a}) for a in S_AMOUNTS]
    rows += [("T", {"amount": a}) for a in (5, 7)]
    return Dataset("bank-tx", provider_id, ("amount",), rows)


@dataclass
class Fixture:
    keys: KeyDirectory
    subject: KeyPair
    provider: DataProvider
    cp: ClaimsProvider
    vasp: KeyPair

    def token(self, refs: list[str], now: int = 0):
        return self.cp.auth.authenticate_vasp(self.vasp.key_id, make_credential(self.vasp, refs, now), refs, now)

    def request(self, refs: list[str], now: int = 0, subject: str = "S", rid: str = "r1") -> ClaimsRequest:
        return ClaimsRequest(rid, self.vasp.key_id, subject, tuple(refs), self.token(refs, now))

    def executor(self, now: int = 0):
        def run(step: PlannedExecution, params: dict[str, Any]):
            algo_id, version = parse_algo_ref(step.ref)
            return self.provider.execute(algo_id, version, params, step.consent, now, requester=self.cp.node_id)

        return run


def fixture(consent: bool = True) -> Fixture:
    keys = KeyDirectory()
    subject = keys.add(kp("S"))
    keys.add(kp("T"))
    vasp = keys.add(kp("vasp-o"))
    registry = standard_registry()
    provider = DataProvider("dp-bank", keys.add(kp("dp-bank")), keys, registry, [bank_dataset()])
    cp = ClaimsProvider(
        "cp-1", keys.add(kp("cp-1")), keys.add(kp("cp-1/as")), keys, registry, {"tx-range v1": "dp-bank"}
    )
    cp.auth.enroll("vasp-o", vasp.public_key, ["tx-range v1", "residency v1"])
    if consent:
        cp.add_consent(grant_consent(subject, "tx-range v1", "cp-1", 0, 30 * DAY))
    return Fixture(keys, subject, provider, cp, vasp)


@functools.lru_cache(maxsize=None)
def run(name: str, seed: int | None = None, parallel: bool | None = None):
    """Run a built-in scenario once per process; results are read-only."""
    return run_scenario(library.scenario(name), seed, parallel=parallel)
