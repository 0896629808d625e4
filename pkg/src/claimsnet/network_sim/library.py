"""Built-in scenarios. Each builder returns a plain dict; the JSON files in
``scenarios/`` are these dicts written out in canonical form."""

from __future__ import annotations

import copy
import random
from pathlib import Path
from typing import Any, Callable

from ..envelope import canonicalize
from .scenario import ScenarioConfig

SCENARIO_DIR = Path(__file__).with_name("scenarios")

_PEOPLE = [
    ("alice", "Alice Moreau", {"national_identity_number": "FR-1985-0412-77"}),
    ("bob", "Bob Tan", {"geographic_address": "12 Orchard Road, Singapore 238826"}),
    ("carol", "Carol Weiss", {"date_and_place_of_birth": "1979-03-02, Basel"}),
    ("dave", "Dave Okafor", {"customer_identification_number": "CUST-00419"}),
    ("erin", "Erin Walsh", {"national_identity_number": "IE-7731-88"}),
    ("frank", "Frank Lindqvist", {"geographic_address": "Storgatan 4, Uppsala"}),
    ("grace", "Grace Ho", {"customer_identification_number": "CUST-01112"}),
    ("heidi", "Heidi Brunner", {"date_and_place_of_birth": "1990-11-23, Graz"}),
]

ALL_SUBJECTS = [p[0] for p in _PEOPLE]
TX = "tx-range v1"
RES = "residency v1"
COUNT = "count-active-accounts v1"
MEAN = "mean-balance v1"


def _subjects(ids: list[str]) -> list[dict[str, Any]]:
    table = {sid: (name, loc) for sid, name, loc in _PEOPLE}
    return [{"id": sid, "locator": table[sid][1], "name": table[sid][0]} for sid in ids]


def _consent(subject: str, algo: str = TX, at: int = 0, cp: str = "cp-1", **extra: Any) -> dict[str, Any]:
    return {"algo": algo, "at": at, "audience": cp, "event": "grant_consent", "subject": subject, **extra}


def _onboard(vasp: str, subject: str, balance: int = 0, evidence: str = "ownership", **extra: Any) -> dict[str, Any]:
    ev = {
        "account": f"acct-{subject}",
        "at": 0,
        "balance": balance,
        "claims_provider": "cp-1",
        "event": "onboard",
        "key_evidence": evidence,
        "registry": "kr-eu",
        "subject": subject,
        "vasp": vasp,
    }
    ev.update(extra)
    if evidence == "none":
        ev.pop("registry")
    return ev


def _transfer(tid: str, origin: str, originator: str, dest: str, beneficiary: str, amount: int, at: int = 1000,
              **extra: Any) -> dict[str, Any]:
    return {
        "amount": amount,
        "at": at,
        "beneficiary": beneficiary,
        "beneficiary_vasp": dest,
        "event": "initiate_transfer",
        "originator": originator,
        "transfer_id": tid,
        "vasp": origin,
        **extra,
    }


def _world(name: str, seed: int = 42, subjects: list[str] | None = None) -> dict[str, Any]:
    """Two VASPs, one claims provider over three data providers, one CA."""
    subjects = subjects or ALL_SUBJECTS
    return {
        "algorithms": {"vetted": [TX, RES, COUNT, MEAN]},
        "claims_providers": [
            {
                "entitlements": {"vasp-b": [TX, RES, COUNT], "vasp-o": [TX, RES, COUNT]},
                "id": "cp-1",
                "providers": ["dp-bank", "dp-telco", "dp-census"],
            }
        ],
        "name": name,
        "providers": [
            {
                "datasets": [
                    {"dataset_id": "bank-tx", "synthetic": {"kind": "transactions", "rows_per_subject": 6, "subjects": subjects}}
                ],
                "hosted": [TX],
                "id": "dp-bank",
            },
            {
                "datasets": [
                    {"dataset_id": "telco-addr", "synthetic": {"kind": "residency", "rows_per_subject": 2, "subjects": subjects}}
                ],
                "hosted": [RES],
                "id": "dp-telco",
            },
            {
                "datasets": [
                    {"dataset_id": "census", "synthetic": {"kind": "accounts", "rows_per_subject": 1, "subjects": subjects}}
                ],
                "hosted": [COUNT, MEAN],
                "id": "dp-census",
            },
        ],
        "registries": [{"id": "kr-eu", "intermediates": 0, "root": "root-eu"}],
        "roots": ["root-eu"],
        "script": [],
        "seed": seed,
        "subjects": _subjects(subjects),
        "vasps": [
            {"claim_algos": [TX], "id": "vasp-o", "jurisdiction": "EU", "policy": {}, "trusted_roots": ["root-eu"]},
            {"claim_algos": [TX], "id": "vasp-b", "jurisdiction": "SG", "policy": {}, "trusted_roots": ["root-eu"]},
        ],
    }


def _pair_script(originator: str = "alice", beneficiary: str = "bob") -> list[dict[str, Any]]:
    return [
        _consent(originator),
        _consent(beneficiary),
        _onboard("vasp-o", originator, balance=1_000_000),
        _onboard("vasp-b", beneficiary, balance=0),
    ]


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def baseline(seed: int = 42) -> dict[str, Any]:
    d = _world("baseline", seed)
    d["script"] = _pair_script() + [_transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 1000)]
    return d


def mutation(field_group: str, seed: int = 42) -> dict[str, Any]:
    """Baseline with one Travel Rule field group withheld by the originator."""
    d = baseline(seed)
    d["name"] = f"mutation-{field_group}"
    d["script"][-1]["omit_packet_fields"] = [field_group]
    return d


def did(seed: int = 42) -> dict[str, Any]:
    d = _world("did", seed)
    d["resolver"] = {"id": "did-resolver"}
    did_a = "did:claimsnet:pw:alice:vasp-o"
    d["script"] = [
        _consent("alice"),
        _consent("bob"),
        {"at": 0, "claims_provider": "cp-1", "did": did_a, "endpoint": "bus://cp-old", "event": "register_did",
         "subject": "alice"},
        {"at": 10, "claims_provider": "cp-1", "did": did_a, "endpoint": "bus://cp-1", "event": "register_did",
         "subject": "alice"},
        # replay of an older record is refused
        {"at": 20, "claims_provider": "cp-1", "did": did_a, "endpoint": "bus://cp-stale", "event": "register_did",
         "recorded_at": 10, "subject": "alice"},
        _onboard("vasp-o", "alice", balance=1_000_000, claims_provider=None, did=did_a),
        _onboard("vasp-b", "bob"),
        _transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 2500),
    ]
    return d


def fault_drop_receipts(seed: int = 42) -> dict[str, Any]:
    d = _world("fault-drop-receipts", seed)
    d["script"] = _pair_script() + [
        {"at": 0, "event": "drop_message", "pattern": {"payload_type": "receipt"}},
        _transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 1000),
    ]
    return d


def fault_duplicate(seed: int = 42) -> dict[str, Any]:
    d = _world("fault-duplicate", seed)
    d["script"] = _pair_script() + [
        {"at": 0, "event": "duplicate_message", "pattern": {"payload_type": "travel_rule_packet"}},
        {"at": 0, "event": "duplicate_message", "pattern": {"payload_type": "settlement"}},
        _transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 1000),
    ]
    return d


def fault_delay_cp(seed: int = 42) -> dict[str, Any]:
    d = _world("fault-delay-cp", seed)
    d["script"] = _pair_script() + [
        {"at": 0, "delay_ms": 15_000, "event": "delay_message",
         "pattern": {"from": "cp-1", "payload_type": "claim_set", "to": "vasp-o"}},
        _transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 1000),
    ]
    return d


def fault_mixed(seed: int = 42) -> dict[str, Any]:
    """Several transfers; some receipts dropped once, some messages delayed."""
    d = _world("fault-mixed", seed)
    d["settings"] = {"jitter_ms": 30}
    d["script"] = [_consent(s) for s in ("alice", "bob", "carol", "dave")] + [
        _onboard("vasp-o", "alice", balance=500_000),
        _onboard("vasp-o", "carol", balance=500_000),
        _onboard("vasp-b", "bob"),
        _onboard("vasp-b", "dave"),
        {"at": 0, "event": "delay_message", "delay_ms": 400, "pattern": {"payload_type": "ready", "limit": 1}},
        {"at": 0, "event": "duplicate_message", "pattern": {"payload_type": "receipt", "limit": 2}},
        _transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 1000, at=1000),
        _transfer("T2", "vasp-o", "carol", "vasp-b", "dave", 777, at=1000),
        {"at": 60_000, "event": "drop_message", "pattern": {"from": "vasp-o", "payload_type": "receipt", "limit": 1}},
        _transfer("T3", "vasp-o", "alice", "vasp-b", "dave", 50, at=60_000),
        _transfer("T4", "vasp-o", "carol", "vasp-b", "bob", 60, at=120_000),
    ]
    return d


def policy(seed: int = 42) -> dict[str, Any]:
    d = _world("policy", seed)
    d["vasps"][0]["claim_algos"] = [TX, RES]
    d["vasps"][0]["policy"] = {"KP": "blocked"}
    d["vasps"][1]["policy"] = {"EU": {"require_extra_claim": RES}}
    d["vasps"].append(
        {"claim_algos": [TX], "id": "vasp-x", "jurisdiction": "KP", "policy": {}, "trusted_roots": ["root-eu"]}
    )
    d["vasps"].append(
        {"claim_algos": [TX], "id": "vasp-c", "jurisdiction": "CA",
         "policy": {"EU": {"require_extra_claim": MEAN}}, "trusted_roots": ["root-eu"]}
    )
    d["claims_providers"][0]["entitlements"].update({"vasp-c": [TX], "vasp-x": [TX]})
    d["script"] = [
        _consent("alice"),
        _consent("alice", RES),
        _consent("bob"),
        _consent("carol"),
        _consent("dave"),
        _onboard("vasp-o", "alice", balance=1_000_000),
        _onboard("vasp-b", "bob"),
        _onboard("vasp-x", "carol"),
        _onboard("vasp-c", "dave"),
        _transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 1000),
        _transfer("T2", "vasp-o", "alice", "vasp-x", "carol", 1000),
        _transfer("T3", "vasp-o", "alice", "vasp-c", "dave", 1000),
    ]
    return d


def custody(seed: int = 42) -> dict[str, Any]:
    d = _world("custody", seed)
    d["roots"].append("root-x")
    d["registries"].append({"id": "kr-x", "intermediates": 0, "root": "root-x"})
    d["vasps"][0]["trusted_roots"] = ["root-eu", "root-x"]
    d["script"] = [_consent(s) for s in ("alice", "bob", "carol", "dave", "erin")] + [
        _onboard("vasp-o", "alice", balance=1_000_000, evidence="custody"),
        _onboard("vasp-o", "carol", balance=1_000_000, registry="kr-x"),
        _onboard("vasp-o", "dave", balance=1_000_000, evidence="possession"),
        _onboard("vasp-o", "erin", balance=1_000_000, evidence="ownership", enrolled=False),
        _onboard("vasp-b", "bob"),
        _transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 1000),
        _transfer("T2", "vasp-o", "carol", "vasp-b", "bob", 1000),
        _transfer("T3", "vasp-o", "dave", "vasp-b", "bob", 1000),
        _transfer("T4", "vasp-o", "erin", "vasp-b", "bob", 1000),
    ]
    return d


def multi_ca(seed: int = 42) -> dict[str, Any]:
    d = _world("multi-ca", seed)
    d["registries"] = [{"id": "kr-eu", "intermediates": 3, "root": "root-eu"}]
    d["script"] = _pair_script() + [_transfer("T1", "vasp-o", "alice", "vasp-b", "bob", 4242)]
    return d


def sealed(seed: int = 42) -> dict[str, Any]:
    d = baseline(seed)
    d["name"] = "sealed"
    d["settings"] = {"sealed_transport": True}
    return d


def fuzz(seed: int = 7, transfers: int = 24) -> dict[str, Any]:
    """Randomized consents, claims requests and transfers across three VASPs,
    two claims providers and four data providers (one below k_min)."""
    rng = random.Random(f"fuzz|{seed}")
    d = _world("fuzz", seed)
    d["settings"] = {"jitter_ms": 40}
    d["providers"].append(
        {
            "datasets": [
                {"dataset_id": "tiny-census", "synthetic": {"kind": "accounts", "rows_per_subject": 1,
                                                             "subjects": ALL_SUBJECTS[:3]}}
            ],
            "hosted": [COUNT],
            "id": "dp-tiny",
        }
    )
    d["claims_providers"].append(
        {
            "entitlements": {"vasp-c": [TX, RES, COUNT], "vasp-o": [TX]},
            "id": "cp-2",
            "providers": ["dp-bank", "dp-tiny"],
        }
    )
    d["claims_providers"][0]["entitlements"]["vasp-c"] = [TX, RES, COUNT]
    d["vasps"][0]["claim_algos"] = [TX, RES, COUNT]
    d["vasps"][1]["claim_algos"] = [TX, RES]
    d["vasps"].append(
        {"claim_algos": [TX, COUNT], "id": "vasp-c", "jurisdiction": "CH", "policy": {}, "trusted_roots": ["root-eu"]}
    )
    vasps = ["vasp-o", "vasp-b", "vasp-c"]
    script: list[dict[str, Any]] = []
    for subject in ALL_SUBJECTS:
        for algo in (TX, RES):
            for cp in ("cp-1", "cp-2"):
                mode = rng.choice(["valid", "valid", "valid", "expired", "forged", "wrong_audience", "missing"])
                if mode == "valid":
                    script.append(_consent(subject, algo, cp=cp))
                elif mode == "expired":
                    script.append(_consent(subject, algo, cp=cp, ttl_ms=500))
                elif mode == "forged":
                    other = rng.choice([s for s in ALL_SUBJECTS if s != subject])
                    script.append(_consent(subject, algo, cp=cp, forged_by=other))
                elif mode == "wrong_audience":
                    other_cp = "cp-2" if cp == "cp-1" else "cp-1"
                    script.append(_consent(subject, algo, cp=other_cp, deliver_to=cp))
    homes: dict[str, str] = {}
    for subject in ALL_SUBJECTS:
        vasp = rng.choice(vasps)
        homes[subject] = vasp
        cp = "cp-2" if vasp == "vasp-c" and rng.random() < 0.5 else "cp-1"
        evidence = rng.choice(["ownership", "ownership", "ownership", "custody", "possession"])
        script.append(_onboard(vasp, subject, balance=rng.randint(10_000, 200_000), evidence=evidence,
                               claims_provider=cp))
    script.append({"at": 0, "event": "duplicate_message", "pattern": {"payload_type": "travel_rule_packet", "limit": 3}})
    script.append({"at": 0, "delay_ms": 700, "event": "delay_message", "pattern": {"payload_type": "algo_response", "limit": 4}})
    for i in range(transfers):
        a, b = rng.sample(ALL_SUBJECTS, 2)
        while homes[a] == homes[b]:
            a, b = rng.sample(ALL_SUBJECTS, 2)
        script.append(
            _transfer(f"F{i + 1}", homes[a], a, homes[b], b, rng.randint(1, 9_000), at=1000 + rng.randint(0, 40) * 250)
        )
    d["script"] = script
    return d


BUILDERS: dict[str, Callable[[], dict[str, Any]]] = {
    "baseline": baseline,
    "custody": custody,
    "did": did,
    "fault-delay-cp": fault_delay_cp,
    "fault-drop-receipts": fault_drop_receipts,
    "fault-duplicate": fault_duplicate,
    "fault-mixed": fault_mixed,
    "fuzz": fuzz,
    "multi-ca": multi_ca,
    "policy": policy,
    "sealed": sealed,
}

FAULT_SUITE = ("fault-drop-receipts", "fault-duplicate", "fault-delay-cp", "fault-mixed")


def scenario(name: str) -> ScenarioConfig:
    return ScenarioConfig.from_dict(copy.deepcopy(BUILDERS[name]()), base_dir=SCENARIO_DIR)


def scenario_path(name: str) -> Path:
    return SCENARIO_DIR / f"{name}.json"


def write_library(directory: str | Path = SCENARIO_DIR) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, build in BUILDERS.items():
        path = directory / f"{name}.json"
        path.write_bytes(canonicalize(build()) + b"\n")
        out.append(path)
    return out

