"""Scenario configuration: parsing, validation and synthetic datasets.

A scenario is a JSON document. Unknown event kinds, undeclared ids and
unknown algorithm references are rejected up front with :class:`ConfigInvalid`
naming the first offending reference.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from ..envelope import canonicalize
from ..opal_provider import CATALOGUE, Dataset
from ..vasp_node import FIELD_GROUPS, LOCATOR_KINDS
from .bus import FaultAction, MessagePattern

DAY_MS = 86_400_000

EVIDENCE_KINDS = ("ownership", "custody", "possession", "none")
FAULT_EVENTS = {"drop_message": "drop", "delay_message": "delay", "duplicate_message": "duplicate"}
EVENT_KINDS = ("grant_consent", "register_did", "onboard", "initiate_transfer", *FAULT_EVENTS)

_CITIES = (("Lisbon", "PT"), ("Tallinn", "EE"), ("Zurich", "CH"), ("Singapore", "SG"), ("Toronto", "CA"))


class ConfigInvalid(ValueError):
    def __init__(self, reference: str, problem: str) -> None:
        self.reference = reference
        super().__init__(f"{reference}: {problem}")


@dataclass(frozen=True)
class Settings:
    latency_ms: int = 50
    jitter_ms: int = 0
    sealed_transport: bool = False
    parallel: bool = False
    k_min: int = 5
    cp_timeout_ms: int = 10_000
    receipt_timeout_ms: int = 10_000
    ready_timeout_ms: int = 30_000
    collation_timeout_ms: int = 5_000
    claim_ttl_ms: int = 30 * DAY_MS
    token_ttl_ms: int = 3_600_000
    attestation_validity_ms: int = 365 * DAY_MS

    @classmethod
    def from_wire(cls, d: Mapping[str, Any]) -> Settings:
        known = {f.name: f for f in fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ConfigInvalid(f"settings.{key}", "unknown setting")
            want_bool = isinstance(known[key].default, bool)
            if want_bool != isinstance(value, bool) or not isinstance(value, int):
                raise ConfigInvalid(f"settings.{key}", f"bad value {value!r}")
            if not want_bool and value < 0:
                raise ConfigInvalid(f"settings.{key}", "must be non-negative")
        if d.get("latency_ms", 1) < 1:
            raise ConfigInvalid("settings.latency_ms", "must be at least 1")
        return cls(**d)


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    settings: Settings = field(default_factory=Settings)
    roots: list[str] = field(default_factory=list)
    registries: list[dict[str, Any]] = field(default_factory=list)
    vetted: list[str] | None = None
    providers: list[dict[str, Any]] = field(default_factory=list)
    claims_providers: list[dict[str, Any]] = field(default_factory=list)
    resolver: str | None = None
    vasps: list[dict[str, Any]] = field(default_factory=list)
    subjects: list[dict[str, Any]] = field(default_factory=list)
    script: list[dict[str, Any]] = field(default_factory=list)
    faults: list[dict[str, Any]] = field(default_factory=list)
    base_dir: Path | None = None
    source: dict[str, Any] = field(default_factory=dict, repr=False)

    # -- loading -----------------------------------------------------------

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str | Path | None = None) -> ScenarioConfig:
        allowed = {
            "name", "seed", "settings", "roots", "registries", "algorithms", "providers",
            "claims_providers", "resolver", "vasps", "subjects", "script", "faults",
        }
        for key in d:
            if key not in allowed:
                raise ConfigInvalid(key, "unknown top-level key")
        for key in ("name", "seed"):
            if key not in d:
                raise ConfigInvalid(key, "missing")
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            raise ConfigInvalid("seed", "must be an integer")
        cfg = cls(
            name=str(d["name"]),
            seed=d["seed"],
            settings=Settings.from_wire(d.get("settings", {})),
            roots=list(d.get("roots", [])),
            registries=[dict(r) for r in d.get("registries", [])],
            vetted=d.get("algorithms", {}).get("vetted"),
            providers=[dict(p) for p in d.get("providers", [])],
            claims_providers=[dict(c) for c in d.get("claims_providers", [])],
            resolver=(d.get("resolver") or {}).get("id"),
            vasps=[dict(v) for v in d.get("vasps", [])],
            subjects=[dict(s) for s in d.get("subjects", [])],
            script=[dict(e) for e in d.get("script", [])],
            faults=[dict(f) for f in d.get("faults", [])],
            base_dir=Path(base_dir) if base_dir is not None else None,
            source=copy.deepcopy(dict(d)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ScenarioConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(str(path), f"not JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self.source)

    def dumps(self) -> bytes:
        return canonicalize(self.source)

    def with_seed(self, seed: int) -> ScenarioConfig:
        d = self.to_dict()
        d["seed"] = seed
        return ScenarioConfig.from_dict(d, self.base_dir)

    # -- validation --------------------------------------------------------

    def node_ids(self) -> list[str]:
        ids = list(self.roots)
        ids += [r["id"] for r in self.registries]
        ids += [p["id"] for p in self.providers]
        ids += [c["id"] for c in self.claims_providers]
        ids += [v["id"] for v in self.vasps]
        if self.resolver:
            ids.append(self.resolver)
        return ids

    def validate(self) -> None:
        seen: set[str] = set()
        for key_id in self.node_ids() + [s.get("id", "") for s in self.subjects]:
            if not isinstance(key_id, str) or not key_id:
                raise ConfigInvalid("id", f"bad identifier {key_id!r}")
            if key_id in seen:
                raise ConfigInvalid(key_id, "declared twice")
            seen.add(key_id)

        roots = set(self.roots)
        registries = {r["id"] for r in self.registries}
        providers = {p["id"] for p in self.providers}
        cps = {c["id"] for c in self.claims_providers}
        vasps = {v["id"] for v in self.vasps}
        subjects = {s["id"] for s in self.subjects}

        def need(ref: str, value: Any, pool: set[str], what: str) -> None:
            if value not in pool:
                raise ConfigInvalid(ref, f"undeclared {what} {value!r}")

        def algo(ref: str, value: Any) -> None:
            if value not in CATALOGUE:
                raise ConfigInvalid(ref, f"unknown algorithm {value!r}")

        for i, ref in enumerate(self.vetted or []):
            algo(f"algorithms.vetted[{i}]", ref)
        for i, r in enumerate(self.registries):
            need(f"registries[{i}].root", r.get("root"), roots, "root")
            n = r.get("intermediates", 0)
            if not isinstance(n, int) or isinstance(n, bool) or n < 0:
                raise ConfigInvalid(f"registries[{i}].intermediates", "must be a non-negative integer")
        for i, p in enumerate(self.providers):
            for j, ref in enumerate(p.get("hosted", [])):
                algo(f"providers[{i}].hosted[{j}]", ref)
            if not p.get("datasets"):
                raise ConfigInvalid(f"providers[{i}].datasets", "a provider needs at least one dataset")
            for j, ds in enumerate(p["datasets"]):
                if not ({"file", "synthetic", "rows"} & set(ds)):
                    raise ConfigInvalid(f"providers[{i}].datasets[{j}]", "needs rows, file or synthetic")
                if "synthetic" in ds:
                    kind = ds["synthetic"].get("kind")
                    if kind not in SYNTHETIC_KINDS:
                        raise ConfigInvalid(f"providers[{i}].datasets[{j}].synthetic.kind", f"unknown kind {kind!r}")
                    for k, s in enumerate(ds["synthetic"].get("subjects", [])):
                        need(f"providers[{i}].datasets[{j}].synthetic.subjects[{k}]", s, subjects, "subject")
        for i, c in enumerate(self.claims_providers):
            for j, p in enumerate(c.get("providers", [])):
                need(f"claims_providers[{i}].providers[{j}]", p, providers, "provider")
            for vasp, refs in c.get("entitlements", {}).items():
                need(f"claims_providers[{i}].entitlements", vasp, vasps, "VASP")
                for j, ref in enumerate(refs):
                    algo(f"claims_providers[{i}].entitlements.{vasp}[{j}]", ref)
        for i, v in enumerate(self.vasps):
            if not v.get("jurisdiction"):
                raise ConfigInvalid(f"vasps[{i}].jurisdiction", "missing")
            for j, r in enumerate(v.get("trusted_roots", [])):
                need(f"vasps[{i}].trusted_roots[{j}]", r, roots, "root")
            for j, ref in enumerate(v.get("claim_algos", [])):
                algo(f"vasps[{i}].claim_algos[{j}]", ref)
            for juris, rule in v.get("policy", {}).items():
                ok = rule in ("allowed", "blocked") or (
                    isinstance(rule, Mapping) and set(rule) == {"require_extra_claim"}
                )
                if not ok:
                    raise ConfigInvalid(f"vasps[{i}].policy.{juris}", f"bad rule {rule!r}")
                if isinstance(rule, Mapping):
                    algo(f"vasps[{i}].policy.{juris}", rule["require_extra_claim"])
        for i, s in enumerate(self.subjects):
            loc = s.get("locator", {})
            if len(loc) != 1 or next(iter(loc)) not in LOCATOR_KINDS:
                raise ConfigInvalid(f"subjects[{i}].locator", "needs exactly one locator variant")
            if not s.get("name"):
                raise ConfigInvalid(f"subjects[{i}].name", "missing")
        for i, f in enumerate(self.faults):
            self._check_fault(f"faults[{i}]", f.get("pattern", {}), f.get("action"), f.get("delay_ms", 0))

        for i, ev in enumerate(self.script):
            ref = f"script[{i}]"
            kind = ev.get("event")
            if kind not in EVENT_KINDS:
                raise ConfigInvalid(f"{ref}.event", f"unknown event {kind!r}")
            at = ev.get("at", 0)
            if not isinstance(at, int) or isinstance(at, bool) or at < 0:
                raise ConfigInvalid(f"{ref}.at", "must be a non-negative integer")
            if kind == "grant_consent":
                need(f"{ref}.subject", ev.get("subject"), subjects, "subject")
                algo(f"{ref}.algo", ev.get("algo"))
                need(f"{ref}.audience", ev.get("audience"), cps, "claims provider")
                if "deliver_to" in ev:
                    need(f"{ref}.deliver_to", ev["deliver_to"], cps, "claims provider")
                if "forged_by" in ev:
                    need(f"{ref}.forged_by", ev["forged_by"], subjects, "subject")
            elif kind == "register_did":
                if not self.resolver:
                    raise ConfigInvalid(f"{ref}", "register_did needs a resolver")
                need(f"{ref}.subject", ev.get("subject"), subjects, "subject")
                need(f"{ref}.claims_provider", ev.get("claims_provider"), cps, "claims provider")
                if not ev.get("did"):
                    raise ConfigInvalid(f"{ref}.did", "missing")
            elif kind == "onboard":
                need(f"{ref}.vasp", ev.get("vasp"), vasps, "VASP")
                need(f"{ref}.subject", ev.get("subject"), subjects, "subject")
                if not ev.get("account"):
                    raise ConfigInvalid(f"{ref}.account", "missing")
                if "claims_provider" in ev and ev["claims_provider"] is not None:
                    need(f"{ref}.claims_provider", ev["claims_provider"], cps, "claims provider")
                evidence = ev.get("key_evidence", "ownership")
                if evidence not in EVIDENCE_KINDS:
                    raise ConfigInvalid(f"{ref}.key_evidence", f"unknown evidence {evidence!r}")
                if evidence != "none":
                    need(f"{ref}.registry", ev.get("registry"), registries, "registry")
                if ev.get("did") and not self.resolver:
                    raise ConfigInvalid(f"{ref}.did", "DIDs need a resolver")
            elif kind == "initiate_transfer":
                need(f"{ref}.vasp", ev.get("vasp"), vasps, "VASP")
                need(f"{ref}.beneficiary_vasp", ev.get("beneficiary_vasp"), vasps, "VASP")
                need(f"{ref}.originator", ev.get("originator"), subjects, "subject")
                need(f"{ref}.beneficiary", ev.get("beneficiary"), subjects, "subject")
                for j, g in enumerate(ev.get("omit_packet_fields", [])):
                    if g not in FIELD_GROUPS:
                        raise ConfigInvalid(f"{ref}.omit_packet_fields[{j}]", f"unknown field group {g!r}")
            else:
                self._check_fault(ref, ev.get("pattern", {}), FAULT_EVENTS[kind], ev.get("delay_ms", 0))

    def _check_fault(self, ref: str, pattern: Mapping[str, Any], action: Any, delay_ms: int) -> None:
        ids = set(self.node_ids())
        for end in ("from", "to"):
            if end in pattern and pattern[end] not in ids:
                raise ConfigInvalid(f"{ref}.pattern.{end}", f"undeclared node {pattern[end]!r}")
        try:
            MessagePattern.from_wire(pattern)
            FaultAction(action, delay_ms)
        except ValueError as exc:
            raise ConfigInvalid(ref, str(exc)) from exc


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

SYNTHETIC_KINDS = {
    "transactions": ("amount",),
    "residency": ("city", "country", "postcode"),
    "accounts": ("active", "balance"),
}


def synthetic_dataset(
    dataset_id: str,
    provider_id: str,
    kind: str,
    subjects: list[str],
    rows_per_subject: int,
    seed: int | str,
) -> Dataset:
    """Reproducible synthetic records for the given subjects."""
    rng = random.Random(f"dataset|{seed}|{dataset_id}")
    rows: list[tuple[str, dict[str, Any]]] = []
    for subject in subjects:
        n = rng.randint(1, rows_per_subject) if rows_per_subject > 1 else 1
        for _ in range(n):
            if kind == "transactions":
                fields_ = {"amount": rng.randint(1, 250_000)}
            elif kind == "residency":
                city, country = rng.choice(_CITIES)
                fields_ = {"city": city, "country": country, "postcode": f"{rng.randint(1000, 99999)}"}
            else:
                fields_ = {"active": rng.random() < 0.7, "balance": rng.randint(0, 5_000_000)}
            rows.append((subject, fields_))
    rng.shuffle(rows)
    return Dataset(dataset_id, provider_id, SYNTHETIC_KINDS[kind], rows)


def build_dataset(entry: Mapping[str, Any], provider_id: str, seed: int, base_dir: Path | None) -> Dataset:
    if "synthetic" in entry:
        s = entry["synthetic"]
        return synthetic_dataset(
            entry["dataset_id"], provider_id, s["kind"], list(s["subjects"]), s.get("rows_per_subject", 4), seed
        )
    if "file" in entry:
        path = Path(entry["file"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return Dataset.load(path, provider_id)
    return Dataset.from_wire(entry, provider_id)
