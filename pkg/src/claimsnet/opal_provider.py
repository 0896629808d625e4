"""Data Provider runtime for open-algorithm execution.

Raw subject data stays inside :class:`DataProvider`. Requesters name a vetted
algorithm from the shared registry plus parameters; the provider executes it
locally and returns only the derived result with provenance. Aggregate
algorithms are refused below ``k_min`` contributing subjects, and
subject-level algorithms require a signed, unexpired consent from that
subject naming the algorithm and the requesting audience.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
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

DEFAULT_K_MIN = 5


class OpalError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


class UnknownAlgorithm(OpalError):
    pass


class DuplicateAlgorithm(OpalError):
    pass


class VettingRequired(OpalError):
    pass


class SchemaMismatch(OpalError):
    pass


class ConsentMissing(OpalError):
    """No valid consent covers this subject-level execution."""


class ConsentExpired(ConsentMissing):
    pass


class ConsentInvalid(ConsentMissing):
    """A consent was presented but its signature or scope is wrong."""


class AggregateTooSmall(OpalError):
    pass


class SubjectNotFound(OpalError):
    pass


ERRORS: dict[str, type[OpalError]] = {
    cls.__name__: cls
    for cls in (
        UnknownAlgorithm,
        DuplicateAlgorithm,
        VettingRequired,
        SchemaMismatch,
        ConsentMissing,
        ConsentExpired,
        ConsentInvalid,
        AggregateTooSmall,
        SubjectNotFound,
    )
}


class OutputKind(str, Enum):
    AGGREGATE = "aggregate"
    SUBJECT_LEVEL = "subject_level"


def algo_ref(algo_id: str, version: str) -> str:
    return f"{algo_id} {version}"


def parse_algo_ref(ref: str) -> tuple[str, str]:
    algo_id, sep, version = ref.rpartition(" ")
    if not sep or not algo_id or not version:
        raise UnknownAlgorithm(f"malformed algorithm reference {ref!r}")
    return algo_id, version


# ---------------------------------------------------------------------------
# algorithm registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlgorithmDescriptor:
    algo_id: str
    version: str
    lay_description: str
    output_kind: OutputKind
    required_schema: tuple[str, ...]
    vetted: bool = False

    def __post_init__(self) -> None:
        if not (self.algo_id and self.version and self.lay_description and self.required_schema):
            raise ValueError("descriptor fields must be non-empty")
        object.__setattr__(self, "output_kind", OutputKind(self.output_kind))
        object.__setattr__(self, "required_schema", tuple(self.required_schema))

    @property
    def ref(self) -> str:
        return algo_ref(self.algo_id, self.version)

    def to_wire(self) -> dict[str, Any]:
        return {
            "algo_id": self.algo_id,
            "lay_description": self.lay_description,
            "output_kind": self.output_kind.value,
            "required_schema": list(self.required_schema),
            "version": self.version,
            "vetted": self.vetted,
        }


Rows = list[tuple[str, dict[str, Any]]]
AlgorithmFn = Callable[[Rows, Mapping[str, Any]], tuple[Any, int]]


class AlgorithmRegistry:
    """Descriptors keyed by ``(algo_id, version)``; only vetted ones run."""

    def __init__(self) -> None:
        self._descriptors: dict[tuple[str, str], AlgorithmDescriptor] = {}

    def register(self, descriptor: AlgorithmDescriptor) -> AlgorithmRegistry:
        key = (descriptor.algo_id, descriptor.version)
        if key in self._descriptors:
            raise DuplicateAlgorithm(descriptor.ref)
        self._descriptors[key] = descriptor
        return self

    def get(self, algo_id: str, version: str) -> AlgorithmDescriptor:
        try:
            return self._descriptors[(algo_id, version)]
        except KeyError:
            raise UnknownAlgorithm(algo_ref(algo_id, version)) from None

    def lookup(self, ref: str) -> AlgorithmDescriptor:
        return self.get(*parse_algo_ref(ref))

    def __contains__(self, ref: object) -> bool:
        try:
            self.lookup(str(ref))
        except UnknownAlgorithm:
            return False
        return True

    def published(self) -> list[AlgorithmDescriptor]:
        return sorted(
            (d for d in self._descriptors.values() if d.vetted),
            key=lambda d: (d.algo_id, d.version),
        )

    def published_refs(self) -> set[str]:
        return {d.ref for d in self.published()}

    def publish(self) -> bytes:
        """The published list of vetted algorithms, as a canonical document."""
        return canonicalize({"algorithms": [d.to_wire() for d in self.published()]})


def _tx_range(rows: Rows, params: Mapping[str, Any]) -> tuple[Any, int]:
    amounts = [fields["amount"] for _, fields in rows]
    return {"max": max(amounts), "min": min(amounts)}, len(amounts)


def _residency(rows: Rows, params: Mapping[str, Any]) -> tuple[Any, int]:
    _, latest = rows[-1]
    return {"city": latest["city"], "country": latest["country"]}, 1


def _count_active(rows: Rows, params: Mapping[str, Any]) -> tuple[Any, int]:
    subjects = {s for s, _ in rows}
    active = {s for s, fields in rows if fields["active"] is True}
    return {"active_accounts": len(active)}, len(subjects)


def _mean_balance(rows: Rows, params: Mapping[str, Any]) -> tuple[Any, int]:
    latest: dict[str, int] = {}
    for s, fields in rows:
        latest[s] = fields["balance"]
    # integer floor mean: the wire model has no floats
    return {"mean_balance": sum(latest.values()) // len(latest)}, len(latest)


@dataclass(frozen=True)
class CatalogueEntry:
    descriptor: AlgorithmDescriptor
    fn: AlgorithmFn


CATALOGUE: dict[str, CatalogueEntry] = {
    e.descriptor.ref: e
    for e in (
        CatalogueEntry(
            AlgorithmDescriptor(
                "tx-range",
                "v1",
                "Smallest and largest transaction amount recorded for you.",
                OutputKind.SUBJECT_LEVEL,
                ("amount",),
            ),
            _tx_range,
        ),
        CatalogueEntry(
            AlgorithmDescriptor(
                "residency",
                "v1",
                "The city and country where your records say you live.",
                OutputKind.SUBJECT_LEVEL,
                ("city", "country"),
            ),
            _residency,
        ),
        CatalogueEntry(
            AlgorithmDescriptor(
                "count-active-accounts",
                "v1",
                "How many customers of this provider hold an active account.",
                OutputKind.AGGREGATE,
                ("active",),
            ),
            _count_active,
        ),
        CatalogueEntry(
            AlgorithmDescriptor(
                "mean-balance",
                "v1",
                "Average account balance across customers, rounded down.",
                OutputKind.AGGREGATE,
                ("balance",),
            ),
            _mean_balance,
        ),
    )
}


def standard_registry(vetted: Iterable[str] | None = None) -> AlgorithmRegistry:
    """Registry holding the whole catalogue; ``vetted`` lists the refs marked
    vetted (all of them when None)."""
    allowed = set(CATALOGUE) if vetted is None else set(vetted)
    unknown = allowed - set(CATALOGUE)
    if unknown:
        raise UnknownAlgorithm(", ".join(sorted(unknown)))
    registry = AlgorithmRegistry()
    for ref, entry in CATALOGUE.items():
        d = entry.descriptor
        registry.register(
            AlgorithmDescriptor(
                d.algo_id, d.version, d.lay_description, d.output_kind, d.required_schema, ref in allowed
            )
        )
    return registry


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    dataset_id: str
    provider_id: str
    schema: tuple[str, ...]
    records: list[tuple[str, dict[str, Any]]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.schema = tuple(self.schema)
        want = set(self.schema)
        for i, (subject_id, fields) in enumerate(self.records):
            if set(fields) != want:
                raise SchemaMismatch(
                    f"{self.dataset_id} row {i} ({subject_id}) has fields {sorted(fields)}, schema {sorted(want)}"
                )

    def subjects(self) -> set[str]:
        return {s for s, _ in self.records}

    def rows_for(self, subject_id: str) -> Rows:
        return [(s, dict(f)) for s, f in self.records if s == subject_id]

    def record_encodings(self) -> list[bytes]:
        """Canonical bytes of every record, as a whole row and as the bare
        field map; used to scan outbound traffic for leaks."""
        out = []
        for s, fields in self.records:
            out.append(canonicalize({"fields": fields, "subject_id": s}))
            out.append(canonicalize(fields))
        return out

    @classmethod
    def from_wire(cls, data: Mapping[str, Any], provider_id: str | None = None) -> Dataset:
        rows = [(r["subject_id"], dict(r["fields"])) for r in data.get("rows", [])]
        return cls(
            dataset_id=data["dataset_id"],
            provider_id=provider_id or data["provider_id"],
            schema=tuple(data["schema"]),
            records=rows,
        )

    @classmethod
    def load(cls, path: str | Path, provider_id: str | None = None) -> Dataset:
        """Record-per-line file: a header ``{dataset_id, provider_id, schema}``
        followed by ``{subject_id, fields}`` rows."""
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise SchemaMismatch(f"{path}: empty dataset file")
        header = json.loads(lines[0])
        header = dict(header, rows=[json.loads(ln) for ln in lines[1:]])
        header.setdefault("provider_id", provider_id)
        return cls.from_wire(header, provider_id)

    def dumps(self) -> bytes:
        head = canonicalize(
            {"dataset_id": self.dataset_id, "provider_id": self.provider_id, "schema": list(self.schema)}
        )
        rows = [canonicalize({"fields": f, "subject_id": s}) for s, f in self.records]
        return b"\n".join([head, *rows]) + b"\n"


# ---------------------------------------------------------------------------
# consent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConsentRecord:
    subject_id: str
    algo_id: str  # algorithm reference, e.g. "tx-range v1"
    audience: str
    granted_at: int
    expires_at: int
    envelope: SignedEnvelope

    @classmethod
    def from_envelope(cls, envelope: SignedEnvelope) -> ConsentRecord:
        if envelope.payload_type != PayloadType.CONSENT:
            raise ConsentInvalid("not a consent envelope")
        try:
            b = envelope.body()
            return cls(b["subject_id"], b["algo"], b["audience"], b["granted_at"], b["expires_at"], envelope)
        except (EnvelopeError, KeyError, TypeError) as exc:
            raise ConsentInvalid(f"unreadable consent: {exc}") from exc

    def check(self, now: int, subject_public_key: bytes | None) -> None:
        if subject_public_key is None:
            raise ConsentInvalid(f"no registered key for {self.subject_id}")
        try:
            ok = verify(self.envelope, subject_public_key)
        except EnvelopeError:
            ok = False
        if not ok or self.envelope.signer_id != self.subject_id:
            raise ConsentInvalid(f"consent not signed by {self.subject_id}")
        if now >= self.expires_at:
            raise ConsentExpired(f"consent expired at {self.expires_at}")
        if now < self.granted_at:
            raise ConsentInvalid("consent not yet in force")

    def is_valid(self, now: int, subject_public_key: bytes | None) -> bool:
        try:
            self.check(now, subject_public_key)
        except ConsentMissing:
            return False
        return True


def grant_consent(
    subject: KeyPair, algo_id: str, audience: str, now: int, ttl: int
) -> ConsentRecord:
    """Subject signs permission for ``audience`` to have ``algo_id`` run."""
    env = seal(
        subject,
        PayloadType.CONSENT,
        {
            "algo": algo_id,
            "audience": audience,
            "expires_at": now + ttl,
            "granted_at": now,
            "subject_id": subject.key_id,
        },
        now,
    )
    return ConsentRecord.from_envelope(env)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    dataset_id: str
    provider_id: str
    algo_id: str
    version: str
    executed_at: int

    def to_wire(self) -> dict[str, Any]:
        return {
            "algo_id": self.algo_id,
            "dataset_id": self.dataset_id,
            "executed_at": self.executed_at,
            "provider_id": self.provider_id,
            "version": self.version,
        }

    @classmethod
    def from_wire(cls, d: Mapping[str, Any]) -> Provenance:
        return cls(d["dataset_id"], d["provider_id"], d["algo_id"], d["version"], d["executed_at"])


@dataclass(frozen=True)
class AlgoResponse:
    algo_id: str
    version: str
    subject_id: str | None
    result: Any
    records_used: int
    provenance: Provenance
    output_kind: OutputKind = OutputKind.SUBJECT_LEVEL

    @property
    def ref(self) -> str:
        return algo_ref(self.algo_id, self.version)

    def to_wire(self) -> dict[str, Any]:
        out = {
            "algo_id": self.algo_id,
            "output_kind": OutputKind(self.output_kind).value,
            "provenance": self.provenance.to_wire(),
            "records_used": self.records_used,
            "result": self.result,
            "version": self.version,
        }
        if self.subject_id is not None:
            out["subject_id"] = self.subject_id
        return out

    @classmethod
    def from_wire(cls, d: Mapping[str, Any]) -> AlgoResponse:
        return cls(
            d["algo_id"],
            d["version"],
            d.get("subject_id"),
            d["result"],
            d["records_used"],
            Provenance.from_wire(d["provenance"]),
            OutputKind(d["output_kind"]),
        )


class DataProvider(Node):
    """A data holder node. Its datasets never leave it."""

    kind = "data_provider"

    def __init__(
        self,
        provider_id: str,
        keypair: KeyPair,
        keys: KeyDirectory,
        registry: AlgorithmRegistry,
        datasets: Sequence[Dataset] = (),
        *,
        k_min: int = DEFAULT_K_MIN,
        hosted: Iterable[str] | None = None,
    ) -> None:
        super().__init__(provider_id, keypair, keys)
        self.registry = registry
        self._datasets = list(datasets)
        self.k_min = k_min
        self.hosted = set(hosted) if hosted is not None else set(CATALOGUE)
        # one row per handled request: what ran, for whom, with which consent
        self.executions: list[dict[str, Any]] = []

    def record_encodings(self) -> list[bytes]:
        return [enc for ds in self._datasets for enc in ds.record_encodings()]

    def _dataset_for(self, descriptor: AlgorithmDescriptor) -> Dataset:
        need = set(descriptor.required_schema)
        for ds in self._datasets:
            if need <= set(ds.schema):
                return ds
        raise SchemaMismatch(f"no dataset at {self.node_id} provides {sorted(need)}")

    def execute(
        self,
        algo_id: str,
        version: str,
        params: Mapping[str, Any],
        consent: ConsentRecord | None,
        now: int,
        *,
        requester: str,
    ) -> AlgoResponse:
        descriptor = self.registry.get(algo_id, version)
        if not descriptor.vetted:
            raise VettingRequired(descriptor.ref)
        entry = CATALOGUE.get(descriptor.ref)
        if entry is None or descriptor.ref not in self.hosted:
            raise UnknownAlgorithm(f"{descriptor.ref} is not installed at {self.node_id}")
        dataset = self._dataset_for(descriptor)

        subject_id = None
        if descriptor.output_kind is OutputKind.SUBJECT_LEVEL:
            subject_id = params.get("subject_id")
            if not isinstance(subject_id, str):
                raise SchemaMismatch("subject-level algorithms need params.subject_id")
            self._check_consent(consent, subject_id, descriptor.ref, requester, now)
            rows = dataset.rows_for(subject_id)
            if not rows:
                raise SubjectNotFound(f"{subject_id} has no rows in {dataset.dataset_id}")
        else:
            rows = [(s, dict(f)) for s, f in dataset.records]
            if len({s for s, _ in rows}) < self.k_min:
                raise AggregateTooSmall(f"fewer than {self.k_min} subjects in {dataset.dataset_id}")

        result, used = entry.fn(rows, params)
        if descriptor.output_kind is OutputKind.AGGREGATE and used < self.k_min:
            raise AggregateTooSmall(f"{used} contributing subjects < k_min={self.k_min}")
        return AlgoResponse(
            algo_id=descriptor.algo_id,
            version=descriptor.version,
            subject_id=subject_id,
            result=result,
            records_used=used,
            provenance=Provenance(dataset.dataset_id, self.node_id, descriptor.algo_id, descriptor.version, now),
            output_kind=descriptor.output_kind,
        )

    def _check_consent(
        self, consent: ConsentRecord | None, subject_id: str, ref: str, requester: str, now: int
    ) -> None:
        if consent is None:
            raise ConsentMissing(f"no consent from {subject_id} for {ref}")
        if consent.subject_id != subject_id or consent.algo_id != ref or consent.audience != requester:
            raise ConsentInvalid(f"consent does not cover ({subject_id}, {ref}, {requester})")
        consent.check(now, self.keys.get(subject_id))

    # -- actor -------------------------------------------------------------

    def on_algo_request(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        corr = body["correlation_id"]
        consent = None
        outcome: str
        try:
            if body.get("consent") is not None:
                consent = ConsentRecord.from_envelope(SignedEnvelope.from_wire(body["consent"]))
            resp = self.execute(
                body["algo_id"], body["version"], body.get("params", {}), consent, ctx.now, requester=msg.from_node
            )
        except OpalError as exc:
            outcome = exc.code
            env = seal(
                self.keypair,
                PayloadType.ERROR,
                {"correlation_id": corr, "detail": str(exc), "error": exc.code},
                ctx.now,
            )
        except EnvelopeError as exc:
            outcome = "ConsentInvalid"
            env = seal(
                self.keypair,
                PayloadType.ERROR,
                {"correlation_id": corr, "detail": str(exc), "error": outcome},
                ctx.now,
            )
        else:
            outcome = "ok"
            env = seal(
                self.keypair,
                PayloadType.ALGO_RESPONSE,
                {"correlation_id": corr, "response": resp.to_wire()},
                ctx.now,
            )
        self.executions.append(
            {
                "algo": algo_ref(body["algo_id"], body["version"]),
                "at": ctx.now,
                "consent": body.get("consent"),
                "outcome": outcome,
                "requester": msg.from_node,
                "subject_id": body.get("params", {}).get("subject_id"),
            }
        )
        ctx.trace(
            "algo_executed",
            node=self.node_id,
            algo=algo_ref(body["algo_id"], body["version"]),
            requester=msg.from_node,
            outcome=outcome,
            consent_present=consent is not None,
        )
        self.retain(env, ctx.now)
        ctx.post(self.node_id, msg.from_node, env)
