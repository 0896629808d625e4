"""Claims Provider: authorizes VASPs, runs vetted algorithms at data
providers, and turns the results into signed claims.

The Authentication Service lives on the same node but signs tokens with its
own key. Each issued :class:`ClaimSet` is mirrored into the subject's
:class:`PersonalDataStore` and retained in the provider's audit log.
"""

from __future__ import annotations

import hmac
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .actor import Context, Node
from .envelope import (
    EnvelopeError,
    KeyDirectory,
    KeyPair,
    PayloadType,
    SignedEnvelope,
    b64d,
    canonicalize,
    seal,
    verify,
)
from .opal_provider import (
    ERRORS as OPAL_ERRORS,
    AlgoResponse,
    AlgorithmDescriptor,
    AlgorithmRegistry,
    ConsentRecord,
    OpalError,
    OutputKind,
)

if TYPE_CHECKING:
    from .network_sim.bus import BusMessage

logger = logging.getLogger(__name__)

DAY_MS = 86_400_000
DEFAULT_CLAIM_TTL_MS = 30 * DAY_MS
DEFAULT_TOKEN_TTL_MS = 3_600_000
DEFAULT_COLLATION_TIMEOUT_MS = 5_000


class ClaimsError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


class UnknownVasp(ClaimsError):
    pass


class BadCredential(ClaimsError):
    pass


class NoEntitledAlgorithms(ClaimsError):
    pass


class TokenInvalid(ClaimsError):
    pass


class TokenExpired(ClaimsError):
    pass


class ScopeExceeded(ClaimsError):
    pass


class UnlistedAlgorithm(ClaimsError):
    pass


class AllAlgorithmsFailed(ClaimsError):
    def __init__(self, causes: Mapping[str, str]) -> None:
        self.causes = dict(causes)
        super().__init__(", ".join(f"{k}: {v}" for k, v in sorted(self.causes.items())))


# ---------------------------------------------------------------------------
# authentication service
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AccessToken:
    token_id: str
    vasp_id: str
    allowed_algos: tuple[str, ...]
    issued_at: int
    expires_at: int
    envelope: SignedEnvelope

    @classmethod
    def from_envelope(cls, envelope: SignedEnvelope) -> AccessToken:
        if envelope.payload_type != PayloadType.ACCESS_TOKEN:
            raise TokenInvalid("not an access token")
        try:
            b = envelope.body()
            return cls(
                b["token_id"], b["vasp_id"], tuple(b["allowed_algos"]), b["issued_at"], b["expires_at"], envelope
            )
        except (EnvelopeError, KeyError, TypeError) as exc:
            raise TokenInvalid(str(exc)) from exc

    def to_wire(self) -> dict[str, Any]:
        return self.envelope.to_wire()


def make_credential(vasp: KeyPair, requested_algos: Sequence[str], now: int) -> SignedEnvelope:
    """A VASP proves its identity by signing its own authorization request."""
    return seal(
        vasp,
        PayloadType.AUTH_REQUEST,
        {"requested_algos": sorted(requested_algos), "vasp_id": vasp.key_id},
        now,
    )


class AuthenticationService:
    def __init__(
        self,
        keypair: KeyPair,
        published: Callable[[], set[str]],
        *,
        token_ttl_ms: int = DEFAULT_TOKEN_TTL_MS,
    ) -> None:
        self.keypair = keypair
        self.as_id = keypair.key_id
        self._published = published
        self.token_ttl_ms = token_ttl_ms
        self._enrolled: dict[str, tuple[bytes, frozenset[str]]] = {}
        self._counter = 0

    def enroll(self, vasp_id: str, public_key: bytes, entitlement: Iterable[str]) -> None:
        self._enrolled[vasp_id] = (bytes(public_key), frozenset(entitlement))

    def authenticate_vasp(
        self, vasp_id: str, credential: SignedEnvelope, requested_algos: Sequence[str], now: int
    ) -> AccessToken:
        enrolled = self._enrolled.get(vasp_id)
        if enrolled is None:
            raise UnknownVasp(vasp_id)
        public_key, entitlement = enrolled
        try:
            ok = (
                credential.payload_type == PayloadType.AUTH_REQUEST
                and credential.signer_id == vasp_id
                and verify(credential, public_key)
                and credential.body().get("vasp_id") == vasp_id
            )
        except EnvelopeError:
            ok = False
        if not ok:
            raise BadCredential(vasp_id)
        scope = sorted(set(requested_algos) & entitlement & self._published())
        if not scope:
            raise NoEntitledAlgorithms(f"{vasp_id} requested {sorted(requested_algos)}")
        self._counter += 1
        token_id = f"{self.as_id}#{self._counter}"
        env = seal(
            self.keypair,
            PayloadType.ACCESS_TOKEN,
            {
                "allowed_algos": scope,
                "expires_at": now + self.token_ttl_ms,
                "issued_at": now,
                "token_id": token_id,
                "vasp_id": vasp_id,
            },
            now,
        )
        return AccessToken.from_envelope(env)

    def check_token(self, token: AccessToken, vasp_id: str, now: int) -> None:
        try:
            ok = token.envelope.signer_id == self.as_id and verify(token.envelope, self.keypair.public_key)
        except EnvelopeError:
            ok = False
        if not ok or token.vasp_id != vasp_id:
            raise TokenInvalid(token.token_id)
        if now >= token.expires_at:
            raise TokenExpired(token.token_id)


# ---------------------------------------------------------------------------
# claims
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClaimsRequest:
    request_id: str
    vasp_id: str
    subject_id: str
    algo_ids: tuple[str, ...]
    token: AccessToken

    def to_body(self) -> dict[str, Any]:
        return {
            "algo_ids": list(self.algo_ids),
            "request_id": self.request_id,
            "subject_id": self.subject_id,
            "token": self.token.to_wire(),
            "vasp_id": self.vasp_id,
        }

    @classmethod
    def from_body(cls, b: Mapping[str, Any]) -> ClaimsRequest:
        try:
            token = AccessToken.from_envelope(SignedEnvelope.from_wire(b["token"]))
        except EnvelopeError as exc:
            raise TokenInvalid(str(exc)) from exc
        return cls(b["request_id"], b["vasp_id"], b["subject_id"], tuple(b["algo_ids"]), token)


@dataclass(frozen=True)
class Claim:
    claim_id: str
    subject_id: str
    statement: dict[str, Any]  # {"attributes": {...}, "sentence": "..."}
    provenance: tuple[dict[str, Any], ...]
    issued_at: int
    expires_at: int

    def __post_init__(self) -> None:
        if not self.provenance:
            raise ValueError("a claim needs provenance")
        if self.expires_at <= self.issued_at:
            raise ValueError("claim expires before it is issued")

    @property
    def attributes(self) -> dict[str, Any]:
        return self.statement["attributes"]

    @property
    def algo_refs(self) -> list[str]:
        return [f"{p['algo_id']} {p['version']}" for p in self.provenance]

    def to_wire(self) -> dict[str, Any]:
        return {
            "claim_id": self.claim_id,
            "expires_at": self.expires_at,
            "issued_at": self.issued_at,
            "provenance": list(self.provenance),
            "statement": self.statement,
            "subject_id": self.subject_id,
        }

    @classmethod
    def from_wire(cls, d: Mapping[str, Any]) -> Claim:
        return cls(
            d["claim_id"], d["subject_id"], d["statement"], tuple(d["provenance"]), d["issued_at"], d["expires_at"]
        )


@dataclass(frozen=True)
class ClaimSet:
    claimset_id: str
    issuer_id: str
    subject_id: str
    claims: tuple[Claim, ...]
    failures: dict[str, str]
    envelope: SignedEnvelope

    @classmethod
    def from_envelope(cls, envelope: SignedEnvelope) -> ClaimSet:
        if envelope.payload_type != PayloadType.CLAIM_SET:
            raise ValueError("not a claim set")
        b = envelope.body()
        return cls(
            b["claimset_id"],
            b["issuer_id"],
            b["subject_id"],
            tuple(Claim.from_wire(c) for c in b["claims"]),
            dict(b["failures"]),
            envelope,
        )

    def verify(self, issuer_public_key: bytes) -> bool:
        try:
            return self.envelope.signer_id == self.issuer_id and verify(self.envelope, issuer_public_key)
        except EnvelopeError:
            return False

    def is_fresh(self, now: int) -> bool:
        return all(now < c.expires_at for c in self.claims)


@dataclass
class PersonalDataStore:
    subject_id: str
    stored_claimsets: list[ClaimSet] = field(default_factory=list)

    def add(self, claimset: ClaimSet) -> PersonalDataStore:
        if claimset.subject_id != self.subject_id:
            raise ValueError("claim set is about another subject")
        if all(c.claimset_id != claimset.claimset_id for c in self.stored_claimsets):
            self.stored_claimsets.append(claimset)
        return self

    def dumps(self) -> bytes:
        return b"".join(canonicalize(c.envelope.to_wire()) + b"\n" for c in self.stored_claimsets)


def _statement(descriptor: AlgorithmDescriptor, resp: AlgoResponse) -> dict[str, Any]:
    r = resp.result
    if descriptor.algo_id == "tx-range":
        attrs = {"tx_max": r["max"], "tx_min": r["min"]}
        sentence = (
            f"Transaction amounts ranged from {r['min']} to {r['max']} "
            f"across {resp.records_used} records."
        )
    elif descriptor.algo_id == "residency":
        attrs = {"city": r["city"], "country": r["country"]}
        sentence = f"The subject legally resides in {r['city']}, {r['country']}."
    elif descriptor.algo_id == "count-active-accounts":
        attrs = {"active_accounts": r["active_accounts"]}
        sentence = f"{r['active_accounts']} of {resp.records_used} customers hold an active account."
    elif descriptor.algo_id == "mean-balance":
        attrs = {"mean_balance": r["mean_balance"]}
        sentence = f"The mean balance over {resp.records_used} customers is {r['mean_balance']}."
    else:
        attrs = dict(r) if isinstance(r, Mapping) else {"value": r}
        sentence = f"{descriptor.ref} returned {canonicalize(attrs).decode()}."
    return {"attributes": attrs, "sentence": sentence}


@dataclass(frozen=True)
class PlannedExecution:
    descriptor: AlgorithmDescriptor
    provider_id: str
    consent: ConsentRecord | None

    @property
    def ref(self) -> str:
        return self.descriptor.ref


Executor = Callable[[PlannedExecution, Mapping[str, Any]], AlgoResponse]
Outcome = AlgoResponse | str


class ClaimsProvider(Node):
    kind = "claims_provider"

    def __init__(
        self,
        cp_id: str,
        keypair: KeyPair,
        auth_keypair: KeyPair,
        keys: KeyDirectory,
        registry: AlgorithmRegistry,
        hosts: Mapping[str, str],
        *,
        claim_ttl_ms: int = DEFAULT_CLAIM_TTL_MS,
        collation_timeout_ms: int = DEFAULT_COLLATION_TIMEOUT_MS,
        token_ttl_ms: int = DEFAULT_TOKEN_TTL_MS,
    ) -> None:
        super().__init__(cp_id, keypair, keys)
        if auth_keypair.key_id == cp_id:
            raise ValueError("the authentication service needs its own key")
        self.registry = registry
        self.hosts = dict(hosts)
        self.auth = AuthenticationService(auth_keypair, registry.published_refs, token_ttl_ms=token_ttl_ms)
        self.claim_ttl_ms = claim_ttl_ms
        self.collation_timeout_ms = collation_timeout_ms
        self._consents: list[ConsentRecord] = []
        self.pds: dict[str, PersonalDataStore] = {}
        self.issued: list[ClaimSet] = []
        self._pending: dict[str, _Collation] = {}

    # -- consent -----------------------------------------------------------

    def add_consent(self, record: ConsentRecord) -> None:
        self._consents.append(record)

    def consent_for(self, subject_id: str, ref: str) -> ConsentRecord | None:
        """Most recently granted consent naming this subject, algorithm and
        this provider as audience. Validity is judged by the data provider."""
        best = None
        for c in self._consents:
            if c.subject_id == subject_id and c.algo_id == ref and c.audience == self.node_id:
                if best is None or c.granted_at >= best.granted_at:
                    best = c
        return best

    # -- request pipeline --------------------------------------------------

    def plan(self, request: ClaimsRequest, now: int) -> list[PlannedExecution]:
        self.auth.check_token(request.token, request.vasp_id, now)
        outside = [a for a in request.algo_ids if a not in request.token.allowed_algos]
        if outside:
            raise ScopeExceeded(", ".join(outside))
        listed = self.registry.published_refs()
        unlisted = [a for a in request.algo_ids if a not in listed]
        if unlisted:
            raise UnlistedAlgorithm(", ".join(unlisted))
        plan = []
        for ref in request.algo_ids:
            d = self.registry.lookup(ref)
            consent = self.consent_for(request.subject_id, ref) if d.output_kind is OutputKind.SUBJECT_LEVEL else None
            plan.append(PlannedExecution(d, self.hosts.get(ref, ""), consent))
        return plan

    def collate(
        self, request: ClaimsRequest, plan: Sequence[PlannedExecution], outcomes: Mapping[str, Outcome], now: int
    ) -> ClaimSet:
        claims: list[Claim] = []
        failures: dict[str, str] = {}
        for step in plan:
            out = outcomes.get(step.ref, "Timeout")
            if isinstance(out, str):
                failures[step.ref] = out
                continue
            claims.append(
                Claim(
                    claim_id=f"{self.node_id}:{request.request_id}:{step.ref}",
                    subject_id=request.subject_id,
                    statement=_statement(step.descriptor, out),
                    provenance=(out.provenance.to_wire(),),
                    issued_at=now,
                    expires_at=now + self.claim_ttl_ms,
                )
            )
        if not claims:
            raise AllAlgorithmsFailed(failures)
        env = seal(
            self.keypair,
            PayloadType.CLAIM_SET,
            {
                "claims": [c.to_wire() for c in claims],
                "claimset_id": f"{self.node_id}:{request.request_id}",
                "failures": failures,
                "issued_at": now,
                "issuer_id": self.node_id,
                "request_id": request.request_id,
                "subject_id": request.subject_id,
                "vasp_id": request.vasp_id,
            },
            now,
        )
        claimset = ClaimSet.from_envelope(env)
        self.issued.append(claimset)
        self.mirror_to_pds(claimset)
        self.retain(env, now)
        return claimset

    def handle_request(self, request: ClaimsRequest, now: int, executor: Executor) -> ClaimSet:
        """Synchronous request path: ``executor`` runs one planned step at its
        data provider and returns the response or raises :class:`OpalError`."""
        plan = self.plan(request, now)
        outcomes: dict[str, Outcome] = {}
        for step in plan:
            try:
                outcomes[step.ref] = executor(step, {"subject_id": request.subject_id})
            except OpalError as exc:
                outcomes[step.ref] = exc.code
        return self.collate(request, plan, outcomes, now)

    def mirror_to_pds(self, claimset: ClaimSet) -> PersonalDataStore:
        if claimset.issuer_id != self.node_id:
            raise ValueError("only claim sets issued here are mirrored")
        store = self.pds.setdefault(claimset.subject_id, PersonalDataStore(claimset.subject_id))
        return store.add(claimset)

    # -- actor -------------------------------------------------------------

    def on_auth_request(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        corr = body.get("request_id", "")
        try:
            token = self.auth.authenticate_vasp(msg.from_node, msg.envelope, body["requested_algos"], ctx.now)
        except ClaimsError as exc:
            ctx.trace("auth_refused", node=self.node_id, vasp=msg.from_node, error=exc.code)
            self.reply_error(ctx, msg.from_node, corr, exc.code, str(exc))
            return
        ctx.trace("token_issued", node=self.node_id, vasp=msg.from_node, token_id=token.token_id)
        self.retain(token.envelope, ctx.now)
        self.send(ctx, msg.from_node, PayloadType.ACCESS_TOKEN, {"request_id": corr, "token": token.to_wire()})

    def on_claims_request(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        corr = body.get("request_id", "")
        try:
            request = ClaimsRequest.from_body(body)
            if request.vasp_id != msg.from_node:
                raise TokenInvalid("request not sent by the token holder")
            plan = self.plan(request, ctx.now)
        except (ClaimsError, OpalError, KeyError, TypeError) as exc:
            code = getattr(exc, "code", "Malformed")
            ctx.trace("request_refused", node=self.node_id, vasp=msg.from_node, error=code)
            self.reply_error(ctx, msg.from_node, corr, code, str(exc))
            return
        job = _Collation(request=request, plan=plan, reply_to=msg.from_node)
        self._pending[request.request_id] = job
        for i, step in enumerate(plan):
            cid = f"{request.request_id}/{i}"
            job.correlation[cid] = step.ref
            if not step.provider_id:
                job.outcomes[step.ref] = "UnknownAlgorithm"
                continue
            self.send(
                ctx,
                step.provider_id,
                PayloadType.ALGO_REQUEST,
                {
                    "algo_id": step.descriptor.algo_id,
                    "consent": step.consent.envelope.to_wire() if step.consent else None,
                    "correlation_id": cid,
                    "params": {"subject_id": request.subject_id},
                    "version": step.descriptor.version,
                },
            )
        if job.complete():
            self._finish(request.request_id, ctx)
        else:
            self.set_timer(ctx, f"collate:{request.request_id}", self.collation_timeout_ms)

    def _job_for(self, correlation_id: str) -> tuple[str, _Collation] | None:
        request_id = correlation_id.rpartition("/")[0]
        job = self._pending.get(request_id)
        if job is None or correlation_id not in job.correlation:
            return None
        return request_id, job

    def on_algo_response(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        found = self._job_for(body["correlation_id"])
        if found is None:
            ctx.trace("late_response", node=self.node_id, correlation_id=body["correlation_id"])
            return
        request_id, job = found
        ref = job.correlation[body["correlation_id"]]
        self.retain(msg.envelope, ctx.now)
        job.outcomes[ref] = AlgoResponse.from_wire(body["response"])
        if job.complete():
            self._finish(request_id, ctx)

    def on_error(self, msg: BusMessage, body: Mapping[str, Any], ctx: Context) -> None:
        found = self._job_for(body.get("correlation_id", ""))
        if found is None:
            return
        request_id, job = found
        self.retain(msg.envelope, ctx.now)
        err = body.get("error", "Error")
        job.outcomes[job.correlation[body["correlation_id"]]] = err if err in OPAL_ERRORS else "Error"
        if job.complete():
            self._finish(request_id, ctx)

    def on_timer(self, tag: str, ctx: Context) -> None:
        if tag.startswith("collate:"):
            self._finish(tag.split(":", 1)[1], ctx)

    def _finish(self, request_id: str, ctx: Context) -> None:
        job = self._pending.pop(request_id, None)
        if job is None:
            return
        self.cancel_timer(f"collate:{request_id}")
        try:
            claimset = self.collate(job.request, job.plan, job.outcomes, ctx.now)
        except AllAlgorithmsFailed as exc:
            ctx.trace("claims_failed", node=self.node_id, request_id=request_id, causes=exc.causes)
            self.reply_error(ctx, job.reply_to, request_id, exc.code, str(exc))
            return
        ctx.trace(
            "claimset_issued",
            node=self.node_id,
            request_id=request_id,
            claimset_id=claimset.claimset_id,
            subject=claimset.subject_id,
            vasp=job.reply_to,
            algos=sorted(r for c in claimset.claims for r in c.algo_refs),
        )
        self.send(ctx, job.reply_to, PayloadType.CLAIM_SET, {"claimset": claimset.envelope.to_wire(), "request_id": request_id})


@dataclass
class _Collation:
    request: ClaimsRequest
    plan: list[PlannedExecution]
    reply_to: str
    correlation: dict[str, str] = field(default_factory=dict)
    outcomes: dict[str, Outcome] = field(default_factory=dict)

    def complete(self) -> bool:
        return all(step.ref in self.outcomes for step in self.plan)
