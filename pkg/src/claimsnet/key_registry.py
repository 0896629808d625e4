"""Key-ownership and key-custody attestations.

Possession of a private key is checked with a single-use challenge. Possession
alone never yields an ownership attestation: the registry also needs a signed
enrollment record linking the subject to the key.

Attestations are chains of :class:`SignedEnvelope` links, leaf first. Every
link has the fixed body ``{kind, subject, public_key, valid_from, valid_to,
issuer}``; non-leaf links have kind ``authority`` and certify the key that
signed the link below them. The last link is signed by a trusted root.
"""

from __future__ import annotations

import random
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .audit_log import AuditLog
from .envelope import (
    EnvelopeError,
    KeyDirectory,
    KeyPair,
    PayloadType,
    SignedEnvelope,
    b64d,
    seal,
    verify,
)

DEFAULT_VALIDITY_MS = 365 * 86_400_000


class KeyRegistryError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


class PossessionFailed(KeyRegistryError):
    pass


class EnrollmentMissing(KeyRegistryError):
    pass


class NonceReplayed(KeyRegistryError):
    pass


class ChainInvalid(KeyRegistryError):
    pass


class UntrustedRoot(KeyRegistryError):
    pass


class AttestationExpired(KeyRegistryError):
    pass


def _link_body(kind: str, subject: str, public_key: bytes, valid_from: int, valid_to: int, issuer: str) -> dict:
    return {
        "issuer": issuer,
        "kind": kind,
        "public_key": public_key,
        "subject": subject,
        "valid_from": valid_from,
        "valid_to": valid_to,
    }


@dataclass(frozen=True)
class Authority:
    """A certificate authority. ``chain`` holds its own certificate and those
    of its parents up to (excluding) the root; a root has an empty chain."""

    authority_id: str
    keypair: KeyPair
    chain: tuple[SignedEnvelope, ...] = ()

    @classmethod
    def root(cls, keypair: KeyPair) -> Authority:
        return cls(keypair.key_id, keypair)

    def certify(
        self, kind: str, subject: str, public_key: bytes, valid_from: int, valid_to: int, now: int
    ) -> SignedEnvelope:
        return seal(
            self.keypair,
            PayloadType.ATTESTATION,
            _link_body(kind, subject, public_key, valid_from, valid_to, self.authority_id),
            now,
        )

    def delegate(self, child: KeyPair, now: int, valid_for: int = DEFAULT_VALIDITY_MS) -> Authority:
        cert = self.certify("authority", child.key_id, child.public_key, now, now + valid_for, now)
        return Authority(child.key_id, child, (cert, *self.chain))


def check_chain(
    chain: Sequence[SignedEnvelope], leaf_kind: str, trusted_roots: Mapping[str, bytes], now: int
) -> dict[str, Any]:
    """Walk a chain leaf-to-root. Returns the leaf body on success."""
    if len(chain) < 2:
        raise ChainInvalid("chain shorter than leaf + authority")
    bodies = []
    for link in chain:
        if link.payload_type != PayloadType.ATTESTATION:
            raise ChainInvalid("chain link is not an attestation")
        try:
            bodies.append(link.body())
        except EnvelopeError as exc:
            raise ChainInvalid(str(exc)) from exc

    expired = False
    for i, (link, body) in enumerate(zip(chain, bodies)):
        want_kind = leaf_kind if i == 0 else "authority"
        if body.get("kind") != want_kind or body.get("issuer") != link.signer_id:
            raise ChainInvalid(f"link {i}: wrong kind or issuer")
        if i + 1 < len(chain):
            parent = bodies[i + 1]
            if parent.get("subject") != link.signer_id:
                raise ChainInvalid(f"link {i}: signer {link.signer_id!r} not certified by link {i + 1}")
            try:
                key = b64d(parent["public_key"])
            except (KeyError, ValueError) as exc:
                raise ChainInvalid(f"link {i + 1}: bad public key") from exc
        else:
            if link.signer_id not in trusted_roots:
                raise UntrustedRoot(link.signer_id)
            key = trusted_roots[link.signer_id]
        try:
            good = verify(link, key)
        except EnvelopeError:
            good = False
        if not good:
            raise ChainInvalid(f"link {i}: signature does not verify")
        vf, vt = body.get("valid_from"), body.get("valid_to")
        if not isinstance(vf, int) or not isinstance(vt, int):
            raise ChainInvalid(f"link {i}: validity window missing")
        if not vf <= now < vt:
            expired = True
    # signatures first, so that forged chains never read as merely stale
    if expired:
        raise AttestationExpired("validity window does not contain now")
    return bodies[0]


@dataclass(frozen=True)
class KeyOwnershipAttestation:
    subject_id: str
    public_key: bytes
    chain: tuple[SignedEnvelope, ...]
    valid_from: int
    valid_to: int

    def to_wire(self) -> dict[str, Any]:
        return {"chain": [c.to_wire() for c in self.chain], "type": "ownership"}

    @classmethod
    def from_chain(cls, chain: Sequence[SignedEnvelope]) -> KeyOwnershipAttestation:
        b = chain[0].body()
        return cls(b["subject"], b64d(b["public_key"]), tuple(chain), b["valid_from"], b["valid_to"])


@dataclass(frozen=True)
class CustodyAttestation:
    vasp_id: str
    subject_id: str
    public_key: bytes
    envelope: SignedEnvelope
    issuer_chain: tuple[SignedEnvelope, ...] = ()

    @property
    def chain(self) -> tuple[SignedEnvelope, ...]:
        return (self.envelope, *self.issuer_chain)

    def to_wire(self) -> dict[str, Any]:
        return {"chain": [c.to_wire() for c in self.chain], "type": "custody"}

    @classmethod
    def from_chain(cls, chain: Sequence[SignedEnvelope]) -> CustodyAttestation:
        b = chain[0].body()
        subject, _, vasp = b["subject"].partition("@")
        return cls(vasp, subject, b64d(b["public_key"]), chain[0], tuple(chain[1:]))


@dataclass(frozen=True)
class PossessionChallenge:
    nonce: bytes
    issued_at: int
    target_public_key: bytes


@dataclass(frozen=True)
class OwnershipEvidence:
    possession: SignedEnvelope | None = None
    enrollment: SignedEnvelope | None = None


def respond_to_challenge(keypair: KeyPair, challenge: PossessionChallenge, now: int) -> SignedEnvelope:
    return seal(
        keypair,
        PayloadType.POSSESSION_PROOF,
        {"issued_at": challenge.issued_at, "nonce": challenge.nonce, "public_key": keypair.public_key},
        now,
    )


Responder = Callable[[PossessionChallenge], SignedEnvelope]


class KeyRegistry:
    """A CA-like registry issuing ownership and custody attestations."""

    def __init__(
        self,
        authority: Authority,
        keys: KeyDirectory,
        *,
        seed: int | str = 0,
        validity_ms: int = DEFAULT_VALIDITY_MS,
    ) -> None:
        self.authority = authority
        self.registry_id = authority.authority_id
        self.validity_ms = validity_ms
        self.log = AuditLog(self.registry_id, keys)
        self._rng = random.Random(f"{seed}|{self.registry_id}")
        self._open: dict[bytes, PossessionChallenge] = {}
        self._consumed: set[bytes] = set()
        self._accepted: dict[bytes, SignedEnvelope] = {}
        self._spent: set[bytes] = set()
        self._enrollments: dict[tuple[str, bytes], SignedEnvelope] = {}

    # -- enrollment --------------------------------------------------------

    def enroll(self, subject_id: str, public_key: bytes, now: int) -> SignedEnvelope:
        """Seed a signed enrollment record (identity proofing happens elsewhere)."""
        env = seal(
            self.authority.keypair,
            PayloadType.ENROLLMENT,
            {"public_key": public_key, "registry": self.registry_id, "subject_id": subject_id},
            now,
        )
        self._enrollments[(subject_id, bytes(public_key))] = env
        self.log.append(env, now)
        return env

    def enrollment_for(self, subject_id: str, public_key: bytes) -> SignedEnvelope | None:
        return self._enrollments.get((subject_id, bytes(public_key)))

    # -- possession --------------------------------------------------------

    def new_challenge(self, public_key: bytes, now: int) -> PossessionChallenge:
        nonce = self._rng.randbytes(16)
        while nonce in self._open or nonce in self._consumed:
            nonce = self._rng.randbytes(16)
        challenge = PossessionChallenge(nonce, now, bytes(public_key))
        self._open[nonce] = challenge
        return challenge

    def check_response(self, nonce: bytes, response: SignedEnvelope) -> bool:
        """Consume ``nonce`` and judge the response. A nonce is good once."""
        if nonce in self._consumed:
            raise NonceReplayed(nonce.hex())
        challenge = self._open.pop(nonce, None)
        if challenge is None:
            return False
        self._consumed.add(nonce)
        try:
            body = response.body()
            ok = (
                response.payload_type == PayloadType.POSSESSION_PROOF
                and verify(response, challenge.target_public_key)
                and b64d(body["nonce"]) == nonce
                and body["issued_at"] == challenge.issued_at
                and b64d(body["public_key"]) == challenge.target_public_key
            )
        except (EnvelopeError, KeyError, ValueError):
            ok = False
        if ok:
            self._accepted[nonce] = response
        return ok

    def challenge_possession(self, public_key: bytes, responder: Responder, now: int) -> bool:
        challenge = self.new_challenge(public_key, now)
        try:
            response = responder(challenge)
        except Exception:  # noqa: BLE001 - a failing responder just fails the challenge
            self._open.pop(challenge.nonce, None)
            self._consumed.add(challenge.nonce)
            return False
        return self.check_response(challenge.nonce, response)

    # -- issuance ----------------------------------------------------------

    def issue_ownership(
        self, subject_id: str, public_key: bytes, evidence: OwnershipEvidence, now: int
    ) -> KeyOwnershipAttestation:
        proof = evidence.possession
        if proof is None:
            raise PossessionFailed("no possession proof")
        try:
            nonce = b64d(proof.body()["nonce"])
            proof_key = b64d(proof.body()["public_key"])
        except (EnvelopeError, KeyError, ValueError) as exc:
            raise PossessionFailed(str(exc)) from exc
        if self._accepted.get(nonce) != proof or proof_key != bytes(public_key):
            raise PossessionFailed("proof was not accepted by this registry for this key")
        if nonce in self._spent:
            raise NonceReplayed(nonce.hex())

        enrollment = evidence.enrollment
        recorded = self._enrollments.get((subject_id, bytes(public_key)))
        if enrollment is None or recorded is None or enrollment != recorded:
            raise EnrollmentMissing(f"{subject_id} is not enrolled with this key")
        self._spent.add(nonce)

        leaf = self.authority.certify("ownership", subject_id, public_key, now, now + self.validity_ms, now)
        self.log.append(leaf, now)
        return KeyOwnershipAttestation.from_chain((leaf, *self.authority.chain))

    def issue_custody(self, vasp_id: str, subject_id: str, public_key: bytes, now: int) -> CustodyAttestation:
        leaf = self.authority.certify(
            "custody", f"{subject_id}@{vasp_id}", public_key, now, now + self.validity_ms, now
        )
        self.log.append(leaf, now)
        return CustodyAttestation.from_chain((leaf, *self.authority.chain))


def check_ownership(
    attestation: KeyOwnershipAttestation, trusted_roots: Mapping[str, bytes], now: int
) -> None:
    leaf = check_chain(attestation.chain, "ownership", trusted_roots, now)
    if leaf["subject"] != attestation.subject_id or b64d(leaf["public_key"]) != attestation.public_key:
        raise ChainInvalid("attestation fields disagree with its leaf")
    if not attestation.valid_from <= now < attestation.valid_to:
        raise AttestationExpired("outside validity window")


def verify_ownership(
    attestation: KeyOwnershipAttestation, trusted_roots: Mapping[str, bytes], now: int
) -> bool:
    try:
        check_ownership(attestation, trusted_roots, now)
    except (KeyRegistryError, KeyError, ValueError):
        return False
    return True


def check_custody(attestation: CustodyAttestation, trusted_roots: Mapping[str, bytes], now: int) -> None:
    leaf = check_chain(attestation.chain, "custody", trusted_roots, now)
    if leaf["subject"] != f"{attestation.subject_id}@{attestation.vasp_id}":
        raise ChainInvalid("custody leaf names another subject or custodian")


def verify_custody(attestation: CustodyAttestation, trusted_roots: Mapping[str, bytes], now: int) -> bool:
    try:
        check_custody(attestation, trusted_roots, now)
    except (KeyRegistryError, KeyError, ValueError):
        return False
    return True


def evidence_from_wire(data: Mapping[str, Any]) -> KeyOwnershipAttestation | CustodyAttestation | SignedEnvelope:
    """Decode key evidence as carried in customer records and packets."""
    kind = data.get("type")
    if kind == "possession":
        return SignedEnvelope.from_wire(data["proof"])
    chain = tuple(SignedEnvelope.from_wire(c) for c in data.get("chain", ()))
    if not chain:
        raise ChainInvalid("empty chain")
    if kind == "ownership":
        return KeyOwnershipAttestation.from_chain(chain)
    if kind == "custody":
        return CustodyAttestation.from_chain(chain)
    raise ChainInvalid(f"unknown evidence type {kind!r}")


def evidence_to_wire(evidence: KeyOwnershipAttestation | CustodyAttestation | SignedEnvelope) -> dict[str, Any]:
    if isinstance(evidence, SignedEnvelope):
        return {"proof": evidence.to_wire(), "type": "possession"}
    return evidence.to_wire()
