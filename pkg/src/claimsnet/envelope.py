"""Canonical serialization, key material and detached-signature envelopes.

Every signed artifact in the network (claims, packets, receipts, endpoint
records, consents, attestations, protocol messages) travels as a
:class:`SignedEnvelope` whose payload is canonical bytes.

Canonical wire form: UTF-8 JSON text, map keys sorted by code point, no
insignificant whitespace, integers in plain decimal, ``bytes`` values as
unpadded base64url strings, ``true``/``false``/``null`` literals. Floats are
not part of the data model.

Signatures are Ed25519 (deterministic), computed over the canonical encoding
of ``(payload, payload_type, signed_at, signer_id)`` so the metadata is as
tamper-evident as the payload.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

__all__ = [
    "CanonicalBytes",
    "EnvelopeError",
    "KeyDirectory",
    "KeyPair",
    "MalformedEnvelope",
    "PayloadType",
    "SignedEnvelope",
    "UnsupportedType",
    "b64d",
    "b64e",
    "canonicalize",
    "digest",
    "parse_canonical",
    "seal",
    "sign",
    "signing_input",
    "verify",
]

CanonicalBytes = bytes


class EnvelopeError(Exception):
    """Base class for envelope errors."""


class UnsupportedType(EnvelopeError, TypeError):
    """Value lies outside the wire data model."""


class MalformedEnvelope(EnvelopeError, ValueError):
    """Envelope is missing fields, has wrong types or a non-canonical payload."""


class PayloadType(str, Enum):
    CLAIM_SET = "claim_set"
    TRAVEL_RULE_PACKET = "travel_rule_packet"
    RECEIPT = "receipt"
    ENDPOINT_RECORD = "endpoint_record"
    CONSENT = "consent"
    ATTESTATION = "attestation"
    LOG_CHECKPOINT = "log_checkpoint"
    # protocol messages exchanged over the simulation bus
    ACCESS_TOKEN = "access_token"
    AUTH_REQUEST = "auth_request"
    CLAIMS_REQUEST = "claims_request"
    ALGO_REQUEST = "algo_request"
    ALGO_RESPONSE = "algo_response"
    ERROR = "error"
    ENROLLMENT = "enrollment"
    POSSESSION_PROOF = "possession_proof"
    RESOLVE_REQUEST = "resolve_request"
    TRANSFER_INTENT = "transfer_intent"
    READY = "ready"
    ABORT = "abort"
    SETTLEMENT = "settlement"


# ---------------------------------------------------------------------------
# base64url
# ---------------------------------------------------------------------------

_B64URL_ALPHABET = frozenset(
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_"
)


def b64e(data: bytes) -> str:
    return base64.urlsafe_b64encode(bytes(data)).rstrip(b"=").decode("ascii")


def b64d(text: str) -> bytes:
    """Strict unpadded base64url decode.

    Rejects padding, foreign characters and non-zero trailing bits, so every
    byte string has exactly one accepted textual form.
    """
    if not isinstance(text, str) or not set(text) <= _B64URL_ALPHABET:
        raise ValueError("not an unpadded base64url string")
    if len(text) % 4 == 1:
        raise ValueError("impossible base64url length")
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except binascii.Error as exc:
        raise ValueError(str(exc)) from exc
    if b64e(raw) != text:
        raise ValueError("non-canonical base64url (trailing bits set)")
    return raw


# ---------------------------------------------------------------------------
# canonical form
# ---------------------------------------------------------------------------


def _encode(value: Any) -> str:
    # bool before int: bool is an int subclass
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, Enum):
        return _encode(value.value)
    if isinstance(value, int):
        return str(int(value))
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, (bytes, bytearray, memoryview)):
        return '"' + b64e(bytes(value)) + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in value) + "]"
    if isinstance(value, Mapping):
        keys = list(value.keys())
        for k in keys:
            if not isinstance(k, str):
                raise UnsupportedType(f"map key {k!r} is not a string")
        return (
            "{"
            + ",".join(
                json.dumps(k, ensure_ascii=False) + ":" + _encode(value[k])
                for k in sorted(keys)
            )
            + "}"
        )
    raise UnsupportedType(f"unsupported type {type(value).__name__}")


def canonicalize(value: Any) -> CanonicalBytes:
    """Encode ``value`` in canonical wire form.

    Raises :class:`UnsupportedType` for floats, sets, non-string map keys and
    other values outside the data model.
    """
    text = _encode(value)
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as exc:  # lone surrogates
        raise UnsupportedType("string is not valid unicode") from exc


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise MalformedEnvelope(f"duplicate key {k!r}")
        out[k] = v
    return out


def _reject_float(text: str) -> Any:
    raise MalformedEnvelope(f"floating point literal {text!r} is not canonical")


def _reject_constant(text: str) -> Any:
    raise MalformedEnvelope(f"constant {text!r} is not canonical")


def parse_canonical(data: bytes) -> Any:
    """Decode canonical bytes, insisting that they re-encode identically.

    ``bytes`` fields come back as their base64url strings; typed readers know
    which fields to decode.
    """
    try:
        text = bytes(data).decode("utf-8")
        value = json.loads(
            text,
            object_pairs_hook=_no_duplicates,
            parse_float=_reject_float,
            parse_constant=_reject_constant,
        )
    except MalformedEnvelope:
        raise
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedEnvelope(f"payload is not canonical JSON: {exc}") from exc
    if canonicalize(value) != bytes(data):
        raise MalformedEnvelope("payload bytes are not in canonical form")
    return value


def digest(value: Any) -> bytes:
    """SHA-256 of the canonical encoding (bytes input is hashed as-is)."""
    if isinstance(value, (bytes, bytearray)):
        return hashlib.sha256(bytes(value)).digest()
    if isinstance(value, SignedEnvelope):
        value = value.to_wire()
    return hashlib.sha256(canonicalize(value)).digest()


# ---------------------------------------------------------------------------
# keys
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    """An Ed25519 key pair. ``private_key`` is the 32-byte raw seed and is
    never part of any wire form."""

    key_id: str
    public_key: bytes
    private_key: bytes = field(repr=False)

    @classmethod
    def from_seed(cls, key_id: str, seed: bytes) -> KeyPair:
        secret = hashlib.sha256(b"claimsnet-key\x00" + bytes(seed)).digest()
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        pub = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(key_id=key_id, public_key=pub, private_key=secret)

    @classmethod
    def generate(cls, key_id: str) -> KeyPair:
        sk = Ed25519PrivateKey.generate()
        raw = sk.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        pub = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(key_id=key_id, public_key=pub, private_key=raw)

    def sign_bytes(self, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(data)


class KeyDirectory(Mapping[str, bytes]):
    """Public-key lookup by key_id. Ids are unique; re-registering the same
    key is a no-op, registering a different key under a taken id fails."""

    def __init__(self, entries: Mapping[str, bytes] | None = None) -> None:
        self._keys: dict[str, bytes] = {}
        for key_id, pub in (entries or {}).items():
            self.register(key_id, pub)

    def register(self, key_id: str, public_key: bytes) -> None:
        existing = self._keys.get(key_id)
        if existing is not None and existing != public_key:
            raise ValueError(f"key_id {key_id!r} already registered")
        self._keys[key_id] = bytes(public_key)

    def add(self, keypair: KeyPair) -> KeyPair:
        self.register(keypair.key_id, keypair.public_key)
        return keypair

    def __getitem__(self, key_id: str) -> bytes:
        return self._keys[key_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._keys)

    def __len__(self) -> int:
        return len(self._keys)

    def verify(self, envelope: SignedEnvelope) -> bool:
        pub = self._keys.get(envelope.signer_id)
        if pub is None:
            return False
        try:
            return verify(envelope, pub)
        except MalformedEnvelope:
            return False

    def to_wire(self) -> dict[str, bytes]:
        return dict(sorted(self._keys.items()))

    @classmethod
    def from_wire(cls, data: Mapping[str, str]) -> KeyDirectory:
        return cls({k: b64d(v) for k, v in data.items()})


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------

_WIRE_FIELDS = ("payload", "payload_type", "signature", "signed_at", "signer_id")


@dataclass(frozen=True)
class SignedEnvelope:
    payload_type: PayloadType
    payload: CanonicalBytes
    signer_id: str
    signature: bytes
    signed_at: int

    def body(self) -> Any:
        return parse_canonical(self.payload)

    def to_wire(self) -> dict[str, Any]:
        return {
            "payload": self.payload,
            "payload_type": self.payload_type.value,
            "signature": self.signature,
            "signed_at": self.signed_at,
            "signer_id": self.signer_id,
        }

    @classmethod
    def from_wire(cls, data: Any) -> SignedEnvelope:
        if not isinstance(data, Mapping):
            raise MalformedEnvelope("envelope must be a map")
        missing = [f for f in _WIRE_FIELDS if f not in data]
        if missing:
            raise MalformedEnvelope(f"missing envelope fields: {missing}")
        extra = sorted(set(data) - set(_WIRE_FIELDS))
        if extra:
            raise MalformedEnvelope(f"unexpected envelope fields: {extra}")
        try:
            payload_type = PayloadType(data["payload_type"])
        except ValueError as exc:
            raise MalformedEnvelope(f"unknown payload_type {data['payload_type']!r}") from exc
        signed_at = data["signed_at"]
        if isinstance(signed_at, bool) or not isinstance(signed_at, int):
            raise MalformedEnvelope("signed_at must be an integer")
        if not isinstance(data["signer_id"], str):
            raise MalformedEnvelope("signer_id must be a string")
        try:
            payload = _as_bytes(data["payload"])
            signature = _as_bytes(data["signature"])
        except ValueError as exc:
            raise MalformedEnvelope(str(exc)) from exc
        return cls(payload_type, payload, data["signer_id"], signature, signed_at)

    def digest(self) -> bytes:
        return digest(self.to_wire())


def _as_bytes(value: Any) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    if isinstance(value, str):
        return b64d(value)
    raise ValueError("expected bytes or base64url text")


def signing_input(
    payload_type: PayloadType, payload: bytes, signer_id: str, signed_at: int
) -> bytes:
    return canonicalize(
        {
            "payload": payload,
            "payload_type": PayloadType(payload_type).value,
            "signed_at": signed_at,
            "signer_id": signer_id,
        }
    )


def sign(
    keypair: KeyPair, payload_type: PayloadType, payload: CanonicalBytes, now: int
) -> SignedEnvelope:
    payload_type = PayloadType(payload_type)
    sig = keypair.sign_bytes(signing_input(payload_type, payload, keypair.key_id, now))
    return SignedEnvelope(payload_type, bytes(payload), keypair.key_id, sig, int(now))


def seal(keypair: KeyPair, payload_type: PayloadType, body: Any, now: int) -> SignedEnvelope:
    """Canonicalize ``body`` and sign it."""
    return sign(keypair, payload_type, canonicalize(body), now)


def verify(envelope: SignedEnvelope | Mapping[str, Any], public_key: bytes) -> bool:
    """True iff the signature covers payload, type, signer and timestamp.

    Raises :class:`MalformedEnvelope` for structurally broken envelopes or
    non-canonical payloads; returns False for any cryptographic mismatch.
    """
    if not isinstance(envelope, SignedEnvelope):
        envelope = SignedEnvelope.from_wire(envelope)
    if not isinstance(envelope.payload_type, PayloadType):
        raise MalformedEnvelope("payload_type is not a known tag")
    parse_canonical(envelope.payload)
    try:
        pub = Ed25519PublicKey.from_public_bytes(bytes(public_key))
    except ValueError:
        return False
    try:
        pub.verify(
            envelope.signature,
            signing_input(
                envelope.payload_type,
                envelope.payload,
                envelope.signer_id,
                envelope.signed_at,
            ),
        )
    except InvalidSignature:
        return False
    return True
