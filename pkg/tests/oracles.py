"""Reference implementations written independently of ``claimsnet``.

Tests compare the package against these. Nothing here imports the package;
everything is plain ``json``, ``hashlib``, ``base64`` and the Ed25519
primitive from ``cryptography``.
"""

from __future__ import annotations

import base64
import hashlib
import json
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode("ascii").rstrip("=")


def unb64url(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


def naive_canonical(value: Any) -> bytes:
    """Sorted keys, no whitespace, bytes as unpadded base64url."""

    def default(o: Any) -> Any:
        if isinstance(o, (bytes, bytearray)):
            return b64url(bytes(o))
        raise TypeError(f"cannot encode {type(o).__name__}")

    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=default
    ).encode("utf-8")


def ed25519_ok(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def envelope_ok(env: dict[str, Any], public_key: bytes) -> bool:
    """Check a wire-form envelope (all byte fields as base64url text)."""
    message = naive_canonical(
        {
            "payload": env["payload"],
            "payload_type": env["payload_type"],
            "signed_at": env["signed_at"],
            "signer_id": env["signer_id"],
        }
    )
    return ed25519_ok(public_key, unb64url(env["signature"]), message)


def walk_log(data: bytes, keys: dict[str, bytes]) -> bool:
    """Recompute a persisted log from scratch: seq, links, hashes, signatures."""
    prev = b64url(bytes(32))
    lines = data.split(b"\n")
    if lines[-1] != b"":
        return False
    for i, line in enumerate(lines[:-1]):
        try:
            entry = json.loads(line)
        except ValueError:
            return False
        if naive_canonical(entry) != line:
            return False
        if entry["seq"] != i or entry["prev_hash"] != prev:
            return False
        body = {k: entry[k] for k in ("envelope", "prev_hash", "recorded_at", "seq")}
        if b64url(hashlib.sha256(naive_canonical(body)).digest()) != entry["entry_hash"]:
            return False
        env = entry["envelope"]
        if env["signer_id"] not in keys or not envelope_ok(env, keys[env["signer_id"]]):
            return False
        prev = entry["entry_hash"]
    return True


def walk_chain(chain: list[dict[str, Any]], root_id: str, root_key: bytes, now: int) -> bool:
    """Step through an attestation chain leaf to root by hand.

    Link i is signed by the subject of link i+1; the last link is signed by
    the root. Every link's validity window must contain ``now``.
    """
    if len(chain) < 2:
        return False
    bodies = [json.loads(unb64url(link["payload"])) for link in chain]
    for i, (link, body) in enumerate(zip(chain, bodies)):
        if i + 1 < len(chain):
            signer, key = bodies[i + 1]["subject"], unb64url(bodies[i + 1]["public_key"])
        else:
            signer, key = root_id, root_key
        if link["signer_id"] != signer or body["issuer"] != signer:
            return False
        if not envelope_ok(link, key):
            return False
        if not body["valid_from"] <= now < body["valid_to"]:
            return False
    return True


def tx_range(amounts: list[int]) -> dict[str, int]:
    """Brute-force min/max by pairwise comparison."""
    lo = hi = amounts[0]
    for a in amounts:
        if all(a <= b for b in amounts):
            lo = a
        if all(a >= b for b in amounts):
            hi = a
    return {"max": hi, "min": lo}


def decoded_layers(env: dict[str, Any]) -> list[bytes]:
    """The wire bytes of an envelope plus every payload nested inside it,
    base64 layers peeled, so a scan sees what a reader could decode."""
    out = [naive_canonical(env)]
    payload = unb64url(env["payload"])
    out.append(payload)
    stack: list[Any] = [json.loads(payload)]
    while stack:
        v = stack.pop()
        if isinstance(v, dict):
            if {"payload", "payload_type", "signature", "signer_id"} <= set(v):
                out.extend(decoded_layers(v))
                continue
            stack.extend(v.values())
        elif isinstance(v, list):
            stack.extend(v)
    return out
