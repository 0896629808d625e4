"""Hash-chained, append-only audit log.

Each node retains every signed artifact it sends, receives or attaches.
Entries are chained with SHA-256::

    entry_hash = sha256(canonicalize({envelope, prev_hash, recorded_at, seq}))

and persisted as newline-delimited canonical records (``<node_id>.log``).
"""

from __future__ import annotations

import hashlib
import threading
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .envelope import (
    EnvelopeError,
    KeyDirectory,
    KeyPair,
    PayloadType,
    SignedEnvelope,
    b64d,
    canonicalize,
    parse_canonical,
    seal,
    verify,
)

ZERO_HASH = bytes(32)

Verifier = Callable[[SignedEnvelope], bool]


class InvalidEnvelope(Exception):
    """Refused to log an envelope that does not verify."""


def compute_entry_hash(
    seq: int, prev_hash: bytes, recorded_at: int, envelope: SignedEnvelope
) -> bytes:
    return hashlib.sha256(
        canonicalize(
            {
                "envelope": envelope.to_wire(),
                "prev_hash": prev_hash,
                "recorded_at": recorded_at,
                "seq": seq,
            }
        )
    ).digest()


@dataclass(frozen=True)
class LogEntry:
    seq: int
    prev_hash: bytes
    entry_hash: bytes
    recorded_at: int
    envelope: SignedEnvelope

    def to_wire(self) -> dict[str, Any]:
        return {
            "entry_hash": self.entry_hash,
            "envelope": self.envelope.to_wire(),
            "prev_hash": self.prev_hash,
            "recorded_at": self.recorded_at,
            "seq": self.seq,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> LogEntry:
        if set(data) != {"entry_hash", "envelope", "prev_hash", "recorded_at", "seq"}:
            raise ValueError("log entry has wrong field set")
        seq, recorded_at = data["seq"], data["recorded_at"]
        for v in (seq, recorded_at):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ValueError("seq and recorded_at must be integers")
        return cls(
            seq=seq,
            prev_hash=b64d(data["prev_hash"]),
            entry_hash=b64d(data["entry_hash"]),
            recorded_at=recorded_at,
            envelope=SignedEnvelope.from_wire(data["envelope"]),
        )


def _as_verifier(keys: KeyDirectory | Mapping[str, bytes] | Verifier) -> Verifier:
    if callable(keys) and not isinstance(keys, Mapping):
        return keys

    def check(env: SignedEnvelope) -> bool:
        pub = keys.get(env.signer_id)
        if pub is None:
            return False
        try:
            return verify(env, pub)
        except EnvelopeError:
            return False

    return check


class AuditLog:
    """Single-writer append-only log; readers see whole entries only."""

    def __init__(
        self,
        node_id: str,
        keys: KeyDirectory | Mapping[str, bytes] | Verifier,
        *,
        retention_ms: int | None = None,
    ) -> None:
        self.node_id = node_id
        self.retention_ms = retention_ms
        self._verify = _as_verifier(keys)
        self._entries: list[LogEntry] = []
        self._lock = threading.Lock()
        # set when a persisted log could not be parsed back; verify_chain fails
        self._defects: list[str] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[LogEntry]:
        return iter(tuple(self._entries))

    def __getitem__(self, i: int) -> LogEntry:
        return self._entries[i]

    @property
    def head_hash(self) -> bytes:
        return self._entries[-1].entry_hash if self._entries else ZERO_HASH

    def envelopes(self, payload_type: PayloadType | None = None) -> list[SignedEnvelope]:
        return [
            e.envelope
            for e in self._entries
            if payload_type is None or e.envelope.payload_type == payload_type
        ]

    def append(self, envelope: SignedEnvelope, now: int) -> LogEntry:
        if not self._verify(envelope):
            raise InvalidEnvelope(
                f"{self.node_id}: envelope from {envelope.signer_id!r} does not verify"
            )
        with self._lock:
            seq = len(self._entries)
            prev = self.head_hash
            entry = LogEntry(
                seq=seq,
                prev_hash=prev,
                entry_hash=compute_entry_hash(seq, prev, now, envelope),
                recorded_at=now,
                envelope=envelope,
            )
            self._entries.append(entry)
        return entry

    def verify_chain(self) -> bool:
        return verify_chain(self)

    def due_for_disposal(self, now: int) -> list[LogEntry]:
        """Entries older than the retention window. Nothing is deleted here;
        disposal would have to re-anchor the chain."""
        if self.retention_ms is None:
            return []
        return [e for e in self._entries if now - e.recorded_at > self.retention_ms]

    # -- persistence -------------------------------------------------------

    def dumps(self) -> bytes:
        return b"".join(canonicalize(e.to_wire()) + b"\n" for e in self._entries)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.dumps())
        return path

    @classmethod
    def loads(
        cls,
        data: bytes,
        keys: KeyDirectory | Mapping[str, bytes] | Verifier,
        node_id: str = "",
    ) -> AuditLog:
        """Parse a persisted log. Parsing never raises: unreadable or
        non-canonical lines are recorded as defects so that
        :func:`verify_chain` reports False."""
        log = cls(node_id, keys)
        if data and not data.endswith(b"\n"):
            log._defects.append("missing trailing newline")
        lines = data.split(b"\n")
        if lines and lines[-1] == b"":
            lines.pop()
        for n, line in enumerate(lines):
            try:
                log._entries.append(LogEntry.from_wire(parse_canonical(line)))
            except (EnvelopeError, ValueError, TypeError, KeyError) as exc:
                log._defects.append(f"line {n}: {exc}")
        return log

    @classmethod
    def load(
        cls, path: str | Path, keys: KeyDirectory | Mapping[str, bytes] | Verifier
    ) -> AuditLog:
        path = Path(path)
        node_id = path.name[: -len(".log")] if path.name.endswith(".log") else path.stem
        return cls.loads(path.read_bytes(), keys, node_id)


def verify_chain(log: AuditLog) -> bool:
    """True iff every entry recomputes, links to its predecessor, has a
    contiguous ``seq`` and carries an envelope that verifies."""
    if log._defects:
        return False
    prev = ZERO_HASH
    for i, entry in enumerate(log._entries):
        if entry.seq != i or entry.prev_hash != prev:
            return False
        expected = compute_entry_hash(entry.seq, entry.prev_hash, entry.recorded_at, entry.envelope)
        if entry.entry_hash != expected:
            return False
        if not log._verify(entry.envelope):
            return False
        prev = entry.entry_hash
    return True


def checkpoint(log: AuditLog, keypair: KeyPair, now: int) -> SignedEnvelope:
    """Signed statement of the log's current length and head hash."""
    return seal(
        keypair,
        PayloadType.LOG_CHECKPOINT,
        {"head_hash": log.head_hash, "length": len(log), "node_id": log.node_id},
        now,
    )


def matches_checkpoint(log: AuditLog, cp: SignedEnvelope, public_key: bytes) -> bool:
    try:
        if cp.payload_type != PayloadType.LOG_CHECKPOINT or not verify(cp, public_key):
            return False
        body = cp.body()
    except EnvelopeError:
        return False
    length = body.get("length")
    if isinstance(length, bool) or not isinstance(length, int) or not 0 <= length <= len(log):
        return False
    head = log[length - 1].entry_hash if length else ZERO_HASH
    try:
        return b64d(body.get("head_hash", "")) == head
    except ValueError:
        return False
