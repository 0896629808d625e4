"""Deterministic message bus with pattern-based fault injection.

Latency is fixed plus an optional seeded jitter, so delivery times are a pure
function of (seed, posting order). The bus never touches payload bytes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..envelope import PayloadType, SignedEnvelope

DEFAULT_LATENCY_MS = 50


@dataclass(frozen=True)
class BusMessage:
    msg_id: str
    from_node: str
    to_node: str
    envelope: SignedEnvelope
    enqueued_at: int
    deliver_at: int
    sealed: bool = False

    @property
    def payload_type(self) -> PayloadType:
        return self.envelope.payload_type


@dataclass(frozen=True)
class MessagePattern:
    """Matches on any combination of payload type, sender and recipient.
    ``limit`` caps how many messages the attached action applies to."""

    payload_type: str | None = None
    from_node: str | None = None
    to_node: str | None = None
    limit: int | None = None

    def __post_init__(self) -> None:
        if self.payload_type is not None:
            PayloadType(self.payload_type)  # raises ValueError on unknown types
        if self.limit is not None and (isinstance(self.limit, bool) or self.limit < 1):
            raise ValueError("limit must be a positive integer")

    def matches(self, msg: BusMessage) -> bool:
        return (
            (self.payload_type is None or msg.payload_type.value == self.payload_type)
            and (self.from_node is None or msg.from_node == self.from_node)
            and (self.to_node is None or msg.to_node == self.to_node)
        )

    @classmethod
    def from_wire(cls, d: Mapping[str, Any]) -> MessagePattern:
        unknown = set(d) - {"payload_type", "from", "to", "limit"}
        if unknown:
            raise ValueError(f"unknown pattern keys {sorted(unknown)}")
        return cls(d.get("payload_type"), d.get("from"), d.get("to"), d.get("limit"))

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for key, value in (
            ("from", self.from_node),
            ("limit", self.limit),
            ("payload_type", self.payload_type),
            ("to", self.to_node),
        ):
            if value is not None:
                out[key] = value
        return out


@dataclass(frozen=True)
class FaultAction:
    kind: str  # drop | delay | duplicate
    delay_ms: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("drop", "delay", "duplicate"):
            raise ValueError(f"unknown fault action {self.kind!r}")
        if self.kind == "delay" and self.delay_ms <= 0:
            raise ValueError("delay needs a positive delay_ms")

    @classmethod
    def drop(cls) -> FaultAction:
        return cls("drop")

    @classmethod
    def delay(cls, delay_ms: int) -> FaultAction:
        return cls("delay", delay_ms)

    @classmethod
    def duplicate(cls) -> FaultAction:
        return cls("duplicate")


@dataclass
class FaultRule:
    pattern: MessagePattern
    action: FaultAction
    hits: int = 0

    def applies(self, msg: BusMessage) -> bool:
        if self.pattern.limit is not None and self.hits >= self.pattern.limit:
            return False
        return self.pattern.matches(msg)


@dataclass
class MessageBus:
    seed: int
    latency_ms: int = DEFAULT_LATENCY_MS
    jitter_ms: int = 0
    sealed: bool = False
    faults: list[FaultRule] = field(default_factory=list)
    dropped: list[BusMessage] = field(default_factory=list)
    sent: list[BusMessage] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.latency_ms < 1:
            raise ValueError("latency must be at least 1 ms so same-instant events never cascade")
        self._rng = random.Random(f"bus|{self.seed}")
        self._counter = 0

    def submit(self, from_node: str, to_node: str, envelope: SignedEnvelope, now: int) -> list[BusMessage]:
        """Queue one logical message; returns the copies to deliver (0, 1 or 2)."""
        self._counter += 1
        jitter = self._rng.randint(0, self.jitter_ms) if self.jitter_ms else 0
        msg = BusMessage(
            msg_id=f"m{self._counter:06d}",
            from_node=from_node,
            to_node=to_node,
            envelope=envelope,
            enqueued_at=now,
            deliver_at=now + self.latency_ms + jitter,
            sealed=self.sealed,
        )
        self.sent.append(msg)
        rule = next((r for r in self.faults if r.applies(msg)), None)
        if rule is None:
            return [msg]
        rule.hits += 1
        if rule.action.kind == "drop":
            self.dropped.append(msg)
            return []
        if rule.action.kind == "delay":
            return [_replace_time(msg, msg.deliver_at + rule.action.delay_ms)]
        # duplicate: same msg_id, second copy one latency later
        return [msg, _replace_time(msg, msg.deliver_at + self.latency_ms)]


def _replace_time(msg: BusMessage, deliver_at: int) -> BusMessage:
    return BusMessage(msg.msg_id, msg.from_node, msg.to_node, msg.envelope, msg.enqueued_at, deliver_at, msg.sealed)


def inject_fault(bus: MessageBus, pattern: MessagePattern, action: FaultAction) -> MessageBus:
    """Apply ``action`` to every future message matching ``pattern``.
    Earlier rules take precedence over later ones."""
    bus.faults.append(FaultRule(pattern, action))
    return bus
