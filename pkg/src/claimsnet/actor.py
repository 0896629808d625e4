"""Single-threaded actor base used by every simulated node.

A node owns its key pair, its audit log and its private state. It reacts to
delivered :class:`~claimsnet.network_sim.bus.BusMessage` objects and to its own
timers; it talks to the outside world only through a :class:`Context`.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Any, Protocol

from .audit_log import AuditLog
from .envelope import EnvelopeError, KeyDirectory, KeyPair, PayloadType, SignedEnvelope, seal

if TYPE_CHECKING:
    from .network_sim.bus import BusMessage

logger = logging.getLogger(__name__)


class Context(Protocol):
    """What a node may do while handling one event."""

    now: int

    def post(self, from_node: str, to_node: str, envelope: SignedEnvelope) -> None: ...

    def schedule_timer(self, node_id: str, tag: str, generation: int, at: int) -> None: ...

    def trace(self, kind: str, **fields: Any) -> None: ...


class Node:
    kind = "node"

    def __init__(self, node_id: str, keypair: KeyPair, keys: KeyDirectory) -> None:
        if keypair.key_id != node_id:
            raise ValueError("a node signs with the key named after it")
        self.node_id = node_id
        self.keypair = keypair
        self.keys = keys
        self.log = AuditLog(node_id, keys)
        self._seen: set[str] = set()
        self._timers: dict[str, int] = {}
        self._timer_gen = 0

    # -- driven by the simulator -------------------------------------------

    def deliver(self, msg: BusMessage, ctx: Context) -> None:
        if msg.msg_id in self._seen:
            ctx.trace("duplicate_ignored", node=self.node_id, msg_id=msg.msg_id)
            return
        self._seen.add(msg.msg_id)
        env = msg.envelope
        if env.signer_id != msg.from_node or not self.keys.verify(env):
            ctx.trace("message_rejected", node=self.node_id, msg_id=msg.msg_id, reason="BadSignature")
            return
        try:
            body = env.body()
        except EnvelopeError:
            ctx.trace("message_rejected", node=self.node_id, msg_id=msg.msg_id, reason="Malformed")
            return
        handler = getattr(self, f"on_{env.payload_type.value}", None)
        if handler is None:
            ctx.trace("message_unhandled", node=self.node_id, msg_id=msg.msg_id)
            return
        handler(msg, body, ctx)

    def fire_timer(self, tag: str, generation: int, ctx: Context) -> None:
        if self._timers.get(tag) != generation:
            return
        del self._timers[tag]
        ctx.trace("timer", node=self.node_id, tag=tag)
        self.on_timer(tag, ctx)

    def on_timer(self, tag: str, ctx: Context) -> None:
        pass

    # -- helpers for subclasses --------------------------------------------

    def send(self, ctx: Context, to: str, payload_type: PayloadType, body: Any) -> SignedEnvelope:
        env = seal(self.keypair, payload_type, body, ctx.now)
        ctx.post(self.node_id, to, env)
        return env

    def reply_error(self, ctx: Context, to: str, correlation_id: str, error: str, detail: str = "") -> None:
        self.send(
            ctx,
            to,
            PayloadType.ERROR,
            {"correlation_id": correlation_id, "detail": detail, "error": error},
        )

    def set_timer(self, ctx: Context, tag: str, delay_ms: int) -> None:
        self._timer_gen += 1
        self._timers[tag] = self._timer_gen
        ctx.schedule_timer(self.node_id, tag, self._timer_gen, ctx.now + delay_ms)

    def cancel_timer(self, tag: str) -> None:
        self._timers.pop(tag, None)

    def retain(self, envelope: SignedEnvelope, now: int) -> None:
        self.log.append(envelope, now)
