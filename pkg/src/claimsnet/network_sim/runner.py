"""Discrete-event simulation binding every node into one reproducible run.

Events are ordered by ``(time, sequence)``. Latency and timer delays are at
least 1 ms, so every event due at instant ``t`` already exists when ``t`` is
reached. Handlers run against a buffered context whose effects are committed
in event order; that is what lets the parallel mode step different nodes
concurrently and still produce the sequential trace.
"""

from __future__ import annotations

import heapq
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from ..actor import Node
from ..audit_log import AuditLog, checkpoint
from ..claims_provider import ClaimsProvider
from ..did_resolver import DidError, DidResolverNode, make_endpoint_record
from ..envelope import KeyDirectory, KeyPair, PayloadType, SignedEnvelope, canonicalize, parse_canonical, seal
from ..key_registry import (
    Authority,
    KeyRegistry,
    KeyRegistryError,
    OwnershipEvidence,
    respond_to_challenge,
)
from ..opal_provider import (
    CATALOGUE,
    AlgorithmRegistry,
    ConsentRecord,
    DataProvider,
    grant_consent,
    standard_registry,
)
from ..vasp_node import AssetLedger, Customer, VaspNode, parse_policy
from .bus import BusMessage, FaultAction, MessageBus, MessagePattern, inject_fault
from .scenario import FAULT_EVENTS, ScenarioConfig, build_dataset

logger = logging.getLogger(__name__)

SCRIPT = "script"


# ---------------------------------------------------------------------------
# event loop
# ---------------------------------------------------------------------------


class _BufferedContext:
    """Collects one handler's effects for an ordered commit."""

    def __init__(self, now: int) -> None:
        self.now = now
        self.ops: list[tuple[Any, ...]] = []

    def post(self, from_node: str, to_node: str, envelope: SignedEnvelope) -> None:
        self.ops.append(("post", from_node, to_node, envelope))

    def schedule_timer(self, node_id: str, tag: str, generation: int, at: int) -> None:
        if at <= self.now:
            raise ValueError("timers must lie in the future")
        self.ops.append(("timer", node_id, tag, generation, at))

    def trace(self, kind: str, **fields: Any) -> None:
        self.ops.append(("trace", kind, fields))


@dataclass(order=True)
class _Event:
    at: int
    seq: int
    kind: str = field(compare=False)  # deliver | timer | script
    target: str = field(compare=False)
    data: Any = field(compare=False)


class Simulation:
    def __init__(self, bus: MessageBus, nodes: Mapping[str, Node], *, parallel: bool = False, workers: int = 4):
        self.bus = bus
        self.nodes = dict(nodes)
        self.parallel = parallel
        self.workers = workers
        self.now = 0
        self.trace: list[dict[str, Any]] = []
        self._queue: list[_Event] = []
        self._seq = 0

    def _push(self, at: int, kind: str, target: str, data: Any) -> None:
        self._seq += 1
        heapq.heappush(self._queue, _Event(at, self._seq, kind, target, data))

    def schedule(self, at: int, fn: Callable[[_BufferedContext], None]) -> None:
        """Queue a script stimulus."""
        self._push(at, "script", SCRIPT, fn)

    def record(self, kind: str, **fields: Any) -> None:
        entry = {"kind": kind, "seq": len(self.trace), "t": self.now, **fields}
        # round-trip through the canonical form: ints only, bytes as base64url
        self.trace.append(parse_canonical(canonicalize(entry)))

    def run(self, until: int | None = None) -> None:
        while self._queue:
            at = self._queue[0].at
            if until is not None and at > until:
                break
            batch = []
            while self._queue and self._queue[0].at == at:
                batch.append(heapq.heappop(self._queue))
            self.now = at
            ctxs = self._execute(batch)
            for ev, ctx in zip(batch, ctxs):
                self._commit(ev, ctx)

    def _execute(self, batch: list[_Event]) -> list[_BufferedContext]:
        ctxs = [_BufferedContext(self.now) for _ in batch]
        if not self.parallel or any(ev.kind == "script" for ev in batch):
            for ev, ctx in zip(batch, ctxs):
                self._step(ev, ctx)
            return ctxs
        groups: dict[str, list[int]] = defaultdict(list)
        for i, ev in enumerate(batch):
            groups[ev.target].append(i)

        def run_group(indices: list[int]) -> None:
            for i in indices:
                self._step(batch[i], ctxs[i])

        if len(groups) == 1:
            run_group(next(iter(groups.values())))
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                list(pool.map(run_group, groups.values()))
        return ctxs

    def _step(self, ev: _Event, ctx: _BufferedContext) -> None:
        if ev.kind == "deliver":
            ctx.ops.append(("deliver",))
            self.nodes[ev.target].deliver(ev.data, ctx)
        elif ev.kind == "timer":
            tag, generation = ev.data
            self.nodes[ev.target].fire_timer(tag, generation, ctx)
        else:
            ev.data(ctx)

    def _commit(self, ev: _Event, ctx: _BufferedContext) -> None:
        for op in ctx.ops:
            if op[0] == "deliver":
                msg: BusMessage = ev.data
                self.record("deliver", msg_id=msg.msg_id, to=msg.to_node)
            elif op[0] == "trace":
                self.record(op[1], **op[2])
            elif op[0] == "timer":
                _, node_id, tag, generation, at = op
                self._push(at, "timer", node_id, (tag, generation))
            else:
                _, from_node, to_node, env = op
                if to_node not in self.nodes:
                    raise KeyError(f"{from_node} posted to unknown node {to_node!r}")
                copies = self.bus.submit(from_node, to_node, env, self.now)
                self._record_send(from_node, to_node, env, copies)
                for m in copies:
                    self._push(m.deliver_at, "deliver", m.to_node, m)

    def _record_send(self, from_node: str, to_node: str, env: SignedEnvelope, copies: list[BusMessage]) -> None:
        msg = self.bus.sent[-1]
        fields: dict[str, Any] = {
            "digest": env.digest().hex(),
            "from": from_node,
            "msg_id": msg.msg_id,
            "payload_type": env.payload_type.value,
            "to": to_node,
        }
        if msg.sealed:
            fields["sealed"] = True
        else:
            fields["envelope"] = env.to_wire()
        if not copies:
            fields["fault"] = "drop"
        elif len(copies) == 2:
            fields["fault"] = "duplicate"
        elif copies[0].deliver_at != msg.deliver_at:
            fields["fault"] = "delay"
        fields["deliver_at"] = [m.deliver_at for m in copies]
        self.record("send", **fields)


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


@dataclass
class World:
    config: ScenarioConfig
    seed: int
    keys: KeyDirectory
    keypairs: dict[str, KeyPair]
    algorithms: AlgorithmRegistry
    bus: MessageBus
    ledger: AssetLedger
    authorities: dict[str, Authority] = field(default_factory=dict)
    registries: dict[str, KeyRegistry] = field(default_factory=dict)
    providers: dict[str, DataProvider] = field(default_factory=dict)
    claims_providers: dict[str, ClaimsProvider] = field(default_factory=dict)
    resolver: DidResolverNode | None = None
    vasps: dict[str, VaspNode] = field(default_factory=dict)
    subjects: dict[str, dict[str, Any]] = field(default_factory=dict)
    customers: dict[tuple[str, str], Customer] = field(default_factory=dict)

    @property
    def nodes(self) -> dict[str, Node]:
        out: dict[str, Node] = {}
        out.update(self.providers)
        out.update(self.claims_providers)
        if self.resolver is not None:
            out[self.resolver.node_id] = self.resolver
        out.update(self.vasps)
        return out

    @property
    def logs(self) -> dict[str, AuditLog]:
        out = {nid: n.log for nid, n in self.nodes.items()}
        out.update({rid: r.log for rid, r in self.registries.items()})
        return dict(sorted(out.items()))

    def keypair(self, key_id: str) -> KeyPair:
        kp = self.keypairs.get(key_id)
        if kp is None:
            kp = KeyPair.from_seed(key_id, f"{self.config.name}|{self.seed}|{key_id}".encode())
            self.keys.add(kp)
            self.keypairs[key_id] = kp
        return kp


def build_world(config: ScenarioConfig, seed: int | None = None) -> World:
    seed = config.seed if seed is None else seed
    s = config.settings
    world = World(
        config=config,
        seed=seed,
        keys=KeyDirectory(),
        keypairs={},
        algorithms=standard_registry(config.vetted),
        bus=MessageBus(seed, s.latency_ms, s.jitter_ms, s.sealed_transport),
        ledger=AssetLedger(),
    )
    for root_id in config.roots:
        world.authorities[root_id] = Authority.root(world.keypair(root_id))
    for r in config.registries:
        authority = world.authorities[r["root"]]
        for i in range(r.get("intermediates", 0)):
            authority = authority.delegate(world.keypair(f"{r['id']}/ca{i + 1}"), 0, s.attestation_validity_ms)
        authority = authority.delegate(world.keypair(r["id"]), 0, s.attestation_validity_ms)
        world.authorities[r["id"]] = authority
        world.registries[r["id"]] = KeyRegistry(
            authority, world.keys, seed=seed, validity_ms=s.attestation_validity_ms
        )
    for subj in config.subjects:
        world.keypair(subj["id"])
        world.subjects[subj["id"]] = subj
    for p in config.providers:
        datasets = [build_dataset(ds, p["id"], seed, config.base_dir) for ds in p["datasets"]]
        world.providers[p["id"]] = DataProvider(
            p["id"],
            world.keypair(p["id"]),
            world.keys,
            world.algorithms,
            datasets,
            k_min=p.get("k_min", s.k_min),
            hosted=p.get("hosted"),
        )
    for v in config.vasps:
        world.keypair(v["id"])
    for c in config.claims_providers:
        hosts = {}
        for ref in CATALOGUE:
            for pid in c.get("providers", []):
                dp = world.providers[pid]
                need = set(CATALOGUE[ref].descriptor.required_schema)
                if ref in dp.hosted and any(need <= set(ds.schema) for ds in dp._datasets):
                    hosts[ref] = pid
                    break
        cp = ClaimsProvider(
            c["id"],
            world.keypair(c["id"]),
            world.keypair(f"{c['id']}/as"),
            world.keys,
            world.algorithms,
            hosts,
            claim_ttl_ms=s.claim_ttl_ms,
            collation_timeout_ms=s.collation_timeout_ms,
            token_ttl_ms=s.token_ttl_ms,
        )
        for vasp_id, refs in sorted(c.get("entitlements", {}).items()):
            cp.auth.enroll(vasp_id, world.keys[vasp_id], refs)
        world.claims_providers[c["id"]] = cp
    if config.resolver:
        world.resolver = DidResolverNode(config.resolver, world.keypair(config.resolver), world.keys)
    for v in config.vasps:
        world.vasps[v["id"]] = VaspNode(
            v["id"],
            world.keypairs[v["id"]],
            world.keys,
            jurisdiction=v["jurisdiction"],
            trusted_roots={r: world.keys[r] for r in v.get("trusted_roots", [])},
            ledger=world.ledger,
            policy=parse_policy(v.get("policy")),
            claim_algos=v.get("claim_algos", ["tx-range v1"]),
            resolver_id=config.resolver,
            cp_timeout_ms=s.cp_timeout_ms,
            receipt_timeout_ms=s.receipt_timeout_ms,
            ready_timeout_ms=s.ready_timeout_ms,
        )
    for f in config.faults:
        inject_fault(world.bus, MessagePattern.from_wire(f.get("pattern", {})), FaultAction(f["action"], f.get("delay_ms", 0)))
    return world


# ---------------------------------------------------------------------------
# script stimuli
# ---------------------------------------------------------------------------


def _grant_consent(world: World, ev: Mapping[str, Any], ctx: _BufferedContext) -> None:
    subject = ev["subject"]
    ttl = ev.get("ttl_ms", 90 * 86_400_000)
    granted_at = ev.get("granted_at", ctx.now)
    if "forged_by" in ev:
        # somebody else signs a consent naming this subject
        env = seal(
            world.keypair(ev["forged_by"]),
            PayloadType.CONSENT,
            {
                "algo": ev["algo"],
                "audience": ev["audience"],
                "expires_at": granted_at + ttl,
                "granted_at": granted_at,
                "subject_id": subject,
            },
            ctx.now,
        )
        record = ConsentRecord.from_envelope(env)
    else:
        record = grant_consent(world.keypair(subject), ev["algo"], ev["audience"], granted_at, ttl)
    world.claims_providers[ev.get("deliver_to", ev["audience"])].add_consent(record)
    ctx.trace("consent_granted", subject=subject, algo=ev["algo"], audience=ev["audience"],
              expires_at=record.expires_at, forged="forged_by" in ev)


def _register_did(world: World, ev: Mapping[str, Any], ctx: _BufferedContext) -> None:
    assert world.resolver is not None
    kp = world.keypair(ev["subject"])
    resolver = world.resolver.resolver
    try:
        resolver.bind(ev["did"], kp.public_key)
        record = make_endpoint_record(
            kp, ev["did"], ev["claims_provider"], ev.get("endpoint", f"bus://{ev['claims_provider']}"),
            ev.get("recorded_at", ctx.now),
        )
        resolver.register(record)
    except DidError as exc:
        ctx.trace("did_rejected", did=ev["did"], error=exc.code)
        return
    ctx.trace("did_registered", did=ev["did"], claims_provider=ev["claims_provider"], recorded_at=record.recorded_at)


def _onboard(world: World, ev: Mapping[str, Any], ctx: _BufferedContext) -> None:
    vasp = world.vasps[ev["vasp"]]
    subject = world.subjects[ev["subject"]]
    kp = world.keypair(ev["subject"])
    kind = ev.get("key_evidence", "ownership")
    evidence = None
    if kind != "none":
        registry = world.registries[ev["registry"]]
        if kind == "custody":
            evidence = registry.issue_custody(vasp.node_id, kp.key_id, kp.public_key, ctx.now)
        else:
            enrollment = registry.enroll(kp.key_id, kp.public_key, ctx.now) if ev.get("enrolled", True) else None
            challenge = registry.new_challenge(kp.public_key, ctx.now)
            proof = respond_to_challenge(kp, challenge, ctx.now)
            registry.check_response(challenge.nonce, proof)
            evidence = proof
            if kind == "ownership":
                try:
                    evidence = registry.issue_ownership(
                        kp.key_id, kp.public_key, OwnershipEvidence(proof, enrollment), ctx.now
                    )
                except KeyRegistryError as exc:
                    ctx.trace("attestation_refused", subject=kp.key_id, error=exc.code)
    customer = Customer(
        subject_id=kp.key_id,
        name=subject["name"],
        account=ev["account"],
        locator=dict(subject["locator"]),
        public_key=kp.public_key,
        claims_provider=ev.get("claims_provider"),
        did=ev.get("did"),
        evidence=evidence,
    )
    vasp.onboard(customer, ctx.now)
    world.customers[(vasp.node_id, kp.key_id)] = customer
    world.ledger.mint(vasp.node_id, ev["account"], ev.get("balance", 0))
    ctx.trace("onboarded", vasp=vasp.node_id, subject=kp.key_id, evidence=kind, balance=ev.get("balance", 0))


def _initiate(world: World, ev: Mapping[str, Any], ctx: _BufferedContext) -> None:
    vasp = world.vasps[ev["vasp"]]
    event = dict(ev)
    counterpart = world.customers.get((ev["beneficiary_vasp"], ev["beneficiary"]))
    if counterpart is not None:
        event.setdefault("beneficiary_account", counterpart.account)
        event.setdefault("beneficiary_name", counterpart.name)
    ctx.trace("transfer_requested", vasp=vasp.node_id, originator=ev["originator"], amount=ev["amount"])
    vasp.start_transfer(ctx, event)


def _fault(world: World, ev: Mapping[str, Any], ctx: _BufferedContext) -> None:
    action = FaultAction(FAULT_EVENTS[ev["event"]], ev.get("delay_ms", 0))
    pattern = MessagePattern.from_wire(ev.get("pattern", {}))
    inject_fault(world.bus, pattern, action)
    ctx.trace("fault_injected", action=action.kind, pattern=pattern.to_wire(), delay_ms=action.delay_ms)


_STIMULI = {
    "grant_consent": _grant_consent,
    "register_did": _register_did,
    "onboard": _onboard,
    "initiate_transfer": _initiate,
    "drop_message": _fault,
    "delay_message": _fault,
    "duplicate_message": _fault,
}


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    world: World
    trace: list[dict[str, Any]]
    reports: list[dict[str, Any]]
    checks: dict[str, list[str]]
    files: dict[str, bytes]

    @property
    def logs(self) -> dict[str, AuditLog]:
        return self.world.logs

    @property
    def messages(self) -> list[BusMessage]:
        return self.world.bus.sent

    def final_states(self) -> dict[tuple[str, str], tuple[str, str | None]]:
        return {(r["vasp_id"], r["transfer_id"]): (r["state"], r["reason"]) for r in self.reports}

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        for rel, data in self.files.items():
            path = out / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        return out


def run_scenario(
    config: ScenarioConfig,
    seed: int | None = None,
    *,
    parallel: bool | None = None,
    out_dir: str | Path | None = None,
) -> RunResult:
    """Run one scenario to quiescence and collect trace, reports and logs."""
    from .checks import run_checks

    world = build_world(config, seed)
    sim = Simulation(
        world.bus, world.nodes, parallel=config.settings.parallel if parallel is None else parallel
    )
    for ev in config.script:
        handler = _STIMULI[ev["event"]]
        sim.schedule(ev.get("at", 0), lambda ctx, ev=ev, handler=handler: handler(world, ev, ctx))
    sim.run()

    reports = sorted(
        (row for v in world.vasps.values() for row in v.report()),
        key=lambda r: (r["transfer_id"], r["vasp_id"]),
    )
    files = _output_files(world, sim, reports)
    checks = run_checks(world, sim.trace, files)
    report_doc = {
        "checks": checks,
        "ledger": world.ledger.to_wire(),
        "scenario": config.name,
        "seed": world.seed,
        "transfers": reports,
    }
    files["report.json"] = canonicalize(report_doc) + b"\n"
    result = RunResult(world, sim.trace, reports, checks, dict(sorted(files.items())))
    if out_dir is not None:
        result.write(out_dir)
    return result


def _output_files(world: World, sim: Simulation, reports: list[dict[str, Any]]) -> dict[str, bytes]:
    files: dict[str, bytes] = {}
    files["scenario.json"] = world.config.dumps() + b"\n"
    files["trace.jsonl"] = b"".join(canonicalize(e) + b"\n" for e in sim.trace)
    files["keys.json"] = canonicalize(world.keys.to_wire()) + b"\n"
    files["algorithms.json"] = world.algorithms.publish() + b"\n"
    checkpoints = []
    for node_id, log in world.logs.items():
        files[f"logs/{node_id}.log"] = log.dumps()
        checkpoints.append(canonicalize(checkpoint(log, world.keypair(node_id), sim.now).to_wire()) + b"\n")
    files["checkpoints.jsonl"] = b"".join(checkpoints)
    for cp_id, cp in world.claims_providers.items():
        for subject_id, store in sorted(cp.pds.items()):
            files[f"pds/{cp_id}/{subject_id}.jsonl"] = store.dumps()
    if world.resolver is not None:
        files["did_registry.jsonl"] = world.resolver.resolver.dumps()
    return files
