"""Request lifecycle shared by the hierarchical and distributed models.

Both models agree on the application side (request, availability checks,
intradomain route setup, key establishment, key delivery). Subclasses fill
in how controllers coordinate across domains.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

from .control import (
    Controller,
    Message,
    MsgType,
    NetworkView,
    NoRoute,
    Plane,
    RequestClass,
    app_addr,
    availability_check,
    classify_request,
    compute_route,
    make,
    qn_addr,
    segments_by_domain,
)
from .net import DomainId, LinkId, Medium, NodeId
from .qkd import DeliveryRecord, KeyBlock, RelayFailed, new_key_block
from .scenario import RequestSpec

if TYPE_CHECKING:
    from .engine import Engine, Tick


class InvalidState(Exception):
    pass


class SessionState(str, enum.Enum):
    ROUTING = "Routing"
    ESTABLISHING = "Establishing"
    DELIVERING = "Delivering"
    CLOSED = "Closed"
    FAILED = "Failed"


_ORDER = [SessionState.ROUTING, SessionState.ESTABLISHING, SessionState.DELIVERING, SessionState.CLOSED]


@dataclass
class Segment:
    domain: DomainId
    entry: NodeId
    exit: NodeId


@dataclass
class Session:
    request_id: int
    src: NodeId
    dst: NodeId
    bits: int
    issued_at: float
    src_domain: DomainId
    dst_domain: DomainId
    kind: RequestClass = RequestClass.LOCAL
    state: SessionState = SessionState.ROUTING
    coordinator: int | None = None
    route: list[NodeId] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)
    intradomain_paths: dict[int, list[NodeId]] = field(default_factory=dict)
    backbone_links: list[LinkId] = field(default_factory=list)
    avail: dict[NodeId, bool] = field(default_factory=dict)
    delivery: DeliveryRecord | None = None
    block: KeyBlock | None = None
    outcome: str | None = None
    retried: bool = False
    stalled_at: int | None = None
    ready: set[str] = field(default_factory=set)
    teardown_started: bool = False

    @property
    def key_id(self) -> str:
        return f"k{self.request_id}"

    def advance(self, new: SessionState) -> None:
        if self.state in (SessionState.CLOSED, SessionState.FAILED):
            raise InvalidState(f"session {self.request_id} is {self.state.value}")
        if new is SessionState.FAILED:
            self.state = new
            return
        if _ORDER.index(new) < _ORDER.index(self.state):
            raise InvalidState(f"{self.state.value} -> {new.value} goes backwards")
        self.state = new

    @property
    def active(self) -> bool:
        return self.state not in (SessionState.CLOSED, SessionState.FAILED)

    def full_path(self) -> list[NodeId]:
        path: list[NodeId] = []
        for i in range(len(self.segments)):
            path.extend(self.intradomain_paths[i])
        return path


class BaseProtocol:
    model = ""

    def __init__(self, engine: "Engine"):
        self.engine = engine
        self.topology = engine.topology
        self.controllers: dict[int, Controller] = {}
        self.by_addr: dict[str, Controller] = {}
        self.sessions: dict[int, Session] = {}
        self.last_sync: dict[int, dict[str, tuple]] = {}

    # -- wiring ----------------------------------------------------------------

    def add_controller(self, ctrl: Controller) -> None:
        self.controllers[ctrl.id] = ctrl
        self.by_addr[ctrl.addr] = ctrl
        self.last_sync[ctrl.id] = {}

    def domain_controller(self, domain: DomainId) -> Controller:
        return self.controllers[self.topology.domain(domain).controller]

    def observed_links(self, ctrl: Controller) -> set[LinkId]:
        """Links a domain controller watches directly over its southbound agents."""
        if ctrl.domain is None:
            return set()
        return set(self.topology.domain(ctrl.domain).links) | self.topology.incident_backbone(ctrl.domain)

    def refresh_direct(self, ctrl: Controller) -> None:
        ctrl.view.apply((lid, self.engine.live_view(lid)) for lid in sorted(self.observed_links(ctrl)))

    def initial_view(self, ctrl: Controller, scope: Iterable[LinkId] | None) -> None:
        scope_set = None if scope is None else frozenset(scope)
        domains = {d.id for d in self.topology.domains} if scope_set is None else {
            self.topology.domain_of(n) for lid in scope_set for n in self.topology.links[lid].endpoints
        }
        ctrl.view = NetworkView(domains, scope_set)
        ids = sorted(self.topology.links) if scope_set is None else sorted(scope_set)
        ctrl.view.apply((lid, self.engine.live_view(lid)) for lid in ids)

    def send(self, msg: Message, delay: float | None = None) -> None:
        self.engine.send(msg, delay)

    # -- engine hooks --------------------------------------------------------------

    def start(self) -> None:
        raise NotImplementedError

    def on_tick(self, tick: "Tick") -> None:
        getattr(self, f"tick_{tick.name}")(*tick.data)

    def on_drop(self, msg: Message) -> None:
        if msg.request_id is None:
            return
        ctrl = self.by_addr.get(msg.receiver)
        session = self.sessions.get(msg.request_id)
        if ctrl is not None and session is not None and session.active:
            session.stalled_at = ctrl.id

    def on_controller_down(self, cid: int) -> None:
        self.controllers[cid].up = False

    def on_controller_up(self, cid: int) -> None:
        self.controllers[cid].up = True

    def on_link_change(self, links: list[LinkId]) -> None:
        pass

    def on_request(self, spec: RequestSpec) -> None:
        topo = self.topology
        src_domain = topo.domain_of(spec.src)
        session = Session(
            spec.request_id, spec.src, spec.dst, spec.bits, spec.at,
            src_domain, topo.domain_of(spec.dst),
        )
        self.sessions[spec.request_id] = session
        if spec.bits <= 0 or spec.src == spec.dst:
            session.advance(SessionState.FAILED)
            session.outcome = "InvalidRequest"
            return
        ctrl = self.domain_controller(src_domain)
        self.send(make(
            MsgType.KEY_SERVICE_REQUEST, app_addr(spec.src), ctrl.addr, spec.request_id, Plane.AP,
            src=spec.src, dst=spec.dst, bits=spec.bits, issued_at=spec.at,
        ))

    def on_message(self, msg: Message) -> None:
        handler = getattr(self, "on_" + _snake(msg.type.value))
        handler(msg)

    # -- shared handlers -----------------------------------------------------------

    def on_key_service_request(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        ctrl = self.by_addr[msg.receiver]
        session.kind = classify_request(self.topology, ctrl.domain, session.src, session.dst)
        self.query(ctrl, session, session.src)

    def query(self, ctrl: Controller, session: Session, node: NodeId) -> None:
        self.send(make(MsgType.AVAILABILITY_QUERY, ctrl.addr, qn_addr(node), session.request_id, node=node))

    def on_availability_query(self, msg: Message) -> None:
        node = int(msg.get("node"))
        reply = availability_check(
            [node], {node: self.engine.kms_bits(node)},
            faulted=[node] if self.engine.node_faulted(node) else [],
        )[0]
        self.send(make(
            MsgType.AVAILABILITY_REPLY, msg.receiver, msg.sender, msg.request_id,
            node=node, ok=reply.ok, bits_available=reply.bits_available,
        ))

    def on_availability_reply(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if not session.active:
            return
        ctrl = self.by_addr[msg.receiver]
        node = int(msg.get("node"))
        ok = bool(msg.get("ok")) and int(msg.get("bits_available")) >= session.bits
        if msg.sender.startswith("QN:"):
            session.avail[node] = ok
            if not ok:
                self.fail(session, "Unavailable", ctrl)
                return
        self.after_availability(ctrl, session, msg, ok)

    def after_availability(self, ctrl: Controller, session: Session, msg: Message, ok: bool) -> None:
        raise NotImplementedError

    def local_flow(self, ctrl: Controller, session: Session, node: NodeId) -> None:
        """Both ends in one domain: check the far QN, then route and set up."""
        if node == session.src:
            self.query(ctrl, session, session.dst)
            return
        self.refresh_direct(ctrl)
        domain_nodes = self.topology.domain(ctrl.domain).nodes
        try:
            path = compute_route(
                self.topology, ctrl.view, session.src, session.dst, session.bits,
                self.engine.now, nodes=domain_nodes,
            )
        except NoRoute:
            self.fail(session, "NoRoute", ctrl)
            return
        session.route = path
        session.segments = [Segment(ctrl.domain, session.src, session.dst)]
        session.advance(SessionState.ESTABLISHING)
        self.send_route_set(ctrl, session, 0, path)

    def plan_segments(self, session: Session, route: list[NodeId]) -> None:
        session.route = list(route)
        session.segments = [
            Segment(d, nodes[0], nodes[-1]) for d, nodes in segments_by_domain(self.topology, route)
        ]
        session.backbone_links = [
            self.topology.link_between(u, v).id
            for u, v in zip(route, route[1:])
            if self.topology.domain_of(u) != self.topology.domain_of(v)
        ]
        session.intradomain_paths = {}

    def set_intradomain(self, ctrl: Controller, session: Session, index: int) -> None:
        seg = session.segments[index]
        if seg.entry == seg.exit:
            path = [seg.entry]
        else:
            self.refresh_direct(ctrl)
            try:
                path = compute_route(
                    self.topology, ctrl.view, seg.entry, seg.exit, session.bits, self.engine.now,
                    nodes=self.topology.domain(seg.domain).nodes,
                )
            except NoRoute:
                self.fail(session, "NoRoute", ctrl)
                return
        if session.state is SessionState.ROUTING:
            session.advance(SessionState.ESTABLISHING)
        self.send_route_set(ctrl, session, index, path)

    def send_route_set(self, ctrl: Controller, session: Session, index: int, path: list[NodeId]) -> None:
        self.send(make(
            MsgType.INTRADOMAIN_ROUTE_SET, ctrl.addr, qn_addr(path[0]), session.request_id,
            payload=list(path), seg=index, path=path,
        ))

    def on_intradomain_route_set(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if not session.active or session.state is not SessionState.ESTABLISHING:
            return
        session.intradomain_paths[int(msg.get("seg"))] = list(msg.payload)
        if len(session.intradomain_paths) == len(session.segments):
            self.establish_key(session)

    def relay_hops(self, delivery: DeliveryRecord) -> int:
        hops = len(delivery.hops)
        if self.topology.satellite_trusted:
            for lid in {l for hop in delivery.hops for l in hop.links}:
                if self.topology.links[lid].medium is Medium.SATELLITE:
                    hops += 1
        return hops

    def establish_key(self, session: Session) -> None:
        """Run the trusted-node relay over the assembled path and notify the far QN."""
        eng = self.engine
        path = session.full_path()
        links = self.topology.path_links(path)
        for link in links:
            if not eng.link_up(link.id) or not link.available_at(eng.now):
                self.fail(session, "NoRoute", self.domain_controller(session.src_domain))
                return
            eng.store.accrue(link.id, eng.now)
        block = new_key_block(eng.seed, session.key_id, session.bits, eng.now)
        try:
            delivery = eng.store.relay_key(path, block)
        except RelayFailed:
            self.fail(session, "KeyDepleted", self.domain_controller(session.src_domain))
            return
        session.block = block
        session.delivery = delivery
        session.advance(SessionState.DELIVERING)
        km = sum(link.length_km for link in links)
        self.send(make(
            MsgType.KEY_ESTABLISH, qn_addr(path[0]), qn_addr(path[-1]), session.request_id, Plane.DP,
            key_id=session.key_id, bits=session.bits, hops=self.relay_hops(delivery),
        ), eng.latency.delay_s(km))
        self.on_keys_consumed(sorted({link.id for link in links}))

    def on_keys_consumed(self, links: list[LinkId]) -> None:
        pass

    def on_key_establish(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if not session.active or session.delivery is None:
            return
        store = self.engine.store
        store.deliver(session.src, session.src, session.block)
        store.deliver(session.dst, session.dst, KeyBlock(
            session.key_id, session.bits, session.delivery.delivered_payload, session.block.epoch,
        ))
        self.after_key_established(session)

    def after_key_established(self, session: Session) -> None:
        raise NotImplementedError

    def send_key_ready(self, ctrl: Controller, session: Session, app_node: NodeId) -> None:
        self.send(make(
            MsgType.KEY_READY, ctrl.addr, app_addr(app_node), session.request_id, Plane.AP,
            key_id=session.key_id,
        ))

    def on_key_ready(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        session.ready.add(msg.receiver)
        self.after_key_ready(session, msg)

    def after_key_ready(self, session: Session, msg: Message) -> None:
        if session.kind is RequestClass.LOCAL and len(session.ready) == 2 and session.active:
            session.advance(SessionState.CLOSED)
            session.outcome = "Delivered"

    # -- failures ------------------------------------------------------------------

    def fail(self, session: Session, code: str, at: Controller) -> None:
        """Mark the session failed and tell the source app via its domain controller."""
        if not session.active:
            return
        session.advance(SessionState.FAILED)
        session.outcome = code
        src_ctrl = self.domain_controller(session.src_domain)
        if at.id == src_ctrl.id:
            self.send(make(MsgType.ERROR, src_ctrl.addr, app_addr(session.src), session.request_id,
                           Plane.AP, code=code))
        else:
            self.send(make(MsgType.ERROR, at.addr, src_ctrl.addr, session.request_id, code=code))
        self.after_fail(session)

    def after_fail(self, session: Session) -> None:
        pass

    def on_error(self, msg: Message) -> None:
        if msg.receiver.startswith("App:"):
            return
        session = self.sessions[msg.request_id]
        ctrl = self.by_addr[msg.receiver]
        if ctrl.domain == session.src_domain:
            self.send(make(MsgType.ERROR, ctrl.addr, app_addr(session.src), session.request_id,
                           Plane.AP, code=msg.get("code")))

    # -- state sync ----------------------------------------------------------------

    def snapshot_for(self, ctrl: Controller) -> tuple:
        if ctrl.domain is not None:
            self.refresh_direct(ctrl)
            return ctrl.view.snapshot(self.observed_links(ctrl))
        return ctrl.view.snapshot()

    def send_sync(self, ctrl: Controller, receiver: Controller, **extra: object) -> None:
        snap = self.snapshot_for(ctrl)
        self.send(make(MsgType.STATE_SYNC, ctrl.addr, receiver.addr, None, payload=snap,
                       links=len(snap), **extra))

    def on_state_sync(self, msg: Message) -> None:
        ctrl = self.by_addr[msg.receiver]
        self.last_sync[ctrl.id][msg.sender] = msg.payload
        ctrl.view.apply(msg.payload)
        self.after_state_sync(ctrl, msg)

    def after_state_sync(self, ctrl: Controller, msg: Message) -> None:
        pass

    def delivered_sessions(self) -> list[Session]:
        return [s for s in self.sessions.values() if s.delivery is not None]


def _snake(name: str) -> str:
    out = []
    for i, ch in enumerate(name):
        if ch.isupper() and i:
            out.append("_")
        out.append(ch.lower())
    return "".join(out)
