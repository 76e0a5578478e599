"""Distributed integration: one peer controller per domain over an east-west interface.

Every peer holds a view of the whole network, kept current by full-snapshot
gossip. Interdomain routes are negotiated between the two end peers, and
concurrent requests competing for backbone key are settled by a static
priority order (earlier issue time first, then smaller origin domain).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .control import (
    Controller,
    Message,
    MsgType,
    NetworkView,
    NoRoute,
    RequestClass,
    RoleKind,
    compute_route,
    make,
)
from .net import ControllerId, DomainId, LinkId, NodeId, Topology
from .protocol import BaseProtocol, Session, SessionState


class NegotiationFailed(Exception):
    pass


@dataclass(frozen=True)
class PeerTable:
    peers: dict[ControllerId, DomainId]
    ewbi_links: frozenset[tuple[ControllerId, ControllerId]]

    @classmethod
    def from_topology(cls, topology: Topology) -> "PeerTable":
        ctrl = {d.id: d.controller for d in topology.domains}
        links = set()
        for a, nbrs in topology.domain_adjacency().items():
            for b in nbrs:
                links.add((min(ctrl[a], ctrl[b]), max(ctrl[a], ctrl[b])))
        return cls({d.controller: d.id for d in topology.domains}, frozenset(links))


@dataclass(frozen=True)
class Proposal:
    path: tuple[NodeId, ...] | None
    freshness: float


def propose(
    topology: Topology, view: NetworkView, src: NodeId, dst: NodeId, bits: int, now: float
) -> Proposal:
    """Route one peer would choose, tagged with how fresh its view of that route is."""
    try:
        path = compute_route(topology, view, src, dst, bits, now)
    except NoRoute:
        return Proposal(None, float("-inf"))
    links = [link.id for link in topology.path_links(path)]
    return Proposal(tuple(path), view.freshness(links))


def peer_negotiate(src: Proposal, dst: Proposal) -> tuple[NodeId, ...]:
    """Agree on one route from the two peers' proposals.

    Equal proposals agree directly. Otherwise the proposal built on the
    fresher view wins and a tie goes to the source peer.
    """
    if src.path is None and dst.path is None:
        raise NegotiationFailed("neither peer has a feasible route")
    if dst.path is None:
        return src.path
    if src.path is None:
        return dst.path
    if src.path == dst.path:
        return src.path
    return dst.path if dst.freshness > src.freshness else src.path


class ReservationState(str, enum.Enum):
    PENDING = "Pending"
    GRANTED = "Granted"
    DENIED = "Denied"
    RELEASED = "Released"


@dataclass
class Reservation:
    request_id: int
    links: frozenset[LinkId]
    bits: int
    priority: tuple
    owner: ControllerId = 0
    state: ReservationState = ReservationState.PENDING


def resolve_reservations(
    pending: Iterable[Reservation],
    capacity: Mapping[LinkId, int],
) -> dict[int, ReservationState]:
    """Grant the greedy prefix of the priority order on every link.

    Walking reservations by priority, one is granted when it fits on all its
    links and no higher-priority reservation sharing a link was denied.
    """
    remaining = dict(capacity)
    blocked: set[LinkId] = set()
    out: dict[int, ReservationState] = {}
    for res in sorted(pending, key=lambda r: (r.priority, r.request_id)):
        fits = all(remaining.get(l, 0) >= res.bits for l in res.links)
        if fits and not (res.links & blocked):
            for l in res.links:
                remaining[l] -= res.bits
            out[res.request_id] = ReservationState.GRANTED
        else:
            blocked |= res.links
            out[res.request_id] = ReservationState.DENIED
    return out


class ReservationBoard:
    """Reservations every peer knows about through ReserveRequest exchanges."""

    def __init__(self) -> None:
        self.reservations: dict[int, Reservation] = {}

    def submit(self, res: Reservation) -> None:
        self.reservations[res.request_id] = res

    def conflicting(self, rid: int) -> list[Reservation]:
        mine = self.reservations[rid]
        return [
            r for k, r in sorted(self.reservations.items())
            if k != rid
            and r.state in (ReservationState.PENDING, ReservationState.GRANTED)
            and r.links & mine.links
        ]

    def held(self) -> dict[LinkId, int]:
        out: dict[LinkId, int] = {}
        for r in self.reservations.values():
            if r.state is ReservationState.GRANTED:
                for l in r.links:
                    out[l] = out.get(l, 0) + r.bits
        return out

    def resolve(self, available: Mapping[LinkId, int]) -> dict[int, ReservationState]:
        """Settle every pending reservation against ``available`` minus current grants."""
        held = self.held()
        capacity = {l: available[l] - held.get(l, 0) for l in available}
        pending = [r for r in self.reservations.values() if r.state is ReservationState.PENDING]
        outcome = resolve_reservations(pending, capacity)
        for rid, state in outcome.items():
            self.reservations[rid].state = state
        return outcome

    def release(self, rid: int) -> None:
        res = self.reservations.get(rid)
        if res is not None and res.state in (ReservationState.PENDING, ReservationState.GRANTED):
            res.state = ReservationState.RELEASED

    def state(self, rid: int) -> ReservationState:
        return self.reservations[rid].state


def reroute_on_fault(
    topology: Topology,
    view: NetworkView,
    route: Sequence[NodeId],
    failed: Iterable[LinkId],
    bits: int,
    now: float,
) -> list[NodeId] | None:
    """Replacement route avoiding failed links, the same route if unaffected, or None."""
    failed = set(failed)
    if not {link.id for link in topology.path_links(route)} & failed:
        return list(route)
    try:
        return compute_route(topology, view, route[0], route[-1], bits, now, excluded=failed)
    except NoRoute:
        return None


@dataclass
class _Pending:
    awaiting: set[str] = field(default_factory=set)


class DistributedProtocol(BaseProtocol):
    model = "distributed"

    def start(self) -> None:
        for d in self.topology.domains:
            self.add_controller(Controller(d.controller, RoleKind.PEER, domain=d.id))
        for ctrl in self.controllers.values():
            self.initial_view(ctrl, None)
        self.peers = PeerTable.from_topology(self.topology)
        self.board = ReservationBoard()
        self.waiting: dict[int, _Pending] = {}
        self.engine.tick_at(self.engine.scenario.peers.gossip_period_s, "gossip")

    def peer(self, domain: DomainId) -> Controller:
        return self.domain_controller(domain)

    # -- gossip ------------------------------------------------------------------

    def tick_gossip(self) -> None:
        for ctrl in sorted(self.controllers.values(), key=lambda c: c.id):
            if ctrl.up:
                self.gossip_state(ctrl)
        self.engine.tick_at(self.engine.now + self.engine.scenario.peers.gossip_period_s, "gossip")

    def gossip_state(self, ctrl: Controller) -> list[str]:
        """Send this peer's domain snapshot to every reachable peer; returns receivers."""
        sent = []
        for other in sorted(self.controllers.values(), key=lambda c: c.id):
            if other.id != ctrl.id and other.up:
                self.send_sync(ctrl, other)
                sent.append(other.addr)
        return sent

    def observers(self, links: Iterable[LinkId]) -> list[Controller]:
        changed = set(links)
        return [
            c for c in sorted(self.controllers.values(), key=lambda c: c.id)
            if c.up and changed & self.observed_links(c)
        ]

    def on_link_change(self, links: list[LinkId]) -> None:
        for ctrl in self.observers(links):
            self.refresh_direct(ctrl)
            down = [l for l in links if not self.engine.link_up(l)]
            if down:
                self.reroute(ctrl, down)
            self.gossip_state(ctrl)

    def on_keys_consumed(self, links: list[LinkId]) -> None:
        for ctrl in self.observers(links):
            self.gossip_state(ctrl)

    def after_state_sync(self, ctrl: Controller, msg: Message) -> None:
        down = [lid for lid, state in msg.payload if not state.up]
        if down:
            self.reroute(ctrl, down)

    def reroute(self, ctrl: Controller, failed: list[LinkId]) -> None:
        """Restart, once, this peer's unfinished sessions whose route crosses a failed link."""
        for _, session in sorted(self.sessions.items()):
            if (
                not session.active
                or session.src_domain != ctrl.domain
                or session.kind is RequestClass.LOCAL
                or session.delivery is not None
                or not session.route
            ):
                continue
            new = reroute_on_fault(
                self.topology, ctrl.view, session.route, failed, session.bits, self.engine.now
            )
            if new == session.route:
                continue
            if new is None or session.retried:
                self.fail(session, "NoRoute", ctrl)
                continue
            session.retried = True
            self.board.release(session.request_id)
            session.route = []
            session.segments = []
            session.intradomain_paths = {}
            self.coordinate(ctrl, session)

    # -- request flow --------------------------------------------------------------

    def after_availability(self, ctrl: Controller, session: Session, msg: Message, ok: bool) -> None:
        node = int(msg.get("node"))
        if session.kind is RequestClass.LOCAL:
            self.local_flow(ctrl, session, node)
        elif node == session.src:
            self.coordinate(ctrl, session)
        else:
            self.refresh_direct(ctrl)
            prop = propose(self.topology, ctrl.view, session.src, session.dst, session.bits, self.engine.now)
            self.send(make(
                MsgType.INTERDOMAIN_ROUTE, ctrl.addr, self.peer(session.src_domain).addr,
                session.request_id, payload=prop, role="proposal",
                path=list(prop.path or ()), freshness=prop.freshness,
            ))

    def coordinate(self, ctrl: Controller, session: Session) -> None:
        dst_peer = self.peer(session.dst_domain)
        if not dst_peer.up:
            self.fail(session, "PeerUnavailable", ctrl)
            return
        self.send(make(
            MsgType.PEER_COORDINATE, ctrl.addr, dst_peer.addr, session.request_id,
            src=session.src, dst=session.dst, bits=session.bits, issued_at=session.issued_at,
        ))

    def on_peer_coordinate(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if session.active:
            self.query(self.by_addr[msg.receiver], session, session.dst)

    def on_interdomain_route(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if not session.active:
            return
        ctrl = self.by_addr[msg.receiver]
        if msg.get("role") == "proposal":
            self.agree(ctrl, session, msg.payload)
            return
        if not session.segments:
            self.plan_segments(session, list(msg.payload))
        for i, seg in enumerate(session.segments):
            if seg.domain == ctrl.domain and session.active:
                self.set_intradomain(ctrl, session, i)

    def agree(self, ctrl: Controller, session: Session, theirs: Proposal) -> None:
        self.refresh_direct(ctrl)
        mine = propose(self.topology, ctrl.view, session.src, session.dst, session.bits, self.engine.now)
        try:
            route = peer_negotiate(mine, theirs)
        except NegotiationFailed:
            self.fail(session, "NegotiationFailed", ctrl)
            return
        self.plan_segments(session, list(route))
        self.board.submit(Reservation(
            session.request_id, frozenset(session.backbone_links), session.bits,
            (session.issued_at, session.src_domain, session.src, session.dst), ctrl.id,
        ))
        # checked once every event already queued for this instant has run, so
        # simultaneous reservations are always settled together
        self.engine.tick_at(self.engine.now, "reserve", session.request_id)

    def tick_reserve(self, rid: int) -> None:
        session = self.sessions[rid]
        if not session.active:
            return
        ctrl = self.peer(session.src_domain)
        res = self.board.reservations[rid]
        owners = sorted({
            self.controllers[r.owner].addr for r in self.board.conflicting(session.request_id)
            if r.owner != ctrl.id
        })
        if not owners:
            self.settle(ctrl, session)
            return
        self.waiting[session.request_id] = _Pending(set(owners))
        for addr in owners:
            self.send(make(
                MsgType.RESERVE_REQUEST, ctrl.addr, addr, session.request_id,
                links=sorted(res.links), bits=res.bits, priority=list(res.priority),
            ))

    def available_bits(self, links: Iterable[LinkId]) -> dict[LinkId, int]:
        return {l: self.engine.live_view(l).bits_available for l in sorted(links)}

    def resolve(self) -> None:
        links = set()
        for r in self.board.reservations.values():
            links |= r.links
        self.board.resolve(self.available_bits(links))

    def on_reserve_request(self, msg: Message) -> None:
        self.resolve()
        state = self.board.state(msg.request_id)
        kind = MsgType.RESERVE_GRANT if state is ReservationState.GRANTED else MsgType.RESERVE_DENY
        self.send(make(kind, msg.receiver, msg.sender, msg.request_id,
                       links=msg.get("links"), priority=msg.get("priority")))

    def on_reserve_grant(self, msg: Message) -> None:
        self._reserve_reply(msg)

    def on_reserve_deny(self, msg: Message) -> None:
        self._reserve_reply(msg)

    def _reserve_reply(self, msg: Message) -> None:
        pending = self.waiting.get(msg.request_id)
        if pending is None:
            return
        pending.awaiting.discard(msg.sender)
        if not pending.awaiting:
            del self.waiting[msg.request_id]
            self.settle(self.by_addr[msg.receiver], self.sessions[msg.request_id])

    def settle(self, ctrl: Controller, session: Session) -> None:
        """Act on the settled reservation: announce the agreed route or give up."""
        if not session.active:
            return
        self.resolve()
        if self.board.state(session.request_id) is not ReservationState.GRANTED:
            self.fail(session, "ReservationDenied", ctrl)
            return
        notified = set()
        for seg in session.segments:
            other = self.peer(seg.domain)
            if other.id != ctrl.id and other.id not in notified:
                notified.add(other.id)
                self.send(make(
                    MsgType.INTERDOMAIN_ROUTE, ctrl.addr, other.addr, session.request_id,
                    payload=tuple(session.route), role="agreed",
                    path=session.route, backbone=session.backbone_links,
                ))
        for i, seg in enumerate(session.segments):
            if seg.domain == ctrl.domain and session.active:
                self.set_intradomain(ctrl, session, i)

    def establish_key(self, session: Session) -> None:
        super().establish_key(session)
        self.board.release(session.request_id)

    def after_fail(self, session: Session) -> None:
        self.board.release(session.request_id)
        self.waiting.pop(session.request_id, None)

    def after_key_established(self, session: Session) -> None:
        src_peer = self.peer(session.src_domain)
        if session.kind is RequestClass.LOCAL:
            self.send_key_ready(src_peer, session, session.src)
            self.send_key_ready(src_peer, session, session.dst)
            return
        self.send(make(MsgType.CONNECTION_END, src_peer.addr, self.peer(session.dst_domain).addr,
                       session.request_id))

    def on_connection_end(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if not session.active:
            return
        ctrl = self.by_addr[msg.receiver]
        if ctrl.domain == session.dst_domain:
            self.send(make(MsgType.CONNECTION_END, ctrl.addr, msg.sender, session.request_id))
            self.send_key_ready(ctrl, session, session.dst)
        else:
            self.send_key_ready(ctrl, session, session.src)

    def after_key_ready(self, session: Session, msg: Message) -> None:
        if session.kind is RequestClass.LOCAL:
            super().after_key_ready(session, msg)
        elif msg.receiver == f"App:{session.src}" and session.active:
            session.advance(SessionState.CLOSED)
            session.outcome = "Delivered"
