"""Hierarchical integration: L1 domain controllers under L2 regional and an L3 root.

Interdomain requests escalate to the lowest common ancestor of the two L1
controllers, which picks the interdomain route; every L1 on the route then
sets its own intradomain segment. Messages only travel along tree edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .control import (
    Controller,
    Message,
    MsgType,
    NetworkView,
    NoRoute,
    RequestClass,
    RoleKind,
    classify_request,
    compute_route,
    make,
)
from .net import ControllerId, LinkId
from .protocol import BaseProtocol, InvalidState, Session, SessionState

InterdomainSession = Session


class CoordinatorUnavailable(Exception):
    pass


@dataclass(frozen=True)
class Hierarchy:
    root: ControllerId
    parent: dict[ControllerId, ControllerId]
    standby: dict[ControllerId, ControllerId | None] = field(default_factory=dict)

    def ancestors(self, cid: ControllerId) -> list[ControllerId]:
        """``cid`` followed by its parents up to the root."""
        chain = [cid]
        while chain[-1] in self.parent:
            chain.append(self.parent[chain[-1]])
        return chain

    def depth(self, cid: ControllerId) -> int:
        return len(self.ancestors(cid)) - 1

    def lca(self, a: ControllerId, b: ControllerId) -> ControllerId:
        up_a = set(self.ancestors(a))
        for c in self.ancestors(b):
            if c in up_a:
                return c
        raise ValueError(f"{a} and {b} share no ancestor")

    def tree_path(self, a: ControllerId, b: ControllerId) -> list[ControllerId]:
        top = self.lca(a, b)
        up = self.ancestors(a)
        up = up[: up.index(top) + 1]
        down = self.ancestors(b)
        down = down[: down.index(top)]
        return up + list(reversed(down))

    def next_hop(self, at: ControllerId, dest: ControllerId) -> ControllerId:
        return self.tree_path(at, dest)[1]


def escalate(
    hierarchy: Hierarchy,
    l1_src: ControllerId,
    l1_dst: ControllerId,
    unavailable: set[ControllerId] = frozenset(),
) -> ControllerId:
    """Coordinator for an interdomain request: the LCA of the two L1 controllers."""
    if l1_src == l1_dst:
        raise ValueError("local requests are never escalated")
    for cid in hierarchy.tree_path(l1_src, l1_dst):
        if cid in unavailable:
            raise CoordinatorUnavailable(f"controller {cid} is down")
    return hierarchy.lca(l1_src, l1_dst)


def interdomain_message_count(depth_src: int, depth_dst: int, transit: list[int] = ()) -> int:
    """Control/app/data messages for one interdomain request with no failures.

    ``depth_*`` count tree hops from each L1 to the coordinator; ``transit``
    lists the hop distance from the coordinator to each transit L1.
    """
    a, b = depth_src, depth_dst
    count = 1  # KeyServiceRequest
    count += 2  # source availability query/reply
    count += a + b  # Escalate up and back down
    count += 2  # destination availability query/reply
    count += b  # destination confirmation up to the coordinator
    count += a + b + sum(transit)  # InterdomainRoute to every involved L1
    count += 2 + len(transit)  # IntradomainRouteSet per segment
    count += 1  # KeyEstablish
    count += 2  # KeyReady
    count += a + b  # ConnectionEnd
    return count


class HierarchicalProtocol(BaseProtocol):
    model = "hierarchical"

    def start(self) -> None:
        cfg = self.engine.scenario.hierarchy
        topo = self.topology
        l1_ids = {d.controller: d.id for d in topo.domains}
        ids = set(cfg.parent) | set(cfg.parent.values()) | {cfg.root}
        for cid in sorted(ids):
            if cid in l1_ids:
                role = RoleKind.L1
            elif cid == cfg.root:
                role = RoleKind.L3
            else:
                role = RoleKind.L2
            self.add_controller(Controller(
                cid, role, parent=cfg.parent.get(cid), domain=l1_ids.get(cid),
                standby_id=cid if cid in cfg.standby else None,
            ))
        for cid, par in sorted(cfg.parent.items()):
            self.controllers[par].children.append(cid)
        self.hierarchy = Hierarchy(
            cfg.root, dict(cfg.parent), {c: (c if c in cfg.standby else None) for c in ids}
        )
        self.known_down: set[ControllerId] = set()
        self.failovers: list[tuple[float, ControllerId]] = []
        self.generation: dict[ControllerId, int] = {c: 0 for c in ids}
        for ctrl in self.controllers.values():
            self.initial_view(ctrl, self.scope(ctrl.id))
        self.engine.tick_at(cfg.sync_period_s, "sync")

    def scope(self, cid: ControllerId) -> set[LinkId] | None:
        ctrl = self.controllers[cid]
        if ctrl.role is RoleKind.L3:
            return None
        if ctrl.role is RoleKind.L1:
            return self.observed_links(ctrl)
        out: set[LinkId] = set()
        for child in ctrl.children:
            out |= self.scope(child) or set()
        return out

    def subtree_nodes(self, cid: ControllerId) -> set[int] | None:
        ctrl = self.controllers[cid]
        if ctrl.role is RoleKind.L3:
            return None
        if ctrl.role is RoleKind.L1:
            return set(self.topology.domain(ctrl.domain).nodes)
        out: set[int] = set()
        for child in ctrl.children:
            out |= self.subtree_nodes(child)
        return out

    # -- periodic sync ---------------------------------------------------------

    def tick_sync(self) -> None:
        order = sorted(self.controllers.values(), key=lambda c: (-self.hierarchy.depth(c.id), c.id))
        for ctrl in order:
            if ctrl.up and ctrl.parent is not None:
                self.send_sync(ctrl, self.controllers[ctrl.parent])
        period = self.engine.scenario.hierarchy.sync_period_s
        self.engine.tick_at(self.engine.now + period, "sync")

    def event_sync(self, links: list[LinkId]) -> None:
        changed = set(links)
        for ctrl in sorted(self.controllers.values(), key=lambda c: c.id):
            if ctrl.role is RoleKind.L1 and ctrl.up and changed & self.observed_links(ctrl):
                self.send_sync(ctrl, self.controllers[ctrl.parent], event=1)

    def on_link_change(self, links: list[LinkId]) -> None:
        self.event_sync(links)

    def on_keys_consumed(self, links: list[LinkId]) -> None:
        self.event_sync(links)

    def after_state_sync(self, ctrl: Controller, msg: Message) -> None:
        if msg.get("event") == 1 and ctrl.parent is not None:
            self.send_sync(ctrl, self.controllers[ctrl.parent], event=1)

    # -- tree forwarding ---------------------------------------------------------

    def forward(self, ctrl: Controller, session: Session, type: MsgType, dest: ControllerId, **fields) -> None:
        nxt = self.controllers[self.hierarchy.next_hop(ctrl.id, dest)]
        self.send(make(type, ctrl.addr, nxt.addr, session.request_id, dest=dest, **fields))

    def relay_on(self, msg: Message) -> bool:
        """Pass a tree-routed message one hop further; True if it was not for us."""
        ctrl = self.by_addr[msg.receiver]
        dest = int(msg.get("dest"))
        if dest == ctrl.id:
            return False
        nxt = self.controllers[self.hierarchy.next_hop(ctrl.id, dest)]
        self.send(Message(msg.type, ctrl.addr, nxt.addr, msg.request_id, msg.plane, msg.fields, msg.payload))
        return True

    def l1(self, domain: int) -> Controller:
        return self.domain_controller(domain)

    # -- request flow --------------------------------------------------------------

    def after_availability(self, ctrl: Controller, session: Session, msg: Message, ok: bool) -> None:
        from_qn = msg.sender.startswith("QN:")
        if from_qn and session.kind is RequestClass.LOCAL:
            self.local_flow(ctrl, session, int(msg.get("node")))
        elif from_qn and ctrl.domain == session.src_domain:
            self.start_escalation(ctrl, session)
        elif from_qn:
            self.forward(ctrl, session, MsgType.AVAILABILITY_REPLY, session.coordinator,
                         node=msg.get("node"), ok=ok, bits_available=msg.get("bits_available"))
        elif not self.relay_on(msg):
            self.coordinate(ctrl, session, ok)

    def start_escalation(self, ctrl: Controller, session: Session) -> None:
        try:
            coord = escalate(
                self.hierarchy, ctrl.id, self.l1(session.dst_domain).id, self.known_down
            )
        except CoordinatorUnavailable:
            self.fail(session, "CoordinatorUnavailable", ctrl)
            return
        session.coordinator = coord
        self.forward(ctrl, session, MsgType.ESCALATE, coord,
                     src=session.src, dst=session.dst, bits=session.bits)

    def on_escalate(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if not session.active or self.relay_on(msg):
            return
        ctrl = self.by_addr[msg.receiver]
        if ctrl.id == session.coordinator and ctrl.domain is None:
            self.forward(ctrl, session, MsgType.ESCALATE, self.l1(session.dst_domain).id,
                         src=session.src, dst=session.dst, bits=session.bits)
        else:
            self.query(ctrl, session, session.dst)

    def coordinate(self, coord: Controller, session: Session, ok: bool) -> None:
        """Coordinator picks the interdomain route once both ends confirmed availability."""
        if not session.active:
            return
        if not ok:
            self.fail(session, "Unavailable", coord)
            return
        try:
            route = compute_route(
                self.topology, coord.view, session.src, session.dst, session.bits,
                self.engine.now, nodes=self.subtree_nodes(coord.id),
            )
        except NoRoute:
            self.fail(session, "NoRoute", coord)
            return
        self.plan_segments(session, route)
        for i, seg in enumerate(session.segments):
            self.forward(coord, session, MsgType.INTERDOMAIN_ROUTE, self.l1(seg.domain).id,
                         seg=i, entry=seg.entry, exit=seg.exit, backbone=session.backbone_links)

    def on_interdomain_route(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if not session.active or self.relay_on(msg):
            return
        self.set_intradomain(self.by_addr[msg.receiver], session, int(msg.get("seg")))

    def after_key_established(self, session: Session) -> None:
        self.send_key_ready(self.l1(session.src_domain), session, session.src)
        self.send_key_ready(self.l1(session.dst_domain), session, session.dst)

    def after_key_ready(self, session: Session, msg: Message) -> None:
        if session.kind is RequestClass.LOCAL:
            super().after_key_ready(session, msg)
        elif msg.receiver == f"App:{session.src}" and session.active:
            self.teardown(session)

    def teardown(self, session: Session) -> None:
        """Source L1 reports the end of the connection; it travels via the coordinator."""
        if session.state is not SessionState.DELIVERING or session.teardown_started:
            raise InvalidState(f"session {session.request_id} cannot be torn down")
        session.teardown_started = True
        self.forward(self.l1(session.src_domain), session, MsgType.CONNECTION_END, session.coordinator)

    def on_connection_end(self, msg: Message) -> None:
        session = self.sessions[msg.request_id]
        if not session.active or self.relay_on(msg):
            return
        ctrl = self.by_addr[msg.receiver]
        if ctrl.id == session.coordinator:
            self.forward(ctrl, session, MsgType.CONNECTION_END, self.l1(session.dst_domain).id)
        else:
            session.advance(SessionState.CLOSED)
            session.outcome = "Delivered"

    # -- faults and failover -------------------------------------------------------

    def on_controller_down(self, cid: ControllerId) -> None:
        super().on_controller_down(cid)
        cfg = self.engine.scenario.hierarchy
        self.generation[cid] += 1
        name = "failover" if self.hierarchy.standby.get(cid) is not None else "detect"
        self.engine.tick_at(self.engine.now + cfg.heartbeat_s * cfg.heartbeat_misses, name,
                            cid, self.generation[cid])

    def on_controller_up(self, cid: ControllerId) -> None:
        super().on_controller_up(cid)
        self.generation[cid] += 1
        self.known_down.discard(cid)
        self.controllers[cid].on_standby = False
        self.redrive(cid)

    def tick_failover(self, cid: ControllerId, generation: int) -> None:
        ctrl = self.controllers[cid]
        if generation != self.generation[cid] or ctrl.up:
            return
        self.failover(cid)

    def failover(self, cid: ControllerId) -> ControllerId:
        """Activate the standby under the same identity, rebuilding the view from recent syncs."""
        ctrl = self.controllers[cid]
        if ctrl.up:
            return cid
        if self.hierarchy.standby.get(cid) is None:
            raise CoordinatorUnavailable(f"controller {cid} has no standby")
        ctrl.up = True
        ctrl.on_standby = True
        self.failovers.append((self.engine.now, cid))
        self.initial_view_from_syncs(ctrl)
        self.redrive(cid)
        return cid

    def initial_view_from_syncs(self, ctrl: Controller) -> None:
        ctrl.view = NetworkView(ctrl.view.known_domains, ctrl.view.scope)
        for sender in sorted(self.last_sync[ctrl.id]):
            ctrl.view.apply(self.last_sync[ctrl.id][sender])
        if ctrl.domain is not None:
            self.refresh_direct(ctrl)

    def tick_detect(self, cid: ControllerId, generation: int) -> None:
        if generation != self.generation[cid] or self.controllers[cid].up:
            return
        self.known_down.add(cid)
        for session in self.stalled(cid):
            self.fail(session, "CoordinatorUnavailable", self.l1(session.src_domain))

    def on_drop(self, msg: Message) -> None:
        super().on_drop(msg)
        ctrl = self.by_addr.get(msg.receiver)
        session = self.sessions.get(msg.request_id) if msg.request_id is not None else None
        if ctrl is not None and session is not None and session.active and ctrl.id in self.known_down:
            self.fail(session, "CoordinatorUnavailable", self.l1(session.src_domain))

    def stalled(self, cid: ControllerId) -> list[Session]:
        return [s for _, s in sorted(self.sessions.items()) if s.active and s.stalled_at == cid]

    def redrive(self, cid: ControllerId) -> None:
        """Retry, once, each session whose progress was lost at ``cid``."""
        for session in self.stalled(cid):
            session.stalled_at = None
            src_l1 = self.l1(session.src_domain)
            if session.retried:
                self.fail(session, "CoordinatorUnavailable", src_l1)
                continue
            session.retried = True
            if session.teardown_started:
                self.forward(src_l1, session, MsgType.CONNECTION_END, session.coordinator)
            else:
                session.kind = classify_request(self.topology, src_l1.domain, session.src, session.dst)
                self.query(src_l1, session, session.src)
