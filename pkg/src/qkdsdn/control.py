"""SDN controller state shared by both integration models.

Holds the message vocabulary, controller network views and the routing
and availability primitives that hierarchical and peer controllers use.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .net import ControllerId, DomainId, LinkId, NodeId, Topology


class ControlError(Exception):
    pass


class UnknownNode(ControlError):
    pass


class NoRoute(ControlError):
    def __init__(self, src: NodeId, dst: NodeId, segment: str = ""):
        super().__init__(f"no feasible path {src}->{dst}" + (f" ({segment})" if segment else ""))
        self.src = src
        self.dst = dst
        self.segment = segment


class Plane(str, enum.Enum):
    AP = "AP"
    CP = "CP"
    DP = "DP"


class MsgType(str, enum.Enum):
    KEY_SERVICE_REQUEST = "KeyServiceRequest"
    AVAILABILITY_QUERY = "AvailabilityQuery"
    AVAILABILITY_REPLY = "AvailabilityReply"
    ESCALATE = "Escalate"
    PEER_COORDINATE = "PeerCoordinate"
    INTERDOMAIN_ROUTE = "InterdomainRoute"
    INTRADOMAIN_ROUTE_SET = "IntradomainRouteSet"
    KEY_ESTABLISH = "KeyEstablish"
    KEY_READY = "KeyReady"
    CONNECTION_END = "ConnectionEnd"
    STATE_SYNC = "StateSync"
    RESERVE_REQUEST = "ReserveRequest"
    RESERVE_GRANT = "ReserveGrant"
    RESERVE_DENY = "ReserveDeny"
    ERROR = "Error"


class RoleKind(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    PEER = "Peer"


class RequestClass(str, enum.Enum):
    LOCAL = "Local"
    INTERDOMAIN = "Interdomain"


def app_addr(node: NodeId) -> str:
    return f"App:{node}"


def qn_addr(node: NodeId) -> str:
    return f"QN:{node}"


@dataclass(frozen=True)
class Message:
    """One control/data/application message.

    ``fields`` keeps insertion order; it is rendered into the trace detail.
    """

    type: MsgType
    sender: str
    receiver: str
    request_id: int | None = None
    plane: Plane = Plane.CP
    fields: tuple[tuple[str, object], ...] = ()
    # bulk data (view snapshots) kept out of the trace detail
    payload: object = field(default=None, compare=False, repr=False)

    def get(self, key: str, default: object = None) -> object:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def detail(self) -> str:
        return ";".join(f"{k}={_render(v)}" for k, v in self.fields)


def _render(value: object) -> str:
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_render(v) for v in value) + "]"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, enum.Enum):
        return str(value.value)
    return str(value)


def make(
    type: MsgType,
    sender: str,
    receiver: str,
    request_id: int | None = None,
    plane: Plane = Plane.CP,
    payload: object = None,
    **fields: object,
) -> Message:
    return Message(type, sender, receiver, request_id, plane, tuple(fields.items()), payload)


@dataclass(frozen=True)
class LinkView:
    up: bool
    bits_available: int
    last_updated: float


@dataclass
class NetworkView:
    """What one controller believes about link state.

    ``scope`` limits which links the view may ever hold; ``None`` means the
    whole topology.
    """

    known_domains: set[DomainId]
    scope: frozenset[LinkId] | None = None
    link_states: dict[LinkId, LinkView] = field(default_factory=dict)

    def in_scope(self, lid: LinkId) -> bool:
        return self.scope is None or lid in self.scope

    def apply(self, updates: Iterable[tuple[LinkId, LinkView]]) -> "NetworkView":
        return apply_state_update(self, updates)

    def snapshot(self, links: Iterable[LinkId] | None = None) -> tuple[tuple[LinkId, LinkView], ...]:
        ids = sorted(self.link_states) if links is None else sorted(
            lid for lid in links if lid in self.link_states
        )
        return tuple((lid, self.link_states[lid]) for lid in ids)

    def freshness(self, path_links: Iterable[LinkId]) -> float:
        """Most recent update time over the given links (-inf if none known)."""
        times = [self.link_states[l].last_updated for l in path_links if l in self.link_states]
        return max(times, default=float("-inf"))


def apply_state_update(
    view: NetworkView, updates: Iterable[tuple[LinkId, LinkView]]
) -> NetworkView:
    """Merge link states, last writer wins; stale and out-of-scope entries are dropped."""
    for lid, state in updates:
        if not view.in_scope(lid):
            continue
        current = view.link_states.get(lid)
        if current is not None and state.last_updated < current.last_updated:
            continue
        view.link_states[lid] = state
    return view


@dataclass
class Controller:
    id: ControllerId
    role: RoleKind
    parent: ControllerId | None = None
    domain: DomainId | None = None
    children: list[ControllerId] = field(default_factory=list)
    view: NetworkView = field(default_factory=lambda: NetworkView(set()))
    up: bool = True
    standby_id: ControllerId | None = None
    on_standby: bool = False

    @property
    def addr(self) -> str:
        return f"{self.role.value}:{self.id}"


@dataclass(frozen=True)
class SdnAgent:
    node: NodeId
    controller: ControllerId


@dataclass(frozen=True)
class AvailabilityReply:
    node: NodeId
    ok: bool
    bits_available: int


def classify_request(topology: Topology, domain: DomainId, src: NodeId, dst: NodeId) -> RequestClass:
    for end in (src, dst):
        if end not in topology.nodes:
            raise UnknownNode(f"node {end} is not in the topology")
    if topology.domain_of(src) == domain and topology.domain_of(dst) == domain:
        return RequestClass.LOCAL
    return RequestClass.INTERDOMAIN


def link_feasible(
    topology: Topology,
    view: NetworkView,
    lid: LinkId,
    bits: int,
    now: float,
    excluded: frozenset[LinkId] = frozenset(),
) -> bool:
    if lid in excluded or not view.in_scope(lid):
        return False
    state = view.link_states.get(lid)
    if state is None or not state.up or state.bits_available < bits:
        return False
    return topology.links[lid].available_at(now)


def compute_route(
    topology: Topology,
    view: NetworkView,
    src: NodeId,
    dst: NodeId,
    bits: int,
    now: float,
    *,
    nodes: Iterable[NodeId] | None = None,
    excluded: Iterable[LinkId] = (),
) -> list[NodeId]:
    """Minimum-hop feasible path; ties go to the lexicographically smallest node sequence.

    Hop distances to ``dst`` come from a BFS over feasible links; walking
    from ``src`` through the smallest neighbour that is one hop closer then
    yields the smallest sequence among all shortest paths.
    """
    if src == dst:
        raise ValueError("src and dst must differ")
    allowed = None if nodes is None else set(nodes)
    excl = frozenset(excluded)
    for end in (src, dst):
        if end not in topology.nodes or (allowed is not None and end not in allowed):
            raise NoRoute(src, dst, f"node {end} outside view")

    def edges(u: NodeId):
        for v, lid in topology.neighbors(u):
            if allowed is not None and v not in allowed:
                continue
            if link_feasible(topology, view, lid, bits, now, excl):
                yield v

    dist = {dst: 0}
    queue = deque([dst])
    while queue:
        u = queue.popleft()
        for v in edges(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    if src not in dist:
        raise NoRoute(src, dst)
    path = [src]
    while path[-1] != dst:
        here = path[-1]
        path.append(min(v for v in edges(here) if dist.get(v) == dist[here] - 1))
    return path


def availability_check(
    nodes: Sequence[NodeId],
    kms_bits: Mapping[NodeId, int],
    faulted: Iterable[NodeId] = (),
) -> list[AvailabilityReply]:
    """One reply per queried node; faulted or KMS-less nodes answer ``ok=False``."""
    down = set(faulted)
    out = []
    for n in nodes:
        if n in down or n not in kms_bits:
            out.append(AvailabilityReply(n, False, 0))
        else:
            out.append(AvailabilityReply(n, True, kms_bits[n]))
    return out


def segments_by_domain(topology: Topology, path: Sequence[NodeId]) -> list[tuple[DomainId, list[NodeId]]]:
    """Split a node path into consecutive per-domain runs."""
    out: list[tuple[DomainId, list[NodeId]]] = []
    for n in path:
        d = topology.domain_of(n)
        if out and out[-1][0] == d:
            out[-1][1].append(n)
        else:
            out.append((d, [n]))
    return out
