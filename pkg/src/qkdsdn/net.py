"""Multi-domain network graph: nodes, links, domains and the backbone.

Topology generators cover the four basic shapes (ring, star, mesh, bus);
:func:`compose` joins generated domains with interdomain backbone links and
:func:`validate` reports every broken structural rule as data.
"""

from __future__ import annotations

import enum
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

NodeId = int
DomainId = int
LinkId = int
ControllerId = int

FIBER_ALPHA_DB_PER_KM = 0.2
SATELLITE_PERIOD_S = 5400.0
SATELLITE_WINDOW_S = 300.0


class TopologyError(ValueError):
    pass


class InvalidTopologyParam(TopologyError):
    pass


class DisconnectedBackbone(TopologyError):
    pass


class NotInterdomain(TopologyError):
    pass


class NodeKind(str, enum.Enum):
    ENDPOINT = "endpoint"
    RELAY = "relay"
    BORDER = "border"


class Medium(str, enum.Enum):
    FIBER = "fiber"
    FREE_SPACE = "free_space"
    SATELLITE = "satellite"


class TopologyKind(str, enum.Enum):
    RING = "ring"
    STAR = "star"
    MESH = "mesh"
    BUS = "bus"


Window = tuple[float, float]


@dataclass(frozen=True)
class Node:
    id: NodeId
    domain: DomainId
    kind: NodeKind = NodeKind.ENDPOINT
    has_kms: bool = True


@dataclass(frozen=True)
class Link:
    id: LinkId
    endpoints: tuple[NodeId, NodeId]
    medium: Medium = Medium.FIBER
    length_km: float = 0.0
    loss_db: float = 0.0
    availability: tuple[Window, ...] = ()
    has_classical_channel: bool = True
    alpha_db_per_km: float = FIBER_ALPHA_DB_PER_KM
    fixed_db: float = 0.0

    def other(self, node: NodeId) -> NodeId:
        a, b = self.endpoints
        return b if node == a else a

    def available_at(self, t: float) -> bool:
        if not self.availability:
            return True
        return any(start <= t < end for start, end in self.availability)


@dataclass(frozen=True)
class Domain:
    id: DomainId
    nodes: dict[NodeId, Node]
    links: dict[LinkId, Link]
    controller: ControllerId

    def __hash__(self) -> int:
        return hash((self.id, tuple(self.nodes), tuple(self.links)))


@dataclass(frozen=True)
class BackboneLink:
    a: NodeId
    b: NodeId
    medium: Medium = Medium.FIBER
    length_km: float = 0.0
    fixed_db: float = 0.0
    alpha_db_per_km: float = FIBER_ALPHA_DB_PER_KM
    # None selects the medium default (LEO passes for satellites, always up otherwise)
    windows: tuple[Window, ...] | None = None


@dataclass(frozen=True)
class Violation:
    rule: str
    entity: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule}({self.entity})" + (f": {self.detail}" if self.detail else "")


@dataclass
class Topology:
    domains: list[Domain]
    backbone_links: frozenset[LinkId]
    nodes: dict[NodeId, Node]
    links: dict[LinkId, Link]
    satellite_trusted: bool = True
    _adj: dict[NodeId, list[tuple[NodeId, LinkId]]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        adj: dict[NodeId, list[tuple[NodeId, LinkId]]] = defaultdict(list)
        for link in self.links.values():
            a, b = link.endpoints
            adj[a].append((b, link.id))
            adj[b].append((a, link.id))
        self._adj = {n: sorted(adj.get(n, [])) for n in self.nodes}

    def domain(self, domain_id: DomainId) -> Domain:
        for d in self.domains:
            if d.id == domain_id:
                return d
        raise KeyError(domain_id)

    def domain_of(self, node: NodeId) -> DomainId:
        return self.nodes[node].domain

    def neighbors(self, node: NodeId) -> list[tuple[NodeId, LinkId]]:
        """Sorted ``(neighbor, link)`` pairs."""
        return self._adj.get(node, [])

    def link_between(self, u: NodeId, v: NodeId) -> Link:
        for w, lid in self.neighbors(u):
            if w == v:
                return self.links[lid]
        raise KeyError((u, v))

    def path_links(self, path: Sequence[NodeId]) -> list[Link]:
        return [self.link_between(u, v) for u, v in zip(path, path[1:])]

    def incident_backbone(self, domain_id: DomainId) -> set[LinkId]:
        return {
            lid
            for lid in self.backbone_links
            if any(self.nodes[n].domain == domain_id for n in self.links[lid].endpoints)
        }

    def domain_adjacency(self) -> dict[DomainId, set[DomainId]]:
        adj: dict[DomainId, set[DomainId]] = {d.id: set() for d in self.domains}
        for lid in self.backbone_links:
            a, b = (self.nodes[n].domain for n in self.links[lid].endpoints)
            if a != b:
                adj[a].add(b)
                adj[b].add(a)
        return adj


def link_loss(
    medium: Medium | str,
    length_km: float,
    alpha_db_per_km: float = FIBER_ALPHA_DB_PER_KM,
    fixed_db: float = 0.0,
) -> float:
    """Channel loss in dB.

    Fiber attenuation is linear in dB with distance; free-space and
    satellite links carry only their configured fixed budget.
    """
    medium = Medium(medium)
    if medium is Medium.FIBER:
        return alpha_db_per_km * length_km + fixed_db
    return fixed_db


def satellite_windows(
    horizon_s: float,
    period_s: float = SATELLITE_PERIOD_S,
    window_s: float = SATELLITE_WINDOW_S,
    offset_s: float = 0.0,
) -> tuple[Window, ...]:
    """Repeating visibility passes covering ``[0, horizon_s]``."""
    out = []
    start = offset_s
    while start <= horizon_s:
        out.append((start, start + window_s))
        start += period_s
    return tuple(out)


def _make_link(
    lid: LinkId,
    a: NodeId,
    b: NodeId,
    medium: Medium,
    length_km: float,
    alpha: float,
    fixed_db: float,
    windows: tuple[Window, ...] = (),
) -> Link:
    return Link(
        id=lid,
        endpoints=(min(a, b), max(a, b)),
        medium=medium,
        length_km=length_km,
        loss_db=link_loss(medium, length_km, alpha, fixed_db),
        availability=windows,
        alpha_db_per_km=alpha,
        fixed_db=fixed_db,
    )


def build_topology(
    kind: TopologyKind | str,
    n: int,
    domain: DomainId,
    *,
    first_node: NodeId = 0,
    first_link: LinkId = 0,
    length_km: float = 10.0,
    alpha_db_per_km: float = FIBER_ALPHA_DB_PER_KM,
    controller: ControllerId | None = None,
    hub_has_kms: bool = False,
) -> Domain:
    """Generate one domain of the given shape.

    Node and link ids are allocated consecutively from ``first_node`` and
    ``first_link`` so several generated domains can share one id space.
    A star gets ``n`` leaves around an extra passive hub node.
    """
    kind = TopologyKind(kind)
    minimum = 3 if kind is TopologyKind.RING else 2
    if n < minimum:
        raise InvalidTopologyParam(f"{kind.value} needs n >= {minimum}, got {n}")

    nodes: dict[NodeId, Node] = {}
    pairs: list[tuple[NodeId, NodeId]] = []
    ids = list(range(first_node, first_node + n))
    if kind is TopologyKind.STAR:
        hub = first_node
        ids = list(range(first_node + 1, first_node + n + 1))
        nodes[hub] = Node(hub, domain, NodeKind.RELAY, has_kms=hub_has_kms)
        pairs = [(hub, leaf) for leaf in ids]
    elif kind is TopologyKind.RING:
        pairs = [(ids[i], ids[(i + 1) % n]) for i in range(n)]
    elif kind is TopologyKind.MESH:
        pairs = [(ids[i], ids[j]) for i in range(n) for j in range(i + 1, n)]
    else:
        pairs = [(ids[i], ids[i + 1]) for i in range(n - 1)]
    for nid in ids:
        nodes[nid] = Node(nid, domain, NodeKind.ENDPOINT)

    links = {}
    for k, (a, b) in enumerate(pairs):
        lid = first_link + k
        links[lid] = _make_link(lid, a, b, Medium.FIBER, length_km, alpha_db_per_km, 0.0)
    return Domain(
        id=domain,
        nodes=dict(sorted(nodes.items())),
        links=links,
        controller=domain if controller is None else controller,
    )


def _domain_graph_connected(adj: dict[DomainId, set[DomainId]]) -> bool:
    if not adj:
        return True
    start = next(iter(adj))
    seen = {start}
    queue = deque([start])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(adj)


def compose(
    domains: Sequence[Domain],
    backbone_spec: Iterable[BackboneLink | tuple],
    *,
    first_link: LinkId | None = None,
    horizon_s: float = 86400.0,
    satellite_trusted: bool = True,
) -> Topology:
    """Join domains with interdomain backbone links.

    Backbone endpoints are relabelled as border nodes. Satellite links
    without explicit windows get LEO passes up to ``horizon_s``.
    """
    owner: dict[NodeId, DomainId] = {}
    nodes: dict[NodeId, Node] = {}
    links: dict[LinkId, Link] = {}
    for d in domains:
        for nid, node in d.nodes.items():
            owner[nid] = d.id
            nodes[nid] = node
        links.update(d.links)

    next_link = first_link if first_link is not None else (max(links, default=-1) + 1)
    backbone: set[LinkId] = set()
    specs = [s if isinstance(s, BackboneLink) else BackboneLink(*s) for s in backbone_spec]
    for k, spec in enumerate(specs):
        for end in (spec.a, spec.b):
            if end not in owner:
                raise InvalidTopologyParam(f"backbone endpoint {end} does not exist")
        if owner[spec.a] == owner[spec.b]:
            raise NotInterdomain(
                f"backbone link {spec.a}-{spec.b} lies inside domain {owner[spec.a]}"
            )
        medium = Medium(spec.medium)
        windows = spec.windows
        if windows is None:
            windows = satellite_windows(horizon_s) if medium is Medium.SATELLITE else ()
        lid = next_link + k
        links[lid] = _make_link(
            lid, spec.a, spec.b, medium, spec.length_km, spec.alpha_db_per_km,
            spec.fixed_db, tuple(tuple(w) for w in windows),
        )
        backbone.add(lid)
        for end in (spec.a, spec.b):
            nodes[end] = replace(nodes[end], kind=NodeKind.BORDER)

    new_domains = [
        replace(d, nodes={nid: nodes[nid] for nid in d.nodes}) for d in domains
    ]
    topo = Topology(
        domains=new_domains,
        backbone_links=frozenset(backbone),
        nodes=dict(sorted(nodes.items())),
        links=dict(sorted(links.items())),
        satellite_trusted=satellite_trusted,
    )
    if not _domain_graph_connected(topo.domain_adjacency()):
        raise DisconnectedBackbone("domain-level backbone graph is not connected")
    return topo


def _windows_ok(windows: Sequence[Window]) -> bool:
    for start, end in windows:
        if end <= start:
            return False
    return all(prev[1] <= cur[0] for prev, cur in zip(windows, windows[1:]))


def validate(topology: Topology) -> list[Violation]:
    """Return every broken structural rule; empty means the topology is sound."""
    out: list[Violation] = []
    topo = topology

    seen_nodes: dict[NodeId, DomainId] = {}
    for d in topo.domains:
        for nid in d.nodes:
            if nid in seen_nodes:
                out.append(Violation("NodeInTwoDomains", f"node {nid}"))
            seen_nodes[nid] = d.id
            if nid not in topo.nodes or topo.nodes[nid].domain != d.id:
                out.append(Violation("DomainMismatch", f"node {nid}"))

    for link in topo.links.values():
        name = f"link {link.id}"
        if any(n not in topo.nodes for n in link.endpoints):
            out.append(Violation("UnknownEndpoint", name))
            continue
        expected = link_loss(link.medium, link.length_km, link.alpha_db_per_km, link.fixed_db)
        if link.loss_db < 0 or abs(link.loss_db - expected) > 1e-9:
            out.append(Violation("LossMismatch", name, f"{link.loss_db} != {expected}"))
        if link.length_km < 0:
            out.append(Violation("NegativeLength", name))
        if not _windows_ok(link.availability):
            out.append(Violation("WindowOverlap", name))
        if not link.has_classical_channel:
            out.append(Violation("MissingClassicalChannel", name))

    for lid in sorted(topo.backbone_links):
        link = topo.links[lid]
        a, b = link.endpoints
        if a not in topo.nodes or b not in topo.nodes:
            continue
        if topo.nodes[a].domain == topo.nodes[b].domain:
            out.append(Violation("NotInterdomain", f"link {lid}"))
        for end in (a, b):
            if topo.nodes[end].kind is not NodeKind.BORDER:
                out.append(Violation("BorderMissing", f"node {end}"))

    for d in topo.domains:
        for lid, link in d.links.items():
            if lid in topo.backbone_links:
                out.append(Violation("BackboneInDomain", f"link {lid}"))
            if any(n not in d.nodes for n in link.endpoints):
                out.append(Violation("ForeignEndpoint", f"link {lid}", f"domain {d.id}"))
        if not _intradomain_connected(d):
            out.append(Violation("DomainDisconnected", f"domain {d.id}"))

    if not _domain_graph_connected(topo.domain_adjacency()):
        out.append(Violation("DisconnectedBackbone", "backbone"))
    return out


def _intradomain_connected(d: Domain) -> bool:
    if not d.nodes:
        return True
    adj: dict[NodeId, set[NodeId]] = {n: set() for n in d.nodes}
    for link in d.links.values():
        a, b = link.endpoints
        if a in adj and b in adj:
            adj[a].add(b)
            adj[b].add(a)
    start = next(iter(adj))
    seen = {start}
    queue = deque([start])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(adj)


def four_domain_layout(
    *,
    sat_windows: tuple[Window, ...] | None = (),
    satellite_fixed_db: float = 25.0,
    backbone_km: float = 45.0,
) -> Topology:
    """Four domains (two rings, a point-to-point pair, a star) on a bus backbone.

    Domains 1..4 are ring(4), pair, ring(5), star(4) in bus order; the
    2-3 and 3-4 backbone hops go via satellite.
    """
    d1 = build_topology("ring", 4, 1, first_node=0, first_link=0)
    d2 = build_topology("bus", 2, 2, first_node=10, first_link=10)
    d3 = build_topology("ring", 5, 3, first_node=20, first_link=20)
    d4 = build_topology("star", 4, 4, first_node=30, first_link=30)
    backbone = [
        BackboneLink(2, 10, Medium.FIBER, backbone_km),
        BackboneLink(11, 20, Medium.SATELLITE, 0.0, satellite_fixed_db, windows=sat_windows),
        BackboneLink(22, 31, Medium.SATELLITE, 0.0, satellite_fixed_db, windows=sat_windows),
    ]
    return compose([d1, d2, d3, d4], backbone, first_link=100)
