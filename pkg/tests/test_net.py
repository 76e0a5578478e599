from __future__ import annotations

from dataclasses import replace

import pytest

from qkdsdn.net import (
    BackboneLink,
    DisconnectedBackbone,
    InvalidTopologyParam,
    Medium,
    NodeKind,
    NotInterdomain,
    build_topology,
    compose,
    four_domain_layout,
    link_loss,
    satellite_windows,
    validate,
)


@pytest.mark.parametrize("kind,n,nodes,links", [
    ("ring", 4, 4, 4),
    ("ring", 3, 3, 3),
    ("bus", 2, 2, 1),
    ("bus", 5, 5, 4),
    ("star", 4, 5, 4),
    ("mesh", 4, 4, 6),
])
def test_generated_shapes(kind, n, nodes, links):
    d = build_topology(kind, n, 1)
    assert len(d.nodes) == nodes
    assert len(d.links) == links
    degree = {nid: 0 for nid in d.nodes}
    for link in d.links.values():
        for end in link.endpoints:
            degree[end] += 1
    if kind == "ring":
        assert set(degree.values()) == {2}
    if kind == "star":
        assert sorted(degree.values()) == [1] * n + [n]


def test_star_hub_is_passive_relay():
    d = build_topology("star", 3, 4, first_node=30)
    hub = d.nodes[30]
    assert hub.kind is NodeKind.RELAY and not hub.has_kms
    assert all(d.nodes[i].has_kms for i in (31, 32, 33))


@pytest.mark.parametrize("kind,n", [("ring", 2), ("bus", 1), ("star", 1), ("ring", 0)])
def test_too_small_domains_rejected(kind, n):
    with pytest.raises(InvalidTopologyParam):
        build_topology(kind, n, 1)


def test_link_loss_by_medium():
    assert link_loss(Medium.FIBER, 45) == pytest.approx(9.0)
    assert link_loss("fiber", 10, 0.25, 1.0) == pytest.approx(3.5)
    # free-space and satellite links use only their fixed budget
    assert link_loss(Medium.SATELLITE, 500, fixed_db=25) == 25
    assert link_loss(Medium.FREE_SPACE, 3, fixed_db=12) == 12


def test_satellite_windows_repeat():
    w = satellite_windows(12000)
    assert w[:3] == ((0.0, 300.0), (5400.0, 5700.0), (10800.0, 11100.0))
    assert all(end - start == 300 for start, end in w)


def test_four_domain_layout_is_valid():
    topo = four_domain_layout()
    assert validate(topo) == []
    assert len(topo.domains) == 4
    assert len(topo.backbone_links) == 3
    assert topo.domain_adjacency() == {1: {2}, 2: {1, 3}, 3: {2, 4}, 4: {3}}
    for lid in topo.backbone_links:
        for end in topo.links[lid].endpoints:
            assert topo.nodes[end].kind is NodeKind.BORDER
    sat = [topo.links[l] for l in topo.backbone_links if topo.links[l].medium is Medium.SATELLITE]
    assert len(sat) == 2 and all(l.loss_db == 25 for l in sat)


def test_backbone_inside_domain_rejected():
    a = build_topology("ring", 3, 1)
    b = build_topology("bus", 2, 2, first_node=10, first_link=10)
    with pytest.raises(NotInterdomain):
        compose([a, b], [BackboneLink(0, 1)])


def test_disconnected_backbone_rejected():
    a = build_topology("ring", 3, 1)
    b = build_topology("bus", 2, 2, first_node=10, first_link=10)
    c = build_topology("bus", 2, 3, first_node=20, first_link=20)
    with pytest.raises(DisconnectedBackbone):
        compose([a, b, c], [BackboneLink(0, 10)])


def test_unknown_backbone_endpoint_rejected():
    a = build_topology("ring", 3, 1)
    b = build_topology("bus", 2, 2, first_node=10, first_link=10)
    with pytest.raises(InvalidTopologyParam):
        compose([a, b], [BackboneLink(0, 99)])


def test_satellite_gets_default_passes():
    a = build_topology("bus", 2, 1)
    b = build_topology("bus", 2, 2, first_node=10, first_link=10)
    topo = compose([a, b], [BackboneLink(1, 10, Medium.SATELLITE, 0, 25)], horizon_s=6000)
    link = topo.links[next(iter(topo.backbone_links))]
    assert link.availability == ((0.0, 300.0), (5400.0, 5700.0))
    assert link.available_at(0) and link.available_at(299.9)
    assert not link.available_at(300) and not link.available_at(1000)


def _rules(topo):
    return {v.rule for v in validate(topo)}


def test_validate_reports_broken_rules():
    topo = four_domain_layout()
    lid = next(iter(topo.domains[0].links))
    bad = replace(topo.links[lid], loss_db=99.0, has_classical_channel=False)
    topo.links[lid] = bad
    assert {"LossMismatch", "MissingClassicalChannel"} <= _rules(topo)


def test_validate_negative_length_and_windows():
    topo = four_domain_layout()
    lid = sorted(topo.backbone_links)[1]
    topo.links[lid] = replace(topo.links[lid], availability=((10.0, 20.0), (15.0, 30.0)))
    lid0 = next(iter(topo.domains[0].links))
    link = topo.links[lid0]
    topo.links[lid0] = replace(link, length_km=-1.0, loss_db=link_loss(link.medium, -1.0))
    rules = _rules(topo)
    assert "WindowOverlap" in rules and "NegativeLength" in rules


def test_validate_node_in_two_domains():
    topo = four_domain_layout()
    d2 = topo.domains[1]
    topo.domains[1] = replace(d2, nodes={**d2.nodes, 0: topo.nodes[0]})
    rules = _rules(topo)
    assert "NodeInTwoDomains" in rules and "DomainMismatch" in rules


def test_validate_detects_disconnected_domain():
    topo = four_domain_layout()
    d1 = topo.domains[0]
    links = dict(d1.links)
    for lid in list(links)[:2]:
        del links[lid]
        del topo.links[lid]
    topo.domains[0] = replace(d1, links=links)
    assert "DomainDisconnected" in _rules(topo)
