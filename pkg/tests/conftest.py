from __future__ import annotations

import random

import pytest
import yaml

from qkdsdn.control import LinkView, NetworkView
from qkdsdn.net import Domain, Link, Node, Topology
from qkdsdn.scenario import parse_scenario


def simple_paths(topo: Topology, src: int, dst: int, usable) -> list[list[int]]:
    """Every simple path from src to dst over links accepted by ``usable``."""
    out = []

    def walk(path: list[int]) -> None:
        here = path[-1]
        if here == dst:
            out.append(list(path))
            return
        for nxt, lid in topo.neighbors(here):
            if nxt not in path and usable(lid):
                path.append(nxt)
                walk(path)
                path.pop()

    walk([src])
    return out


def brute_route(topo: Topology, view: NetworkView, src: int, dst: int, bits: int, now: float,
                nodes=None, excluded=()):
    """Shortest feasible path with the smallest node sequence, or None."""

    def usable(lid: int) -> bool:
        link = topo.links[lid]
        state = view.link_states.get(lid)
        if lid in excluded or state is None or not state.up or state.bits_available < bits:
            return False
        if nodes is not None and not set(link.endpoints) <= set(nodes):
            return False
        return link.available_at(now)

    paths = simple_paths(topo, src, dst, usable)
    if not paths:
        return None
    return min(paths, key=lambda p: (len(p), p))


def random_graph(rng: random.Random, max_nodes: int = 8):
    """Single-domain topology with random edges, plus a random link-state view."""
    n = rng.randint(2, max_nodes)
    nodes = {i: Node(i, 1) for i in range(n)}
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    chosen = [p for p in pairs if rng.random() < 0.45]
    links = {}
    for lid, (a, b) in enumerate(chosen):
        windows = ()
        if rng.random() < 0.15:
            start = rng.choice([0.0, 5.0, 20.0])
            windows = ((start, start + 10.0),)
        links[lid] = Link(lid, (a, b), availability=windows)
    topo = Topology([Domain(1, nodes, links, 1)], frozenset(), nodes, links)
    view = NetworkView({1})
    for lid in links:
        view.link_states[lid] = LinkView(rng.random() > 0.1, rng.choice([0, 100, 300, 1000]), 0.0)
    return topo, view


_KINDS = [("ring", 3), ("ring", 4), ("bus", 2), ("bus", 3), ("star", 2), ("star", 3), ("mesh", 3)]


def _size(kind: str, n: int) -> int:
    return n + 1 if kind == "star" else n


def random_scenario_dict(seed: int, *, model: str | None = None, faults: bool = True) -> dict:
    """A valid random scenario: up to 4 domains and 16 nodes, tree-shaped backbone."""
    rng = random.Random(seed)
    n_domains = rng.randint(2, 4)
    domains, members, first, total = [], [], 0, 0
    for did in range(1, n_domains + 1):
        kind, n = rng.choice(_KINDS)
        while total + _size(kind, n) > 16:
            kind, n = "bus", 2
        ids = list(range(first, first + _size(kind, n)))
        domains.append({"id": did, "kind": kind, "n": n, "first_node": first,
                        "length_km": rng.choice([5.0, 10.0, 25.0])})
        kms = ids[1:] if kind == "star" else ids
        members.append((ids, kms))
        total += len(ids)
        first += 10
    backbone = []
    for i in range(1, n_domains):
        j = rng.randrange(i)
        a, b = rng.choice(members[j][0]), rng.choice(members[i][0])
        if rng.random() < 0.25:
            backbone.append({"a": a, "b": b, "medium": "satellite", "fixed_db": 20, "windows": []})
        else:
            backbone.append({"a": a, "b": b, "medium": "fiber", "length_km": rng.choice([20, 45, 80])})
    kms_nodes = [n for _, kms in members for n in kms]
    requests = []
    for _ in range(rng.randint(1, 6)):
        src, dst = rng.sample(kms_nodes, 2)
        requests.append({"at": round(rng.uniform(0.5, 8.0), 3), "src": src, "dst": dst,
                         "bits": rng.choice([64, 128, 256, 500])})
    l2_count = 1 if n_domains <= 2 else 2
    l1_parents = {did: 100 + 1 + (did - 1) % l2_count for did in range(1, n_domains + 1)}
    data = {
        "name": f"random{seed}",
        "model": model or rng.choice(["hierarchical", "distributed"]),
        "seed": seed,
        "duration_s": 20,
        "topology": {"initial_bits": rng.choice([300, 5000, 100000])},
        "domains": domains,
        "backbone": backbone,
        "hierarchy": {"root": 100, "controllers": {100 + k: 100 for k in range(1, l2_count + 1)},
                      "l1_parents": l1_parents},
        "peers": {"gossip_period_s": rng.choice([2.0, 5.0, 10.0])},
        "workload": {"requests": requests},
    }
    if faults and rng.random() < 0.3:
        data["faults"] = [{"at": 3.0, "action": "LinkDown", "target": 1000},
                          {"at": 6.0, "action": "LinkUp", "target": 1000}]
    return data


def scenario_from(data: dict):
    return parse_scenario(yaml.safe_dump(data, sort_keys=False), source=data.get("name", "test"))


@pytest.fixture
def fig3_dict():
    from qkdsdn.scenario import shipped_path
    return yaml.safe_load(shipped_path("fig3_hierarchical").read_text())


def all_orders(items):
    """Every ordering of ``items`` (small inputs only)."""
    from itertools import permutations
    return list(permutations(items))



ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
