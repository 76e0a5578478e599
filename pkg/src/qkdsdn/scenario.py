"""Scenario files: loading, schema checks with line numbers, and workload expansion.

A scenario is a YAML mapping with the sections ``topology``, ``domains``,
``backbone``, ``rate``, ``latency``, ``hierarchy`` or ``peers``,
``workload``, ``faults``, ``seed`` and ``duration_s``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .net import (
    BackboneLink,
    Domain,
    Medium,
    NodeKind,
    Topology,
    TopologyError,
    build_topology,
    compose,
    satellite_windows,
    validate,
)
from .qkd import DEFAULT_MAX_LOSS_DB, DEFAULT_R0_BPS, RateModel

SECTIONS = {
    "name", "model", "topology", "domains", "backbone", "rate", "latency",
    "hierarchy", "peers", "workload", "faults", "seed", "duration_s",
}
SHIPPED = ("fig3_hierarchical", "fig5_distributed", "contention", "l3_failover", "satellite_window")


class ScenarioError(Exception):
    """Invalid scenario; ``diagnostics`` holds ``(line, message)`` pairs."""

    def __init__(self, diagnostics: list[tuple[int | None, str]], source: str = "<scenario>"):
        self.diagnostics = diagnostics
        self.source = source
        super().__init__("\n".join(self.lines()))

    def lines(self) -> list[str]:
        return [
            f"{self.source}:{line}: {msg}" if line else f"{self.source}: {msg}"
            for line, msg in self.diagnostics
        ]


class FaultAction(str, enum.Enum):
    CONTROLLER_DOWN = "ControllerDown"
    CONTROLLER_UP = "ControllerUp"
    LINK_DOWN = "LinkDown"
    LINK_UP = "LinkUp"
    DOMAIN_ISOLATE = "DomainIsolate"
    DOMAIN_RESTORE = "DomainRestore"


_PAIRS = {
    FaultAction.CONTROLLER_DOWN: FaultAction.CONTROLLER_UP,
    FaultAction.LINK_DOWN: FaultAction.LINK_UP,
    FaultAction.DOMAIN_ISOLATE: FaultAction.DOMAIN_RESTORE,
}


@dataclass(frozen=True)
class FaultEntry:
    time: float
    action: FaultAction
    target: int


@dataclass(frozen=True)
class LatencyModel:
    base_ms: float = 5.0
    per_km_ms: float = 0.005

    def delay_s(self, km: float = 0.0) -> float:
        return (self.base_ms + self.per_km_ms * km) / 1000.0


@dataclass(frozen=True)
class RequestSpec:
    at: float
    src: int
    dst: int
    bits: int
    request_id: int = 0


@dataclass(frozen=True)
class PoissonSpec:
    rate_per_s: float
    count: int
    bits: int
    start_s: float = 0.0
    nodes: tuple[int, ...] = ()


@dataclass(frozen=True)
class HierarchyConfig:
    """Controller tree. ``parent`` maps every non-root controller (L1s included)."""

    root: int
    parent: dict[int, int]
    standby: frozenset[int] = frozenset()
    sync_period_s: float = 10.0
    heartbeat_s: float = 5.0
    heartbeat_misses: int = 3


@dataclass(frozen=True)
class PeersConfig:
    gossip_period_s: float = 10.0


@dataclass
class Scenario:
    name: str
    model: str
    topology: Topology
    rate: RateModel = field(default_factory=RateModel)
    latency: LatencyModel = field(default_factory=LatencyModel)
    hierarchy: HierarchyConfig | None = None
    peers: PeersConfig = field(default_factory=PeersConfig)
    requests: list[RequestSpec] = field(default_factory=list)
    poisson: PoissonSpec | None = None
    faults: list[FaultEntry] = field(default_factory=list)
    seed: int = 0
    duration_s: float = 60.0
    initial_bits: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def fingerprint(self) -> str:
        """Hash of the parts both models must share to be comparable."""
        keys = ("topology", "domains", "backbone", "rate", "latency", "workload", "seed", "duration_s")
        material = {k: self.raw.get(k) for k in keys}
        if not self.raw:
            material = {"nodes": sorted(self.topology.nodes), "links": sorted(self.topology.links),
                        "seed": self.seed, "requests": [vars(r) for r in self.requests]}
        blob = json.dumps(material, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_model(self, model: str) -> "Scenario":
        from dataclasses import replace
        return replace(self, model=model)

    def expanded_requests(self, seed: int | None = None) -> list[RequestSpec]:
        """Explicit requests plus Poisson arrivals, numbered by issue order."""
        reqs = list(self.requests)
        if self.poisson is not None:
            p = self.poisson
            rng = substream(self.seed if seed is None else seed, "workload")
            pool = list(p.nodes) or [
                n for n, node in sorted(self.topology.nodes.items()) if node.has_kms
            ]
            t = p.start_s
            for _ in range(p.count):
                t += rng.expovariate(p.rate_per_s)
                src, dst = rng.sample(pool, 2)
                reqs.append(RequestSpec(round(t, 6), src, dst, p.bits))
        order = sorted(range(len(reqs)), key=lambda i: (reqs[i].at, i))
        return [
            RequestSpec(reqs[i].at, reqs[i].src, reqs[i].dst, reqs[i].bits, k + 1)
            for k, i in enumerate(order)
        ]


def substream(seed: int, name: str) -> random.Random:
    """Independent named RNG stream derived from the run seed."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


# -- loading ---------------------------------------------------------------


def _line_index(node: yaml.Node, path: tuple = (), out: dict | None = None) -> dict[tuple, int]:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            out[path + (key.value,)] = key.start_mark.line + 1
            _line_index(value, path + (key.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_index(item, path + (i,), out)
    return out


class _Checker:
    def __init__(self, lines: dict[tuple, int]):
        self.lines = lines
        self.diagnostics: list[tuple[int | None, str]] = []

    def line(self, path: tuple) -> int | None:
        while path:
            key = tuple(str(p) if not isinstance(p, int) else p for p in path)
            if key in self.lines:
                return self.lines[key]
            path = path[:-1]
        return self.lines.get((), None)

    def error(self, path: tuple, msg: str) -> None:
        where = ".".join(str(p) if not isinstance(p, int) else f"[{p}]" for p in path)
        where = where.replace(".[", "[")
        self.diagnostics.append((self.line(path), f"{where}: {msg}" if where else msg))

    def get(self, data: dict, path: tuple, key: str, kind, default=None, required=False):
        if key not in data:
            if required:
                self.error(path, f"missing required key '{key}'")
            return default
        value = data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind is not bool and isinstance(value, bool)):
            name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            self.error(path + (key,), f"expected {name}, got {type(value).__name__}")
            return default
        return value


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError([(None, f"cannot read scenario: {exc.strerror}")], str(path)) from exc
    return parse_scenario(text, source=str(path), name=path.stem)


def load_shipped(name: str) -> Scenario:
    ref = resources.files("qkdsdn") / "scenarios" / f"{name}.yaml"
    return parse_scenario(ref.read_text(), source=f"{name}.yaml", name=name)


def shipped_path(name: str) -> Path:
    return Path(str(resources.files("qkdsdn") / "scenarios" / f"{name}.yaml"))


def parse_scenario(text: str, source: str = "<scenario>", name: str = "scenario") -> Scenario:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError([(line, f"YAML syntax error: {getattr(exc, 'problem', exc)}")], source) from exc
    if not isinstance(data, dict) or node is None:
        raise ScenarioError([(1, "scenario must be a mapping")], source)
    chk = _Checker(_line_index(node))
    scenario = _build(data, chk, name)
    if chk.diagnostics:
        raise ScenarioError(chk.diagnostics, source)
    assert scenario is not None
    return scenario


def _windows(chk: _Checker, path: tuple, raw) -> tuple | None:
    if raw is None:
        return None
    if not isinstance(raw, list):
        chk.error(path, "expected a list of [start, end] pairs")
        return None
    out = []
    for i, w in enumerate(raw):
        if (
            not isinstance(w, list) or len(w) != 2
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in w)
        ):
            chk.error(path + (i,), "window must be [start, end]")
            continue
        out.append((float(w[0]), float(w[1])))
    return tuple(out)


def _build(data: dict, chk: _Checker, default_name: str) -> Scenario | None:
    for key in data:
        if key not in SECTIONS:
            chk.error((key,), f"unknown section '{key}'")

    model = chk.get(data, (), "model", str, "hierarchical")
    if model not in ("hierarchical", "distributed"):
        chk.error(("model",), f"model must be hierarchical or distributed, got '{model}'")
    seed = chk.get(data, (), "seed", int, 0)
    duration = chk.get(data, (), "duration_s", float, 60.0)
    if duration is not None and duration < 0:
        chk.error(("duration_s",), "must be non-negative")

    topo_opts = chk.get(data, (), "topology", dict, {})
    satellite_trusted = chk.get(topo_opts, ("topology",), "satellite_trusted", bool, True)
    initial_bits = chk.get(topo_opts, ("topology",), "initial_bits", int, 0)
    default_km = chk.get(topo_opts, ("topology",), "length_km", float, 10.0)

    rate_raw = chk.get(data, (), "rate", dict, {})
    alpha = chk.get(rate_raw, ("rate",), "alpha_db_per_km", float, 0.2)
    rate = RateModel(
        chk.get(rate_raw, ("rate",), "r0_bps", float, DEFAULT_R0_BPS),
        chk.get(rate_raw, ("rate",), "max_loss_db", float, DEFAULT_MAX_LOSS_DB),
    )
    if rate.r0_bps <= 0 or rate.max_loss_db <= 0:
        chk.error(("rate",), "r0_bps and max_loss_db must be positive")

    lat_raw = chk.get(data, (), "latency", dict, {})
    latency = LatencyModel(
        chk.get(lat_raw, ("latency",), "base_ms", float, 5.0),
        chk.get(lat_raw, ("latency",), "per_km_ms", float, 0.005),
    )
    if latency.base_ms <= 0 or latency.per_km_ms < 0:
        chk.error(("latency",), "delays must be strictly positive")

    domains: list[Domain] = []
    raw_domains = chk.get(data, (), "domains", list, [], required=True)
    next_node, next_link = 0, 0
    for i, d in enumerate(raw_domains):
        p = ("domains", i)
        if not isinstance(d, dict):
            chk.error(p, "domain must be a mapping")
            continue
        did = chk.get(d, p, "id", int, required=True)
        kind = chk.get(d, p, "kind", str, required=True)
        n = chk.get(d, p, "n", int, required=True)
        if did is None or kind is None or n is None:
            continue
        first = chk.get(d, p, "first_node", int, next_node)
        try:
            dom = build_topology(
                kind, n, did,
                first_node=first,
                first_link=next_link,
                length_km=chk.get(d, p, "length_km", float, default_km),
                alpha_db_per_km=alpha,
                controller=chk.get(d, p, "controller", int, did),
                hub_has_kms=chk.get(d, p, "hub_kms", bool, False),
            )
        except ValueError as exc:
            chk.error(p, str(exc))
            continue
        if any(nid in {x for dd in domains for x in dd.nodes} for nid in dom.nodes):
            chk.error(p, "node ids overlap an earlier domain")
            continue
        if did in {dd.id for dd in domains}:
            chk.error(p + ("id",), f"duplicate domain id {did}")
            continue
        domains.append(dom)
        next_node = max(dom.nodes) + 1
        next_link = max(dom.links) + 1

    specs = []
    for i, b in enumerate(chk.get(data, (), "backbone", list, [])):
        p = ("backbone", i)
        if not isinstance(b, dict):
            chk.error(p, "backbone link must be a mapping")
            continue
        medium = chk.get(b, p, "medium", str, "fiber")
        try:
            medium = Medium(medium)
        except ValueError:
            chk.error(p + ("medium",), f"unknown medium '{medium}'")
            continue
        a = chk.get(b, p, "a", int, required=True)
        bb = chk.get(b, p, "b", int, required=True)
        if a is None or bb is None:
            continue
        windows = _windows(chk, p + ("windows",), b.get("windows"))
        if windows is None and medium is Medium.SATELLITE and "pass" in b:
            pass_cfg = chk.get(b, p, "pass", dict, {})
            windows = satellite_windows(
                duration or 0.0,
                chk.get(pass_cfg, p + ("pass",), "period_s", float, 5400.0),
                chk.get(pass_cfg, p + ("pass",), "window_s", float, 300.0),
                chk.get(pass_cfg, p + ("pass",), "offset_s", float, 0.0),
            )
        specs.append(BackboneLink(
            a, bb, medium,
            chk.get(b, p, "length_km", float, 0.0),
            chk.get(b, p, "fixed_db", float, 0.0),
            alpha,
            windows,
        ))

    topology = None
    if domains and not chk.diagnostics:
        try:
            topology = compose(
                domains, specs, first_link=max(next_link, 1000),
                horizon_s=duration or 0.0, satellite_trusted=satellite_trusted,
            )
        except TopologyError as exc:
            chk.error(("backbone",), f"{type(exc).__name__}: {exc}")
        else:
            for v in validate(topology):
                chk.error(("backbone",) if "link" in v.entity else ("domains",), str(v))

    hierarchy = None
    peers = PeersConfig()
    if model == "hierarchical" or "hierarchy" in data:
        hierarchy = _hierarchy(data, chk, domains)
    if "peers" in data:
        raw_peers = chk.get(data, (), "peers", dict, {})
        peers = PeersConfig(chk.get(raw_peers, ("peers",), "gossip_period_s", float, 10.0))
        if peers.gossip_period_s <= 0:
            chk.error(("peers", "gossip_period_s"), "must be positive")

    requests, poisson = _workload(data, chk, topology)
    faults = _faults(data, chk, topology, hierarchy)

    if chk.diagnostics or topology is None:
        if topology is None and not chk.diagnostics:
            chk.error(("domains",), "no domains defined")
        return None
    return Scenario(
        name=chk.get(data, (), "name", str, default_name),
        model=model,
        topology=topology,
        rate=rate,
        latency=latency,
        hierarchy=hierarchy,
        peers=peers,
        requests=requests,
        poisson=poisson,
        faults=faults,
        seed=seed,
        duration_s=duration,
        initial_bits=initial_bits,
        raw=data,
    )


def _hierarchy(data: dict, chk: _Checker, domains: list[Domain]) -> HierarchyConfig | None:
    raw = chk.get(data, (), "hierarchy", dict, None, required=True)
    if raw is None:
        return None
    p = ("hierarchy",)
    root = chk.get(raw, p, "root", int, required=True)
    parent: dict[int, int] = {}
    for key in ("controllers", "l1_parents"):
        section = chk.get(raw, p, key, dict, {})
        for child, par in section.items():
            if not isinstance(child, int) or not isinstance(par, int):
                chk.error(p + (key,), "entries must map controller id -> parent id")
                continue
            parent[child] = par
    l1_ids = {d.controller for d in domains}
    for cid in sorted(l1_ids):
        if cid not in parent:
            chk.error(p + ("l1_parents",), f"L1 controller {cid} has no parent")
    if root in l1_ids:
        chk.error(p + ("root",), "root must not be an L1 controller")
    if root in parent:
        chk.error(p + ("root",), "root cannot have a parent")
    for cid in parent:
        seen, cur = set(), cid
        while cur in parent:
            if cur in seen:
                chk.error(p + ("controllers",), f"cycle through controller {cid}")
                break
            seen.add(cur)
            cur = parent[cur]
        else:
            if cur != root:
                chk.error(p + ("controllers",), f"controller {cid} does not reach root {root}")
    for par in set(parent.values()):
        if par in l1_ids:
            chk.error(p + ("l1_parents",), f"L1 controller {par} cannot be a parent")
    standby = chk.get(raw, p, "standby", list, [])
    known = set(parent) | {root}
    for s in standby:
        if s not in known:
            chk.error(p + ("standby",), f"standby for unknown controller {s}")
    return HierarchyConfig(
        root=root if root is not None else -1,
        parent=parent,
        standby=frozenset(standby),
        sync_period_s=chk.get(raw, p, "sync_period_s", float, 10.0),
        heartbeat_s=chk.get(raw, p, "heartbeat_s", float, 5.0),
        heartbeat_misses=chk.get(raw, p, "heartbeat_misses", int, 3),
    )


def _workload(data: dict, chk: _Checker, topology: Topology | None):
    raw = chk.get(data, (), "workload", dict, {})
    p = ("workload",)
    requests = []
    for i, r in enumerate(chk.get(raw, p, "requests", list, [])):
        rp = p + ("requests", i)
        if not isinstance(r, dict):
            chk.error(rp, "request must be a mapping")
            continue
        at = chk.get(r, rp, "at", float, required=True)
        src = chk.get(r, rp, "src", int, required=True)
        dst = chk.get(r, rp, "dst", int, required=True)
        bits = chk.get(r, rp, "bits", int, 256)
        if None in (at, src, dst):
            continue
        if topology is not None:
            for end, key in ((src, "src"), (dst, "dst")):
                if end not in topology.nodes:
                    chk.error(rp + (key,), f"unknown node {end}")
                elif not topology.nodes[end].has_kms:
                    chk.error(rp + (key,), f"node {end} hosts no KMS")
        requests.append(RequestSpec(at, src, dst, bits))
    poisson = None
    if "poisson" in raw:
        pr = chk.get(raw, p, "poisson", dict, {})
        pp = p + ("poisson",)
        poisson = PoissonSpec(
            chk.get(pr, pp, "rate_per_s", float, required=True) or 1.0,
            chk.get(pr, pp, "count", int, 0),
            chk.get(pr, pp, "bits", int, 256),
            chk.get(pr, pp, "start_s", float, 0.0),
            tuple(chk.get(pr, pp, "nodes", list, [])),
        )
        if poisson.rate_per_s <= 0:
            chk.error(pp + ("rate_per_s",), "must be positive")
    return requests, poisson


def _faults(data: dict, chk: _Checker, topology: Topology | None, hierarchy: HierarchyConfig | None):
    out = []
    state: dict[tuple[str, int], bool] = {}
    for i, f in enumerate(chk.get(data, (), "faults", list, [])):
        p = ("faults", i)
        if not isinstance(f, dict):
            chk.error(p, "fault must be a mapping")
            continue
        at = chk.get(f, p, "at", float, required=True)
        action = chk.get(f, p, "action", str, required=True)
        target = chk.get(f, p, "target", int, required=True)
        if None in (at, action, target):
            continue
        try:
            act = FaultAction(action)
        except ValueError:
            chk.error(p + ("action",), f"unknown action '{action}'")
            continue
        if topology is not None and not _target_exists(act, target, topology, hierarchy):
            chk.error(p + ("target",), f"unknown {act.value} target {target}")
        family = act.value.replace("Up", "Down").replace("Restore", "Isolate")
        is_down = act in _PAIRS
        if state.get((family, target), False) == is_down:
            chk.error(p, f"{act.value} on {target} is not well nested")
        state[(family, target)] = is_down
        out.append(FaultEntry(at, act, target))
    out.sort(key=lambda e: e.time)
    return out


def _target_exists(act: FaultAction, target: int, topology: Topology, hierarchy) -> bool:
    if act in (FaultAction.LINK_DOWN, FaultAction.LINK_UP):
        return target in topology.links
    if act in (FaultAction.DOMAIN_ISOLATE, FaultAction.DOMAIN_RESTORE):
        return any(d.id == target for d in topology.domains)
    ids = {d.controller for d in topology.domains}
    if hierarchy is not None:
        ids |= set(hierarchy.parent) | set(hierarchy.parent.values()) | {hierarchy.root}
    return target in ids


def border_nodes(topology: Topology) -> list[int]:
    return [n for n, node in topology.nodes.items() if node.kind is NodeKind.BORDER]


def dump_scenario(data: dict[str, Any]) -> str:
    return yaml.safe_dump(data, sort_keys=False)
