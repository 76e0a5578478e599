"""Deterministic discrete-event engine.

Events are processed in ``(time, seq)`` order. Key accrual is lazy: a
link's buffer is integrated exactly whenever it is touched, so no periodic
accrual ticks exist.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any

from .control import LinkView, Message
from .metrics import TraceRecord, summarize, trace_bytes
from .net import DomainId, LinkId, NodeId
from .qkd import KeyStore
from .scenario import FaultAction, FaultEntry, RequestSpec, Scenario


class SchedulingError(Exception):
    pass


class UnknownEntity(Exception):
    pass


@dataclass(frozen=True)
class Tick:
    name: str
    data: tuple = ()


@dataclass(order=True)
class Event:
    time: float
    seq: int
    target: str = field(compare=False)
    payload: Any = field(compare=False)


class Engine:
    def __init__(self, scenario: Scenario, *, seed: int | None = None, model: str | None = None):
        from .distributed import DistributedProtocol
        from .hierarchical import HierarchicalProtocol

        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.model = model or scenario.model
        self.topology = scenario.topology
        self.latency = scenario.latency
        self.now = 0.0
        self._seq = itertools.count()
        self._queue: list[Event] = []
        self.trace: list[TraceRecord] = []
        self.dropped: list[Message] = []
        self.processed: list[tuple[float, int]] = []
        self.store = KeyStore(self.topology, scenario.rate, self.seed, scenario.initial_bits)
        self.down_links: set[LinkId] = set()
        self.isolated: set[DomainId] = set()

        if self.model == "hierarchical":
            if scenario.hierarchy is None:
                raise ValueError("hierarchical model needs a hierarchy section")
            self.protocol = HierarchicalProtocol(self)
        elif self.model == "distributed":
            self.protocol = DistributedProtocol(self)
        else:
            raise ValueError(f"unknown model {self.model!r}")

        for req in scenario.expanded_requests(self.seed):
            self.schedule(req.at, "engine", req)
        for entry in scenario.faults:
            self.schedule(entry.time, "engine", entry)
        self.protocol.start()

    # -- scheduling --------------------------------------------------------

    def schedule(self, time: float, target: str, payload: Any) -> Event:
        if time < self.now:
            raise SchedulingError(f"event at {time} is before current time {self.now}")
        ev = Event(time, next(self._seq), target, payload)
        heapq.heappush(self._queue, ev)
        return ev

    def tick_at(self, time: float, name: str, *data: Any) -> Event:
        return self.schedule(time, "engine", Tick(name, data))

    def send(self, msg: Message, delay: float | None = None) -> None:
        delay = self.latency.delay_s() if delay is None else delay
        # rounding keeps accumulated float error out of event times and traces
        self.schedule(round(self.now + delay, 9), msg.receiver, msg)

    def run_until(self, t_end: float) -> list[TraceRecord]:
        if t_end < self.now:
            raise SchedulingError(f"cannot run back to {t_end} from {self.now}")
        while self._queue and self._queue[0].time <= t_end:
            ev = heapq.heappop(self._queue)
            self.now = ev.time
            self.processed.append((ev.time, ev.seq))
            self._dispatch(ev)
        self.now = t_end
        return self.trace

    def run(self) -> list[TraceRecord]:
        return self.run_until(self.scenario.duration_s)

    def _dispatch(self, ev: Event) -> None:
        p = ev.payload
        if isinstance(p, Message):
            self._deliver(p)
        elif isinstance(p, RequestSpec):
            self.protocol.on_request(p)
        elif isinstance(p, FaultEntry):
            self.inject_fault(p)
        elif isinstance(p, Tick):
            self.protocol.on_tick(p)
        else:
            raise TypeError(f"unknown event payload {p!r}")

    def _deliver(self, msg: Message) -> None:
        if not self.reachable(msg.receiver):
            self.dropped.append(msg)
            self.protocol.on_drop(msg)
            return
        self.trace.append(TraceRecord(
            self.now, msg.sender, msg.receiver, msg.type.value, msg.request_id,
            msg.plane.value, msg.detail(),
        ))
        self.protocol.on_message(msg)

    # -- state queries -------------------------------------------------------

    def reachable(self, addr: str) -> bool:
        kind, _, ident = addr.partition(":")
        if kind in ("App", "QN"):
            return self.topology.domain_of(int(ident)) not in self.isolated
        ctrl = self.protocol.by_addr.get(addr)
        return ctrl is not None and ctrl.up

    def node_faulted(self, node: NodeId) -> bool:
        return self.topology.domain_of(node) in self.isolated

    def link_up(self, lid: LinkId) -> bool:
        if lid in self.down_links:
            return False
        return not any(self.topology.domain_of(n) in self.isolated
                       for n in self.topology.links[lid].endpoints)

    def live_view(self, lid: LinkId) -> LinkView:
        self.store.accrue(lid, self.now)
        return LinkView(self.link_up(lid), self.store.bits_available(lid), self.now)

    def kms_bits(self, node: NodeId) -> int:
        kms = self.store.kms[node]
        for lid in kms.buffers:
            self.store.accrue(lid, self.now)
        return kms.total_bits()

    # -- faults ----------------------------------------------------------------

    def inject_fault(self, entry: FaultEntry) -> None:
        act, target = entry.action, entry.target
        topo = self.topology
        changed: set[LinkId] = set()
        if act in (FaultAction.CONTROLLER_DOWN, FaultAction.CONTROLLER_UP):
            if target not in self.protocol.controllers:
                raise UnknownEntity(f"controller {target}")
            if act is FaultAction.CONTROLLER_DOWN:
                self.protocol.on_controller_down(target)
            else:
                self.protocol.on_controller_up(target)
            return
        if act in (FaultAction.LINK_DOWN, FaultAction.LINK_UP):
            if target not in topo.links:
                raise UnknownEntity(f"link {target}")
            if act is FaultAction.LINK_DOWN:
                self.down_links.add(target)
            else:
                self.down_links.discard(target)
            changed = {target}
        else:
            try:
                domain = topo.domain(target)
            except KeyError:
                raise UnknownEntity(f"domain {target}") from None
            changed = set(domain.links) | topo.incident_backbone(target)
            if act is FaultAction.DOMAIN_ISOLATE:
                self.isolated.add(target)
                self.protocol.on_controller_down(domain.controller)
            else:
                self.isolated.discard(target)
                self.protocol.on_controller_up(domain.controller)
        for lid in sorted(changed):
            self.store.set_up(lid, self.link_up(lid), self.now)
        self.protocol.on_link_change(sorted(changed))

    # -- results -----------------------------------------------------------------

    def trace_hash(self) -> str:
        return hashlib.sha256(trace_bytes(self.trace)).hexdigest()

    def report(self):
        return summarize(self.trace, fingerprint=self.scenario.fingerprint(), model=self.model)

    def controller_addr(self, cid: int) -> str:
        return self.protocol.controllers[cid].addr


def run_scenario(
    scenario: Scenario, *, seed: int | None = None, model: str | None = None,
    until: float | None = None,
) -> Engine:
    eng = Engine(scenario, seed=seed, model=model)
    eng.run_until(scenario.duration_s if until is None else until)
    return eng


def replay(seed: int, scenario: Scenario, model: str | None = None) -> list[TraceRecord]:
    """Trace of a fresh run; identical inputs give a byte-identical trace."""
    return run_scenario(scenario, seed=seed, model=model).trace


__all__ = [
    "Engine", "Event", "Tick", "SchedulingError", "UnknownEntity", "run_scenario", "replay",
]
