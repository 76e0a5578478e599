"""Trace records, run reports and model comparison.

A report is a pure fold over the trace, so it can be recomputed from a
persisted ``.jsonl`` file alone.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRACE_FIELDS = ("time", "sender", "receiver", "type", "request_id", "plane", "detail")


class IncomparableRuns(Exception):
    pass


@dataclass(frozen=True)
class TraceRecord:
    time: float
    sender: str
    receiver: str
    type: str
    request_id: int | None
    plane: str
    detail: str = ""

    def to_line(self) -> str:
        return json.dumps({k: getattr(self, k) for k in TRACE_FIELDS}, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        raw = json.loads(line)
        return cls(**{k: raw[k] for k in TRACE_FIELDS})

    def fields(self) -> dict[str, str]:
        out = {}
        for part in self.detail.split(";") if self.detail else ():
            key, _, value = part.partition("=")
            out[key] = value
        return out


def write_trace(records: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_line() + "\n")


def read_trace(path: str | Path) -> list[TraceRecord]:
    with open(path) as fh:
        return [TraceRecord.from_line(line) for line in fh if line.strip()]


def trace_bytes(records: Iterable[TraceRecord]) -> bytes:
    return "".join(r.to_line() + "\n" for r in records).encode()


def is_controller(addr: str) -> bool:
    return addr.split(":", 1)[0] in ("L1", "L2", "L3", "Peer")


@dataclass
class RequestReport:
    request_id: int
    control_messages: int = 0
    setup_latency_ms: float | None = None
    relay_hops: int = 0
    bits: int = 0
    outcome: str = "Unfinished"


@dataclass
class RunReport:
    requests: dict[int, RequestReport] = field(default_factory=dict)
    success_ratio: float = 0.0
    delivered_key_bits: int = 0
    p50_latency_ms: float | None = None
    p95_latency_ms: float | None = None
    controller_load: dict[str, int] = field(default_factory=dict)
    total_control_messages: int = 0
    unfinished: list[int] = field(default_factory=list)
    fingerprint: str | None = None
    model: str | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["requests"] = {str(k): v for k, v in out["requests"].items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def summarize(
    trace: Sequence[TraceRecord], *, fingerprint: str | None = None, model: str | None = None
) -> RunReport:
    """Fold a trace into per-request and aggregate metrics.

    A request counts as delivered once ``KeyReady`` reaches its source app;
    one with neither that nor an ``Error`` is flagged as unfinished.
    """
    report = RunReport(fingerprint=fingerprint, model=model)
    start: dict[int, float] = {}
    src_app: dict[int, str] = {}
    load: Counter[str] = Counter()
    for rec in trace:
        for end in (rec.sender, rec.receiver):
            if is_controller(end):
                load[end] += 1
        rid = rec.request_id
        if rid is None:
            continue
        req = report.requests.setdefault(rid, RequestReport(rid))
        if rec.plane == "CP":
            req.control_messages += 1
            report.total_control_messages += 1
        f = rec.fields()
        if rec.type == "KeyServiceRequest":
            start.setdefault(rid, rec.time)
            req.bits = int(f.get("bits", 0))
            src_app.setdefault(rid, rec.sender)
        elif rec.type == "KeyEstablish":
            req.relay_hops = int(f.get("hops", 0))
        elif rec.type == "KeyReady" and rec.receiver == src_app.get(rid):
            if req.outcome == "Unfinished":
                req.outcome = "Delivered"
                req.setup_latency_ms = round((rec.time - start[rid]) * 1000.0, 9)
        elif rec.type == "Error" and rec.receiver == src_app.get(rid):
            if req.outcome == "Unfinished":
                req.outcome = "Failed:" + f.get("code", "Unknown")
    report.requests = dict(sorted(report.requests.items()))
    report.controller_load = dict(sorted(load.items()))
    done = [r for r in report.requests.values()]
    delivered = [r for r in done if r.outcome == "Delivered"]
    report.unfinished = [r.request_id for r in done if r.outcome == "Unfinished"]
    report.success_ratio = len(delivered) / len(done) if done else 0.0
    report.delivered_key_bits = sum(r.bits for r in delivered)
    lats = [r.setup_latency_ms for r in delivered if r.setup_latency_ms is not None]
    if lats:
        report.p50_latency_ms = float(np.percentile(lats, 50))
        report.p95_latency_ms = float(np.percentile(lats, 95))
    return report


COMPARE_METRICS = (
    "requests",
    "success_ratio",
    "delivered_key_bits",
    "p50_latency_ms",
    "p95_latency_ms",
    "total_control_messages",
    "control_messages_per_request",
    "max_controller_load",
)


def _metric(report: RunReport, name: str) -> float | None:
    if name == "requests":
        return len(report.requests)
    if name == "control_messages_per_request":
        return report.total_control_messages / len(report.requests) if report.requests else 0.0
    if name == "max_controller_load":
        return max(report.controller_load.values(), default=0)
    return getattr(report, name)


@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    hierarchical: float | None
    distributed: float | None
    delta: float | None


def compare(hier: RunReport, dist: RunReport) -> list[ComparisonRow]:
    """Side-by-side metrics with ``distributed - hierarchical`` deltas."""
    if hier.fingerprint != dist.fingerprint:
        raise IncomparableRuns(f"scenario fingerprints differ: {hier.fingerprint} vs {dist.fingerprint}")
    rows = []
    for name in COMPARE_METRICS:
        a, b = _metric(hier, name), _metric(dist, name)
        delta = None if a is None or b is None else b - a
        rows.append(ComparisonRow(name, a, b, delta))
    return rows


def format_table(rows: Sequence[ComparisonRow]) -> str:
    def cell(v: float | None) -> str:
        if v is None:
            return "-"
        if isinstance(v, float) and not v.is_integer():
            return f"{v:.3f}"
        return str(int(v))

    header = ("metric", "hierarchical", "distributed", "delta")
    body = [(r.metric, cell(r.hierarchical), cell(r.distributed), cell(r.delta)) for r in rows]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(4)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines)
