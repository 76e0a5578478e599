"""Per-link secret key generation, key buffers, KMS instances and trusted relay.

Key material is never simulated physically. Each link owns a counter-based
keystream (SHA-256 over ``seed/link/counter``) so both endpoints derive the
same bits from a shared cursor, and every run is replayable.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .net import Link, LinkId, NodeId, Topology, Window

DEFAULT_R0_BPS = 81700 * 10 ** (9 / 10)
DEFAULT_MAX_LOSS_DB = 30.0


class KeyLayerError(Exception):
    """Base for key-layer failures."""


class KeyDepleted(KeyLayerError):
    def __init__(self, link: LinkId, deficit: int):
        super().__init__(f"link {link} short by {deficit} bits")
        self.link = link
        self.deficit = deficit


class RelayFailed(KeyLayerError):
    def __init__(self, hop: tuple[NodeId, NodeId], reason: str):
        super().__init__(f"hop {hop[0]}-{hop[1]}: {reason}")
        self.hop = hop
        self.reason = reason


@dataclass(frozen=True)
class RateModel:
    r0_bps: float = DEFAULT_R0_BPS
    max_loss_db: float = DEFAULT_MAX_LOSS_DB


def secret_key_rate(model: RateModel, loss_db: float) -> float:
    if loss_db > model.max_loss_db:
        return 0.0
    # division keeps whole-decade results exact (10**1.0 == 10.0)
    return model.r0_bps / 10 ** (loss_db / 10)


def exact(t: float | int | Fraction) -> Fraction:
    """Exact rational for a simulated time, using its shortest decimal form."""
    if isinstance(t, Fraction):
        return t
    if isinstance(t, int):
        return Fraction(t)
    return Fraction(repr(float(t)))


def window_overlap(windows: Sequence[Window], t0: Fraction, t1: Fraction) -> Fraction:
    """Seconds of ``[t0, t1]`` covered by the windows (empty = always up)."""
    if t1 <= t0:
        return Fraction(0)
    if not windows:
        return t1 - t0
    total = Fraction(0)
    for start, end in windows:
        lo = max(t0, exact(start))
        hi = min(t1, exact(end))
        if hi > lo:
            total += hi - lo
    return total


def keystream(seed: int, stream: str, start_bit: int, nbits: int) -> bytes:
    """``nbits`` of the named stream starting at ``start_bit``.

    Output is left-aligned in ``ceil(nbits/8)`` bytes; unused trailing bits
    are zero.
    """
    if nbits <= 0:
        return b""
    first = start_bit // 256
    last = (start_bit + nbits - 1) // 256
    raw = b"".join(
        hashlib.sha256(f"{seed}/{stream}/{k}".encode()).digest()
        for k in range(first, last + 1)
    )
    value = int.from_bytes(raw, "big")
    total = len(raw) * 8
    offset = start_bit - first * 256
    value >>= total - offset - nbits
    value &= (1 << nbits) - 1
    nbytes = math.ceil(nbits / 8)
    value <<= nbytes * 8 - nbits
    return value.to_bytes(nbytes, "big")


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise ValueError("length mismatch")
    return bytes(x ^ y for x, y in zip(a, b))


def link_stream(link: LinkId) -> str:
    return f"link/{link}"


@dataclass(frozen=True)
class KeyBlock:
    key_id: str
    bits: int
    payload: bytes
    epoch: float

    def __post_init__(self) -> None:
        if len(self.payload) != math.ceil(self.bits / 8):
            raise ValueError("payload length does not match bit count")


@dataclass
class KeyBuffer:
    link: LinkId
    bits_available: int = 0
    stream_cursor: int = 0


@dataclass
class KmsInstance:
    node: NodeId
    buffers: dict[LinkId, KeyBuffer] = field(default_factory=dict)
    delivered: dict[tuple[str, int], KeyBlock] = field(default_factory=dict)

    def total_bits(self) -> int:
        return sum(b.bits_available for b in self.buffers.values())


@dataclass
class LinkKeyState:
    """Authoritative key accounting for one link."""

    link: Link
    rate_bps: float
    initial_bits: int = 0
    up: bool = True
    last_touch: Fraction = Fraction(0)
    integral_s: Fraction = Fraction(0)
    credited: int = 0
    consumed: int = 0
    cursor: int = 0

    @property
    def bits_available(self) -> int:
        return self.initial_bits + self.credited - self.consumed

    def advance(self, t: float | Fraction) -> int:
        """Integrate the rate up to ``t``; returns bits newly credited."""
        now = exact(t)
        if now < self.last_touch:
            raise ValueError("accrual cannot run backwards")
        if self.up and self.rate_bps > 0:
            self.integral_s += window_overlap(self.link.availability, self.last_touch, now)
        self.last_touch = now
        total = math.floor(exact(self.rate_bps) * self.integral_s)
        added = total - self.credited
        self.credited = total
        return added


@dataclass(frozen=True)
class Hop:
    """One key-sharing segment between two KMS nodes.

    Passive relays (no KMS) in between act as optical switches: the hop
    spans several physical links and its key combines all of them.
    """

    src: NodeId
    dst: NodeId
    links: tuple[LinkId, ...]


@dataclass(frozen=True)
class DeliveryRecord:
    key_id: str
    path: tuple[NodeId, ...]
    hops: tuple[Hop, ...]
    source_payload: bytes
    delivered_payload: bytes
    ciphertexts: tuple[bytes, ...]


class KeyStore:
    """All KMS instances and link key states of one run."""

    def __init__(
        self,
        topology: Topology,
        model: RateModel,
        seed: int = 0,
        initial_bits: int | dict[LinkId, int] = 0,
    ):
        self.topology = topology
        self.model = model
        self.seed = seed
        self.links: dict[LinkId, LinkKeyState] = {}
        self.relays: list[DeliveryRecord] = []  # in the order they consumed key
        for lid, link in topology.links.items():
            init = initial_bits.get(lid, 0) if isinstance(initial_bits, dict) else initial_bits
            self.links[lid] = LinkKeyState(
                link, secret_key_rate(model, link.loss_db), initial_bits=init
            )
        self.kms: dict[NodeId, KmsInstance] = {
            nid: KmsInstance(nid) for nid, node in topology.nodes.items() if node.has_kms
        }
        for lid, link in topology.links.items():
            for end in link.endpoints:
                if end in self.kms:
                    self.kms[end].buffers[lid] = KeyBuffer(lid)
            self._sync(lid)

    def _sync(self, lid: LinkId) -> None:
        state = self.links[lid]
        for end in state.link.endpoints:
            kms = self.kms.get(end)
            if kms is not None:
                buf = kms.buffers[lid]
                buf.bits_available = state.bits_available
                buf.stream_cursor = state.cursor

    def accrue(self, lid: LinkId, t: float | Fraction) -> int:
        added = self.links[lid].advance(t)
        self._sync(lid)
        return added

    def accrue_all(self, t: float | Fraction) -> None:
        for lid in self.links:
            self.accrue(lid, t)

    def set_up(self, lid: LinkId, up: bool, t: float | Fraction) -> None:
        self.accrue(lid, t)
        self.links[lid].up = up

    def bits_available(self, lid: LinkId) -> int:
        return self.links[lid].bits_available

    def _take(self, lid: LinkId, bits: int) -> bytes:
        state = self.links[lid]
        material = keystream(self.seed, link_stream(lid), state.cursor, bits)
        state.cursor += bits
        state.consumed += bits
        self._sync(lid)
        return material

    def reserve_and_draw(
        self, node: NodeId, lid: LinkId, bits: int, *, key_id: str | None = None, epoch: float = 0.0
    ) -> KeyBlock:
        """Take ``bits`` of shared key from one link buffer at ``node``."""
        if node not in self.kms or lid not in self.kms[node].buffers:
            raise ValueError(f"node {node} is not an endpoint of link {lid}")
        state = self.links[lid]
        if state.bits_available < bits:
            raise KeyDepleted(lid, bits - state.bits_available)
        kid = key_id or f"L{lid}@{state.cursor}"
        return KeyBlock(kid, bits, self._take(lid, bits), epoch)

    def hops(self, path: Sequence[NodeId]) -> list[Hop]:
        topo = self.topology
        if len(path) < 2:
            raise ValueError("path needs at least two nodes")
        for end in (path[0], path[-1]):
            if end not in self.kms:
                raise RelayFailed((path[0], path[-1]), f"node {end} has no KMS")
        out: list[Hop] = []
        start = path[0]
        pending: list[LinkId] = []
        for u, v in zip(path, path[1:]):
            try:
                pending.append(topo.link_between(u, v).id)
            except KeyError:
                raise RelayFailed((u, v), "no link") from None
            if v in self.kms:
                out.append(Hop(start, v, tuple(pending)))
                start, pending = v, []
        return out

    def hop_key(self, hop: Hop, cursors: dict[LinkId, int], bits: int) -> bytes:
        """Recompute a hop key from stream positions (the receiver's view)."""
        key = bytes(math.ceil(bits / 8))
        for lid in hop.links:
            key = xor_bytes(key, keystream(self.seed, link_stream(lid), cursors[lid], bits))
        return key

    def relay_key(self, path: Sequence[NodeId], block: KeyBlock) -> DeliveryRecord:
        """Carry ``block`` hop by hop with one-time-pad encryption.

        Every link is checked before any is touched, so a failure leaves all
        buffers unchanged.
        """
        hops = self.hops(path)
        for hop in hops:
            for lid in hop.links:
                have = self.links[lid].bits_available
                if have < block.bits:
                    a, b = self.links[lid].link.endpoints
                    raise RelayFailed((a, b), f"link {lid} short by {block.bits - have} bits")

        payload = block.payload
        ciphertexts = []
        for hop in hops:
            cursors = {lid: self.links[lid].cursor for lid in hop.links}
            pad = bytes(len(payload))
            for lid in hop.links:
                pad = xor_bytes(pad, self._take(lid, block.bits))
            cipher = xor_bytes(payload, pad)
            ciphertexts.append(cipher)
            payload = xor_bytes(cipher, self.hop_key(hop, cursors, block.bits))
        record = DeliveryRecord(
            block.key_id, tuple(path), tuple(hops), block.payload, payload, tuple(ciphertexts)
        )
        self.relays.append(record)
        return record

    def deliver(self, node: NodeId, app: int, block: KeyBlock) -> None:
        key = (block.key_id, app)
        if key in self.kms[node].delivered:
            raise ValueError(f"key {block.key_id} already delivered to app {app}")
        self.kms[node].delivered[key] = block

    def conservation_errors(self) -> list[LinkId]:
        """Links whose integer key accounting does not balance."""
        bad = []
        for lid, s in self.links.items():
            if s.initial_bits + s.credited != s.bits_available + s.consumed:
                bad.append(lid)
            for end in s.link.endpoints:
                kms = self.kms.get(end)
                if kms is not None and (
                    kms.buffers[lid].bits_available != s.bits_available
                    or kms.buffers[lid].stream_cursor != s.cursor
                ):
                    bad.append(lid)
        return bad


def new_key_block(seed: int, key_id: str, bits: int, epoch: float) -> KeyBlock:
    """Fresh end-to-end key generated at the source KMS."""
    return KeyBlock(key_id, bits, keystream(seed, f"keygen/{key_id}", 0, bits), epoch)


def accrue_bits(rate_bps: float, dt: float) -> int:
    """Bits credited by ``dt`` seconds at ``rate_bps`` from a fresh buffer."""
    return math.floor(exact(rate_bps) * exact(dt))


__all__ = [
    "RateModel", "secret_key_rate", "KeyBlock", "KeyBuffer", "KmsInstance", "KeyStore",
    "KeyDepleted", "RelayFailed", "Hop", "DeliveryRecord", "keystream", "new_key_block",
    "accrue_bits", "exact", "window_overlap", "DEFAULT_R0_BPS", "DEFAULT_MAX_LOSS_DB",
]
