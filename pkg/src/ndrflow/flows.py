"""Bidirectional flow reconstruction over a time-ordered packet stream.

Packets are grouped by a canonical five-tuple so that both directions of a
conversation land in the same record. Flow state is partitioned across
shards; each shard is owned by exactly one worker.
"""

from __future__ import annotations

import enum
import ipaddress
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

DEFAULT_TIMEOUT_US = 10_000_000
DEFAULT_REORDER_BUDGET_US = 1_000
DEFAULT_SHARDS = 4


class Protocol(enum.Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"
    OTHER = "OTHER"

    @classmethod
    def from_number(cls, number: int) -> "Protocol":
        return _IP_PROTO.get(number, cls.OTHER)

    @property
    def has_ports(self) -> bool:
        return self in (Protocol.TCP, Protocol.UDP)


_IP_PROTO = {6: Protocol.TCP, 17: Protocol.UDP, 1: Protocol.ICMP}
_PROTO_BYTE = {Protocol.TCP: 6, Protocol.UDP: 17, Protocol.ICMP: 1, Protocol.OTHER: 255}


class TcpFlag(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


# index order used by the per-direction flag counters
FLAG_ORDER = (TcpFlag.SYN, TcpFlag.ACK, TcpFlag.RST, TcpFlag.FIN, TcpFlag.PSH, TcpFlag.URG)


class FlowState(enum.Enum):
    HALF_OPEN = "HALF_OPEN"
    ESTABLISHED = "ESTABLISHED"
    CLOSED_FIN = "CLOSED_FIN"
    CLOSED_RST = "CLOSED_RST"
    TIMED_OUT = "TIMED_OUT"


class MalformedPacket(ValueError):
    pass


class Ipv6Packet(MalformedPacket):
    pass


@lru_cache(maxsize=65536)
def ip_to_int(address: str | int) -> int:
    """Dotted-quad to integer. IPv6 raises :class:`Ipv6Packet`."""
    if isinstance(address, int):
        if not 0 <= address < 2**32:
            raise MalformedPacket(f"IPv4 integer out of range: {address}")
        return address
    try:
        return int(ipaddress.IPv4Address(address))
    except ValueError:
        try:
            parsed = ipaddress.ip_address(address)
        except ValueError:
            raise MalformedPacket(f"not an IP address: {address!r}") from None
        raise Ipv6Packet(f"IPv6 not supported: {parsed}") from None


@lru_cache(maxsize=65536)
def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp_us: int
    src_ip: str
    dst_ip: str
    src_port: int | None
    dst_port: int | None
    protocol: Protocol
    tcp_flags: int = 0
    length_bytes: int = 0

    def has(self, flag: TcpFlag) -> bool:
        return bool(self.tcp_flags & flag)


class FlowKey(NamedTuple):
    """Canonical five-tuple; ``lo`` endpoint sorts before ``hi``.

    Endpoints are ordered by (numeric address, port), which is the same as
    octet-wise lexicographic order on the address.
    """

    lo_ip: int
    lo_port: int
    hi_ip: int
    hi_port: int
    protocol: Protocol

    @property
    def endpoint_lo(self) -> tuple[str, int]:
        return int_to_ip(self.lo_ip), self.lo_port

    @property
    def endpoint_hi(self) -> tuple[str, int]:
        return int_to_ip(self.hi_ip), self.hi_port

    def to_bytes(self) -> bytes:
        return (
            self.lo_ip.to_bytes(4, "big")
            + self.lo_port.to_bytes(2, "big")
            + self.hi_ip.to_bytes(4, "big")
            + self.hi_port.to_bytes(2, "big")
            + bytes([_PROTO_BYTE[self.protocol]])
        )

    def __str__(self) -> str:
        lo_ip, lo_port = self.endpoint_lo
        hi_ip, hi_port = self.endpoint_hi
        return f"{lo_ip}:{lo_port}<->{hi_ip}:{hi_port}/{self.protocol.value}"


def canonicalize(src_ip, dst_ip, src_port: int, dst_port: int, protocol: Protocol) -> FlowKey:
    a = (ip_to_int(src_ip), src_port)
    b = (ip_to_int(dst_ip), dst_port)
    lo, hi = (a, b) if a <= b else (b, a)
    return FlowKey(lo[0], lo[1], hi[0], hi[1], protocol)


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def shard_of(key: FlowKey, shard_count: int) -> int:
    """Stable shard index: FNV-1a 64 over the canonical key bytes, mod count."""
    if shard_count < 1:
        raise ValueError("shard_count must be >= 1")
    return fnv1a_64(key.to_bytes()) % shard_count


class RunningStats:
    """Welford accumulator. Variance is the population variance; 0.0 below 2 samples."""

    __slots__ = ("n", "mean", "m2", "min", "max")

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.min = 0.0
        self.max = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        if self.n == 1:
            self.min = self.max = x
        else:
            self.min = min(self.min, x)
            self.max = max(self.max, x)
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        return self.m2 / self.n if self.n >= 2 else 0.0

    def copy(self) -> "RunningStats":
        out = RunningStats()
        out.n, out.mean, out.m2, out.min, out.max = self.n, self.mean, self.m2, self.min, self.max
        return out

    def as_tuple(self) -> tuple:
        return (self.n, self.mean, self.m2, self.min, self.max)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunningStats) and self.as_tuple() == other.as_tuple()

    def __repr__(self) -> str:
        return f"RunningStats(n={self.n}, mean={self.mean}, var={self.variance}, min={self.min}, max={self.max})"


@dataclass(slots=True, eq=True)
class FlowRecord:
    key: FlowKey
    # initiator-oriented view: src is whoever sent the first packet
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    first_seen_us: int
    last_seen_us: int
    fwd_packets: int = 0
    rev_packets: int = 0
    fwd_bytes: int = 0
    rev_bytes: int = 0
    fwd_flags: list = field(default_factory=lambda: [0] * len(FLAG_ORDER))
    rev_flags: list = field(default_factory=lambda: [0] * len(FLAG_ORDER))
    fwd_iat: RunningStats = field(default_factory=RunningStats)
    rev_iat: RunningStats = field(default_factory=RunningStats)
    iat: RunningStats = field(default_factory=RunningStats)
    fwd_last_us: int | None = None
    rev_last_us: int | None = None
    syn_seen: bool = False
    synack_seen: bool = False
    fin_fwd: bool = False
    fin_rev: bool = False
    state: FlowState = FlowState.ESTABLISHED
    # initiator's sliding-window snapshot, attached by the flow stage
    window: object = None

    @property
    def protocol(self) -> Protocol:
        return self.key.protocol

    @property
    def initiator(self) -> tuple[str, int]:
        return self.src_ip, self.src_port

    @property
    def packets(self) -> int:
        return self.fwd_packets + self.rev_packets

    @property
    def bytes(self) -> int:
        return self.fwd_bytes + self.rev_bytes

    @property
    def duration_us(self) -> int:
        return self.last_seen_us - self.first_seen_us

    @property
    def half_open(self) -> bool:
        return self.syn_seen and not self.synack_seen

    def flag_count(self, flag: TcpFlag) -> int:
        i = FLAG_ORDER.index(flag)
        return self.fwd_flags[i] + self.rev_flags[i]

    def snapshot(self) -> "FlowRecord":
        return FlowRecord(
            key=self.key,
            src_ip=self.src_ip,
            dst_ip=self.dst_ip,
            src_port=self.src_port,
            dst_port=self.dst_port,
            first_seen_us=self.first_seen_us,
            last_seen_us=self.last_seen_us,
            fwd_packets=self.fwd_packets,
            rev_packets=self.rev_packets,
            fwd_bytes=self.fwd_bytes,
            rev_bytes=self.rev_bytes,
            fwd_flags=list(self.fwd_flags),
            rev_flags=list(self.rev_flags),
            fwd_iat=self.fwd_iat.copy(),
            rev_iat=self.rev_iat.copy(),
            iat=self.iat.copy(),
            fwd_last_us=self.fwd_last_us,
            rev_last_us=self.rev_last_us,
            syn_seen=self.syn_seen,
            synack_seen=self.synack_seen,
            fin_fwd=self.fin_fwd,
            fin_rev=self.fin_rev,
            state=self.state,
            window=self.window,
        )

    def _update(self, packet: PacketRecord, forward: bool) -> None:
        ts = max(packet.timestamp_us, self.last_seen_us)
        if self.packets:
            self.iat.add(float(ts - self.last_seen_us))
        flags = packet.tcp_flags if packet.protocol is Protocol.TCP else 0
        if forward:
            if self.fwd_last_us is not None:
                self.fwd_iat.add(float(max(0, packet.timestamp_us - self.fwd_last_us)))
            self.fwd_last_us = max(packet.timestamp_us, self.fwd_last_us or 0)
            self.fwd_packets += 1
            self.fwd_bytes += packet.length_bytes
            counters = self.fwd_flags
        else:
            if self.rev_last_us is not None:
                self.rev_iat.add(float(max(0, packet.timestamp_us - self.rev_last_us)))
            self.rev_last_us = max(packet.timestamp_us, self.rev_last_us or 0)
            self.rev_packets += 1
            self.rev_bytes += packet.length_bytes
            counters = self.rev_flags
        for i, flag in enumerate(FLAG_ORDER):
            if flags & flag:
                counters[i] += 1
        self.last_seen_us = ts

        if packet.protocol is not Protocol.TCP:
            return
        syn = bool(flags & TcpFlag.SYN)
        ack = bool(flags & TcpFlag.ACK)
        if forward and syn and not ack:
            self.syn_seen = True
        elif not forward and syn and ack and self.syn_seen:
            self.synack_seen = True
        if flags & TcpFlag.FIN:
            if forward:
                self.fin_fwd = True
            else:
                self.fin_rev = True

        # termination precedence: RST, then FIN from both sides
        if flags & TcpFlag.RST:
            self.state = FlowState.CLOSED_RST
        elif self.fin_fwd and self.fin_rev:
            self.state = FlowState.CLOSED_FIN
        elif self.half_open:
            self.state = FlowState.HALF_OPEN
        else:
            self.state = FlowState.ESTABLISHED


def new_flow(key: FlowKey, packet: PacketRecord) -> FlowRecord:
    flow = FlowRecord(
        key=key,
        src_ip=packet.src_ip,
        dst_ip=packet.dst_ip,
        src_port=packet.src_port or 0,
        dst_port=packet.dst_port or 0,
        first_seen_us=packet.timestamp_us,
        last_seen_us=packet.timestamp_us,
    )
    flow._update(packet, forward=True)
    return flow


class IngestResult(NamedTuple):
    flow: FlowRecord | None
    expired: list


@dataclass
class FlowCounters:
    packets_in: int = 0
    accepted: int = 0
    deser: int = 0
    ipv6: int = 0
    reordered: int = 0
    flows_created: int = 0
    flows_expired: int = 0
    flows_closed: int = 0


class FlowShard:
    """Flow table for one shard, kept in least-recently-seen order."""

    def __init__(self):
        self.flows: OrderedDict[FlowKey, FlowRecord] = OrderedDict()

    def expire(self, now_us: int, timeout_us: int) -> list[FlowRecord]:
        out = []
        while self.flows:
            key, flow = next(iter(self.flows.items()))
            if now_us - flow.last_seen_us <= timeout_us:
                break
            del self.flows[key]
            flow.state = FlowState.TIMED_OUT
            out.append(flow)
        return out

    def __len__(self) -> int:
        return len(self.flows)


def _validate(packet: PacketRecord) -> tuple[int, int, int, int]:
    src = ip_to_int(packet.src_ip)
    dst = ip_to_int(packet.dst_ip)
    if not isinstance(packet.protocol, Protocol):
        raise MalformedPacket(f"unknown protocol {packet.protocol!r}")
    if packet.protocol.has_ports:
        if packet.src_port is None or packet.dst_port is None:
            raise MalformedPacket("port-bearing protocol without ports")
        sport, dport = packet.src_port, packet.dst_port
        if not (0 <= sport <= 65535 and 0 <= dport <= 65535):
            raise MalformedPacket("port out of range")
    else:
        sport = dport = 0
    if packet.timestamp_us < 0 or not 0 <= packet.length_bytes <= 65535:
        raise MalformedPacket("timestamp or length out of range")
    return src, dst, sport, dport


def _sort_expired(flows: list[FlowRecord]) -> list[FlowRecord]:
    return sorted(flows, key=lambda f: (f.last_seen_us, f.first_seen_us, f.key.to_bytes()))


class ShardedFlowManager:
    """Routes packets to shards and closes flows on FIN, RST, or inactivity.

    A packet more than ``reorder_budget_us`` older than the newest timestamp
    seen so far is dropped and counted as a deserialization error.
    """

    def __init__(
        self,
        shard_count: int = DEFAULT_SHARDS,
        timeout_us: int = DEFAULT_TIMEOUT_US,
        reorder_budget_us: int = DEFAULT_REORDER_BUDGET_US,
    ):
        if shard_count < 1:
            raise ValueError("shard_count must be >= 1")
        self.shard_count = shard_count
        self.timeout_us = timeout_us
        self.reorder_budget_us = reorder_budget_us
        self.shards = [FlowShard() for _ in range(shard_count)]
        self.counters = FlowCounters()
        self.watermark_us: int | None = None

    def __len__(self) -> int:
        return sum(len(s) for s in self.shards)

    def open_flows(self) -> list[FlowRecord]:
        return [f for shard in self.shards for f in shard.flows.values()]

    def _expire(self, now_us: int) -> list[FlowRecord]:
        expired = []
        for shard in self.shards:
            expired.extend(shard.expire(now_us, self.timeout_us))
        self.counters.flows_expired += len(expired)
        return _sort_expired(expired)

    def ingest(self, packet: PacketRecord) -> IngestResult:
        self.counters.packets_in += 1
        try:
            src, dst, sport, dport = _validate(packet)
        except Ipv6Packet:
            self.counters.ipv6 += 1
            self.counters.deser += 1
            return IngestResult(None, [])
        except (MalformedPacket, TypeError):
            self.counters.deser += 1
            return IngestResult(None, [])

        ts = packet.timestamp_us
        if self.watermark_us is not None and ts < self.watermark_us:
            if self.watermark_us - ts > self.reorder_budget_us:
                self.counters.deser += 1
                return IngestResult(None, [])
            self.counters.reordered += 1
        now = ts if self.watermark_us is None else max(ts, self.watermark_us)
        self.watermark_us = now

        expired = self._expire(now)

        a, b = (src, sport), (dst, dport)
        lo, hi = (a, b) if a <= b else (b, a)
        key = FlowKey(lo[0], lo[1], hi[0], hi[1], packet.protocol)
        shard = self.shards[shard_of(key, self.shard_count)]
        flow = shard.flows.get(key)
        if flow is None:
            flow = new_flow(key, packet)
            shard.flows[key] = flow
            self.counters.flows_created += 1
        else:
            forward = packet.src_ip == flow.src_ip and (packet.src_port or 0) == flow.src_port
            flow._update(packet, forward)
            shard.flows.move_to_end(key)
        self.counters.accepted += 1

        if flow.state in (FlowState.CLOSED_FIN, FlowState.CLOSED_RST):
            del shard.flows[key]
            self.counters.flows_closed += 1
        return IngestResult(flow, expired)

    def expire_all(self, now_us: int | None = None) -> list[FlowRecord]:
        out = []
        for shard in self.shards:
            for flow in shard.flows.values():
                flow.state = FlowState.TIMED_OUT
                out.append(flow)
            shard.flows.clear()
        self.counters.flows_expired += len(out)
        return _sort_expired(out)
