"""Rule-based fast detector over a per-source sliding window.

Four heuristics are evaluated against :class:`WindowStats`. Count heuristics
fire when the observed count is strictly greater than the threshold (the
threshold is the largest tolerated value); the RST ratio fires when the ratio
is greater than or equal to its threshold.
"""

from __future__ import annotations

import ipaddress
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, fields

from .errors import ConfigError
from .flows import PacketRecord, Protocol, TcpFlag, ip_to_int

IP_VELOCITY = "ip_velocity"
SMB_CONNS = "smb_conns"
PORT_SCAN = "port_scan"
RST_RATIO = "rst_ratio"
HEURISTICS = (IP_VELOCITY, SMB_CONNS, PORT_SCAN, RST_RATIO)

SMB_PORTS = frozenset({445, 139})
DEFAULT_LOCAL_NETWORKS = ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16")


@dataclass(frozen=True)
class HeuristicConfig:
    ip_velocity_threshold: int = 5
    smb_conns_threshold: int = 3
    port_scan_threshold: int = 10
    rst_ratio_threshold: float = 0.20
    window_seconds: float = 10.0

    def __post_init__(self):
        for name in ("ip_velocity_threshold", "smb_conns_threshold", "port_scan_threshold"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        r = self.rst_ratio_threshold
        if isinstance(r, bool) or not isinstance(r, (int, float)) or not (0.0 < r <= 1.0):
            raise ConfigError(f"rst_ratio_threshold must lie in (0, 1], got {r!r}")
        w = self.window_seconds
        if isinstance(w, bool) or not isinstance(w, (int, float)) or not (w > 0 and math.isfinite(w)):
            raise ConfigError(f"window_seconds must be a positive number, got {w!r}")

    @property
    def window_us(self) -> int:
        return int(round(self.window_seconds * 1_000_000))

    @classmethod
    def from_mapping(cls, data) -> "HeuristicConfig":
        if not isinstance(data, dict):
            raise ConfigError("heuristic configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown heuristic field(s): {', '.join(unknown)}")
        return cls(**data)


def load_config(path) -> HeuristicConfig:
    """Parse a heuristic threshold file; absent fields take the defaults.

    ``path`` must already have been vetted with ``safepath.resolve_config``.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed heuristic config {path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read heuristic config {path}: {exc}") from None
    return HeuristicConfig.from_mapping(data)


@dataclass(frozen=True)
class WindowStats:
    src_ip: str
    window_start_us: int
    window_end_us: int
    distinct_external_dst_count: int = 0
    smb_connection_count: int = 0
    distinct_dst_port_count: int = 0
    rst_ratio: float = 0.0
    flow_count: int = 0
    packet_count: int = 0
    tcp_packet_count: int = 0

    @classmethod
    def empty(cls, src_ip: str = "0.0.0.0", end_us: int = 0, window_us: int = 10_000_000) -> "WindowStats":
        return cls(src_ip, end_us - window_us, end_us)


def evaluate(stats: WindowStats, config: HeuristicConfig) -> tuple[float, frozenset]:
    """Binary fast score plus the names of every heuristic that fired."""
    fired = set()
    if stats.distinct_external_dst_count > config.ip_velocity_threshold:
        fired.add(IP_VELOCITY)
    if stats.smb_connection_count > config.smb_conns_threshold:
        fired.add(SMB_CONNS)
    if stats.distinct_dst_port_count > config.port_scan_threshold:
        fired.add(PORT_SCAN)
    if stats.rst_ratio >= config.rst_ratio_threshold:
        fired.add(RST_RATIO)
    return (1.0 if fired else 0.0), frozenset(fired)


class LocalNetworks:
    def __init__(self, prefixes=DEFAULT_LOCAL_NETWORKS):
        try:
            nets = [ipaddress.IPv4Network(p, strict=False) for p in prefixes]
        except ValueError as exc:
            raise ConfigError(f"bad local network prefix: {exc}") from None
        self._ranges = [(int(n.network_address), int(n.broadcast_address)) for n in nets]
        self.prefixes = tuple(str(n) for n in nets)

    def is_external(self, ip) -> bool:
        value = ip_to_int(ip)
        return not any(lo <= value <= hi for lo, hi in self._ranges)


class _SourceWindow:
    """Timestamped event deques for one source with running distinct counts."""

    __slots__ = ("packets", "connections", "smb", "dst_counts", "port_counts", "tcp", "rst")

    def __init__(self):
        self.packets: deque = deque()  # (ts, is_tcp, is_rst)
        self.connections: deque = deque()  # (ts, external dst or None, dst port)
        self.smb: deque = deque()  # ts of SYNs towards SMB ports
        self.dst_counts: Counter = Counter()
        self.port_counts: Counter = Counter()
        self.tcp = 0
        self.rst = 0

    def evict(self, cutoff_us: int) -> None:
        while self.packets and self.packets[0][0] <= cutoff_us:
            _, is_tcp, is_rst = self.packets.popleft()
            self.tcp -= is_tcp
            self.rst -= is_rst
        while self.connections and self.connections[0][0] <= cutoff_us:
            _, dst, port = self.connections.popleft()
            if dst is not None:
                self.dst_counts[dst] -= 1
                if not self.dst_counts[dst]:
                    del self.dst_counts[dst]
            self.port_counts[port] -= 1
            if not self.port_counts[port]:
                del self.port_counts[port]
        while self.smb and self.smb[0] <= cutoff_us:
            self.smb.popleft()

    def empty(self) -> bool:
        return not (self.packets or self.connections or self.smb)


class WindowTracker:
    """True sliding window per source IP over the trailing ``window_seconds``.

    An event at time ``t`` is inside the window ending at ``now`` iff
    ``now - window < t <= now``.
    """

    def __init__(self, window_seconds: float = 10.0, local_networks: LocalNetworks | None = None):
        self.window_us = int(round(window_seconds * 1_000_000))
        self.local = local_networks or LocalNetworks()
        self._sources: dict[str, _SourceWindow] = {}
        self._last_sweep_us = 0

    def observe(self, packet: PacketRecord, new_flow: bool) -> None:
        ts = packet.timestamp_us
        win = self._sources.get(packet.src_ip)
        if win is None:
            win = self._sources[packet.src_ip] = _SourceWindow()
        is_tcp = packet.protocol is Protocol.TCP
        is_rst = is_tcp and bool(packet.tcp_flags & TcpFlag.RST)
        win.packets.append((ts, int(is_tcp), int(is_rst)))
        win.tcp += is_tcp
        win.rst += is_rst
        if new_flow:
            dst = packet.dst_ip if self.local.is_external(packet.dst_ip) else None
            port = packet.dst_port or 0
            win.connections.append((ts, dst, port))
            if dst is not None:
                win.dst_counts[dst] += 1
            win.port_counts[port] += 1
        if is_tcp and packet.dst_port in SMB_PORTS:
            if packet.tcp_flags & TcpFlag.SYN and not packet.tcp_flags & TcpFlag.ACK:
                win.smb.append(ts)
        self._maybe_sweep(ts)

    def _maybe_sweep(self, now_us: int) -> None:
        # bound memory: drop idle sources once per window length
        if now_us - self._last_sweep_us < self.window_us:
            return
        self._last_sweep_us = now_us
        cutoff = now_us - self.window_us
        for src in list(self._sources):
            win = self._sources[src]
            win.evict(cutoff)
            if win.empty():
                del self._sources[src]

    def stats(self, src_ip: str, now_us: int) -> WindowStats:
        start = now_us - self.window_us
        win = self._sources.get(src_ip)
        if win is None:
            return WindowStats(src_ip, start, now_us)
        win.evict(start)
        ratio = win.rst / win.tcp if win.tcp else 0.0
        return WindowStats(
            src_ip=src_ip,
            window_start_us=start,
            window_end_us=now_us,
            distinct_external_dst_count=len(win.dst_counts),
            smb_connection_count=len(win.smb),
            distinct_dst_port_count=len(win.port_counts),
            rst_ratio=ratio,
            flow_count=len(win.connections),
            packet_count=len(win.packets),
            tcp_packet_count=win.tcp,
        )
