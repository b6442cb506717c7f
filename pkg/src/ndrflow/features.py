"""40-slot flow feature vector.

28 slots are computed from the flow record and its initiator's window
snapshot, one slot encodes TCP handshake state with an in-domain semantic
sentinel, and the last 11 slots are reserved and always carry
:data:`MISSING_FEATURE_SENTINEL`.

Count-like quantities are reported as ``log10(1 + x)`` and ratios as plain
fractions, so every computed slot is non-negative and typical values sit
inside the forest split domain [0.0, 5.1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

from .flows import FlowRecord, Protocol, TcpFlag
from .heuristics import LocalNetworks, WindowStats

SCHEMA_VERSION = 1
FEATURE_COUNT = 40
MISSING_FEATURE_SENTINEL = -9999.0
HALF_OPEN_SENTINEL = 0.5
HANDSHAKE_COMPLETE = 1.0

COMPUTED = "COMPUTED"
MISSING_SENTINEL = "MISSING_SENTINEL"
SEMANTIC_SENTINEL = "SEMANTIC_SENTINEL"

CATEGORIES = (
    "connection frequency",
    "port diversity",
    "TCP flag distribution",
    "inter-arrival timing",
    "burst behavior",
    "destination diversity",
)


class FeatureSpec(NamedTuple):
    name: str
    unit: str
    category: str
    status: str
    range: tuple  # (low, high); high None means unbounded


_LOG = "log10(1+x)"
_RATIO = "fraction"
_BOOL = "indicator"
_UNBOUNDED = (0.0, None)
_UNIT = (0.0, 1.0)

_SLOTS = [
    # connection frequency
    FeatureSpec("fwd_packets", f"{_LOG} packets", CATEGORIES[0], COMPUTED, _UNBOUNDED),
    FeatureSpec("rev_packets", f"{_LOG} packets", CATEGORIES[0], COMPUTED, _UNBOUNDED),
    FeatureSpec("fwd_bytes", f"{_LOG} bytes", CATEGORIES[0], COMPUTED, _UNBOUNDED),
    FeatureSpec("rev_bytes", f"{_LOG} bytes", CATEGORIES[0], COMPUTED, _UNBOUNDED),
    FeatureSpec("duration", f"{_LOG} seconds", CATEGORIES[0], COMPUTED, _UNBOUNDED),
    FeatureSpec("src_window_flows", f"{_LOG} flows per window", CATEGORIES[0], COMPUTED, _UNBOUNDED),
    # port diversity
    FeatureSpec("src_window_distinct_ports", f"{_LOG} ports per window", CATEGORIES[1], COMPUTED, _UNBOUNDED),
    FeatureSpec("dst_port_well_known", _BOOL, CATEGORIES[1], COMPUTED, _UNIT),
    FeatureSpec("dst_port_ephemeral", _BOOL, CATEGORIES[1], COMPUTED, _UNIT),
    FeatureSpec("src_window_smb_syns", f"{_LOG} SYNs per window", CATEGORIES[1], COMPUTED, _UNBOUNDED),
    # TCP flag distribution
    FeatureSpec("syn_ratio", _RATIO, CATEGORIES[2], COMPUTED, _UNIT),
    FeatureSpec("ack_ratio", _RATIO, CATEGORIES[2], COMPUTED, _UNIT),
    FeatureSpec("rst_ratio", _RATIO, CATEGORIES[2], COMPUTED, _UNIT),
    FeatureSpec("fin_ratio", _RATIO, CATEGORIES[2], COMPUTED, _UNIT),
    FeatureSpec("psh_ratio", _RATIO, CATEGORIES[2], COMPUTED, _UNIT),
    FeatureSpec("urg_ratio", _RATIO, CATEGORIES[2], COMPUTED, _UNIT),
    FeatureSpec("src_window_rst_ratio", _RATIO, CATEGORIES[2], COMPUTED, _UNIT),
    FeatureSpec("fwd_syn_packets", f"{_LOG} packets", CATEGORIES[2], COMPUTED, _UNBOUNDED),
    # inter-arrival timing
    FeatureSpec("iat_mean", f"{_LOG} milliseconds", CATEGORIES[3], COMPUTED, _UNBOUNDED),
    FeatureSpec("iat_std", f"{_LOG} milliseconds", CATEGORIES[3], COMPUTED, _UNBOUNDED),
    FeatureSpec("iat_min", f"{_LOG} milliseconds", CATEGORIES[3], COMPUTED, _UNBOUNDED),
    FeatureSpec("iat_max", f"{_LOG} milliseconds", CATEGORIES[3], COMPUTED, _UNBOUNDED),
    FeatureSpec("fwd_iat_mean", f"{_LOG} milliseconds", CATEGORIES[3], COMPUTED, _UNBOUNDED),
    # burst behavior
    FeatureSpec("packet_rate", f"{_LOG} packets/second", CATEGORIES[4], COMPUTED, _UNBOUNDED),
    FeatureSpec("mean_packet_size", f"{_LOG} bytes", CATEGORIES[4], COMPUTED, (0.0, math.log10(65536))),
    FeatureSpec("src_window_packet_rate", f"{_LOG} packets/second", CATEGORIES[4], COMPUTED, _UNBOUNDED),
    # destination diversity
    FeatureSpec("src_window_external_dsts", f"{_LOG} hosts per window", CATEGORIES[5], COMPUTED, _UNBOUNDED),
    FeatureSpec("dst_is_external", _BOOL, CATEGORIES[5], COMPUTED, _UNIT),
    # handshake: 0.5 = never completed, 1.0 = SYN/SYN-ACK observed
    FeatureSpec("tcp_handshake_state", "0.5 incomplete / 1.0 complete", CATEGORIES[2], SEMANTIC_SENTINEL, (0.5, 1.0)),
]
_SLOTS += [
    FeatureSpec(f"reserved_{i:02d}", "reserved", "reserved", MISSING_SENTINEL, (MISSING_FEATURE_SENTINEL,) * 2)
    for i in range(len(_SLOTS), FEATURE_COUNT)
]

HALF_OPEN_SLOT = next(i for i, s in enumerate(_SLOTS) if s.status == SEMANTIC_SENTINEL)
MISSING_SLOTS = tuple(i for i, s in enumerate(_SLOTS) if s.status == MISSING_SENTINEL)
COMPUTED_SLOTS = tuple(i for i, s in enumerate(_SLOTS) if s.status == COMPUTED)
SLOT = {s.name: i for i, s in enumerate(_SLOTS)}


@dataclass(frozen=True)
class FeatureSchema:
    slots: tuple
    schema_version: int = SCHEMA_VERSION

    @property
    def computed_count(self) -> int:
        return sum(s.status == COMPUTED for s in self.slots)

    @property
    def missing_count(self) -> int:
        return sum(s.status == MISSING_SENTINEL for s in self.slots)

    @property
    def semantic_count(self) -> int:
        return sum(s.status == SEMANTIC_SENTINEL for s in self.slots)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.slots]

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "feature_count": len(self.slots),
            "missing_sentinel": MISSING_FEATURE_SENTINEL,
            "slots": [
                {
                    "index": i,
                    "name": s.name,
                    "unit": s.unit,
                    "category": s.category,
                    "status": s.status,
                    "range": list(s.range),
                }
                for i, s in enumerate(self.slots)
            ],
        }
        return json.dumps(doc, indent=2)


_SCHEMA = FeatureSchema(tuple(_SLOTS))


def schema() -> FeatureSchema:
    return _SCHEMA


class FeatureVector(NamedTuple):
    values: tuple
    schema_version: int = SCHEMA_VERSION

    def __getitem__(self, index):
        if isinstance(index, str):
            return self.values[SLOT[index]]
        return self.values[index]

    def __len__(self) -> int:
        return len(self.values)


class FeatureError(ArithmeticError):
    pass


def _log1p10(x: float) -> float:
    return math.log10(1.0 + x)


def _ms(us: float) -> float:
    return us / 1000.0


_DEFAULT_LOCAL = LocalNetworks()


def extract(flow: FlowRecord, window: WindowStats | None = None, local: LocalNetworks | None = None) -> FeatureVector:
    """Pure function of (flow, window). Raises :class:`FeatureError` on a non-finite slot."""
    if flow.packets < 1:
        raise FeatureError("flow has no packets")
    if window is None:
        window = flow.window if isinstance(flow.window, WindowStats) else WindowStats(flow.src_ip, 0, 0)
    local = local or _DEFAULT_LOCAL

    total = flow.packets
    duration_s = flow.duration_us / 1e6
    window_s = max((window.window_end_us - window.window_start_us) / 1e6, 1e-6)
    dst_port = flow.dst_port if flow.protocol.has_ports else 0
    is_tcp = flow.protocol is Protocol.TCP
    fwd_syn = flow.fwd_flags[0]

    values = [
        _log1p10(flow.fwd_packets),
        _log1p10(flow.rev_packets),
        _log1p10(flow.fwd_bytes),
        _log1p10(flow.rev_bytes),
        _log1p10(duration_s),
        _log1p10(window.flow_count),
        _log1p10(window.distinct_dst_port_count),
        1.0 if flow.protocol.has_ports and dst_port < 1024 else 0.0,
        1.0 if flow.protocol.has_ports and dst_port >= 49152 else 0.0,
        _log1p10(window.smb_connection_count),
        flow.flag_count(TcpFlag.SYN) / total,
        flow.flag_count(TcpFlag.ACK) / total,
        flow.flag_count(TcpFlag.RST) / total,
        flow.flag_count(TcpFlag.FIN) / total,
        flow.flag_count(TcpFlag.PSH) / total,
        flow.flag_count(TcpFlag.URG) / total,
        min(max(window.rst_ratio, 0.0), 1.0),
        _log1p10(fwd_syn if is_tcp else 0),
        _log1p10(_ms(flow.iat.mean)),
        _log1p10(_ms(math.sqrt(flow.iat.variance))),
        _log1p10(_ms(flow.iat.min)),
        _log1p10(_ms(flow.iat.max)),
        _log1p10(_ms(flow.fwd_iat.mean)),
        _log1p10(total / duration_s) if flow.duration_us > 0 else 0.0,
        _log1p10(flow.bytes / total),
        _log1p10(window.packet_count / window_s),
        _log1p10(window.distinct_external_dst_count),
        1.0 if local.is_external(flow.dst_ip) else 0.0,
        HANDSHAKE_COMPLETE if flow.synack_seen else HALF_OPEN_SENTINEL,
    ]
    values.extend([MISSING_FEATURE_SENTINEL] * len(MISSING_SLOTS))
    if len(values) != FEATURE_COUNT:
        raise FeatureError(f"feature layout produced {len(values)} slots")
    for i in COMPUTED_SLOTS:
        if not math.isfinite(values[i]) or values[i] < 0.0:
            raise FeatureError(f"slot {i} ({_SLOTS[i].name}) is {values[i]!r}")
    return FeatureVector(tuple(values))
