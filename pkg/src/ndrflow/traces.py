"""Packet trace readers and writers.

Two input formats are supported:

* classic libpcap files (magic ``0xA1B2C3D4``, microsecond timestamps),
  Ethernet or raw-IPv4 link types;
* a text format with one packet per line,
  ``ts_us,src,sport,dst,dport,proto,flags,len``, for handcrafted fixtures.

Frames that cannot be decoded still yield a :class:`PacketRecord` so the flow
engine can count them; undecodable addresses are passed through as the
string ``"malformed"`` or an IPv6 literal.
"""

from __future__ import annotations

import ipaddress
import os
import struct
from collections.abc import Iterable, Iterator

from .flows import PacketRecord, Protocol, TcpFlag

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228

_FLAG_LETTERS = {
    "F": TcpFlag.FIN,
    "S": TcpFlag.SYN,
    "R": TcpFlag.RST,
    "P": TcpFlag.PSH,
    "A": TcpFlag.ACK,
    "U": TcpFlag.URG,
}

MALFORMED = "malformed"


class TraceFormatError(ValueError):
    pass


def parse_flags(text: str) -> int:
    """``"SA"`` -> SYN|ACK. ``"-"``, ``"."`` and ``""`` mean no flags; ``0x12`` is accepted."""
    text = text.strip()
    if text in ("", "-", "."):
        return 0
    if text.lower().startswith("0x"):
        return int(text, 16) & 0xFF
    if text.isdigit():
        return int(text) & 0xFF
    value = 0
    for ch in text.upper():
        try:
            value |= _FLAG_LETTERS[ch]
        except KeyError:
            raise TraceFormatError(f"unknown TCP flag letter {ch!r}") from None
    return value


def format_flags(flags: int) -> str:
    letters = "".join(ch for ch, f in _FLAG_LETTERS.items() if flags & f)
    return letters or "-"


def _port(text: str) -> int | None:
    text = text.strip()
    if text in ("", "-"):
        return None
    return int(text)


def parse_text_line(line: str) -> PacketRecord:
    parts = line.strip().split(",")
    if len(parts) != 8:
        raise TraceFormatError(f"expected 8 fields, got {len(parts)}")
    ts, src, sport, dst, dport, proto, flags, length = parts
    try:
        protocol = Protocol(proto.strip().upper())
    except ValueError:
        protocol = Protocol.OTHER
    return PacketRecord(
        timestamp_us=int(ts),
        src_ip=src.strip(),
        dst_ip=dst.strip(),
        src_port=_port(sport),
        dst_port=_port(dport),
        protocol=protocol,
        tcp_flags=parse_flags(flags),
        length_bytes=int(length),
    )


def read_text_trace(path) -> Iterator[PacketRecord]:
    """Yield packets from a text trace. ``#`` starts a comment line.

    A line that does not parse yields a record with ``src_ip="malformed"``
    so that it is counted rather than silently skipped.
    """
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                yield parse_text_line(line)
            except (TraceFormatError, ValueError):
                yield PacketRecord(0, MALFORMED, MALFORMED, None, None, Protocol.OTHER)


def write_text_trace(path, packets: Iterable[PacketRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# ts_us,src,sport,dst,dport,proto,flags,len\n")
        for p in packets:
            sport = "-" if p.src_port is None else p.src_port
            dport = "-" if p.dst_port is None else p.dst_port
            fh.write(
                f"{p.timestamp_us},{p.src_ip},{sport},{p.dst_ip},{dport},"
                f"{p.protocol.value},{format_flags(p.tcp_flags)},{p.length_bytes}\n"
            )


def _decode_ipv4(data: bytes, ts_us: int) -> PacketRecord:
    if len(data) < 20:
        return PacketRecord(ts_us, MALFORMED, MALFORMED, None, None, Protocol.OTHER)
    version = data[0] >> 4
    if version == 6 and len(data) >= 40:
        src = str(ipaddress.IPv6Address(data[8:24]))
        dst = str(ipaddress.IPv6Address(data[24:40]))
        return PacketRecord(ts_us, src, dst, None, None, Protocol.OTHER)
    if version != 4:
        return PacketRecord(ts_us, MALFORMED, MALFORMED, None, None, Protocol.OTHER)
    ihl = (data[0] & 0x0F) * 4
    total_length = struct.unpack_from("!H", data, 2)[0]
    frag = struct.unpack_from("!H", data, 6)[0]
    proto_num = data[9]
    src = ".".join(str(b) for b in data[12:16])
    dst = ".".join(str(b) for b in data[16:20])
    protocol = Protocol.from_number(proto_num)
    l4 = data[ihl:]
    # non-first fragments carry no transport header; no reassembly
    if frag & 0x1FFF:
        return PacketRecord(ts_us, src, dst, None, None, protocol, 0, total_length)
    if protocol is Protocol.TCP:
        if len(l4) < 14:
            return PacketRecord(ts_us, src, dst, None, None, protocol, 0, total_length)
        sport, dport = struct.unpack_from("!HH", l4, 0)
        return PacketRecord(ts_us, src, dst, sport, dport, protocol, l4[13] & 0x3F, total_length)
    if protocol is Protocol.UDP:
        if len(l4) < 4:
            return PacketRecord(ts_us, src, dst, None, None, protocol, 0, total_length)
        sport, dport = struct.unpack_from("!HH", l4, 0)
        return PacketRecord(ts_us, src, dst, sport, dport, protocol, 0, total_length)
    return PacketRecord(ts_us, src, dst, None, None, protocol, 0, total_length)


def _decode_frame(frame: bytes, linktype: int, ts_us: int) -> PacketRecord:
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return PacketRecord(ts_us, MALFORMED, MALFORMED, None, None, Protocol.OTHER)
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        offset = 14
        if ethertype == 0x8100 and len(frame) >= 18:
            ethertype = struct.unpack_from("!H", frame, 16)[0]
            offset = 18
        if ethertype not in (0x0800, 0x86DD):
            return PacketRecord(ts_us, MALFORMED, MALFORMED, None, None, Protocol.OTHER)
        return _decode_ipv4(frame[offset:], ts_us)
    if linktype in (LINKTYPE_RAW, LINKTYPE_IPV4):
        return _decode_ipv4(frame, ts_us)
    raise TraceFormatError(f"unsupported link type {linktype}")


def read_pcap(path) -> Iterator[PacketRecord]:
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) < 24:
            raise TraceFormatError("truncated pcap global header")
        magic_le = struct.unpack("<I", header[:4])[0]
        if magic_le == PCAP_MAGIC:
            endian = "<"
        elif struct.unpack(">I", header[:4])[0] == PCAP_MAGIC:
            endian = ">"
        else:
            raise TraceFormatError("not a classic microsecond pcap file")
        linktype = struct.unpack(endian + "I", header[20:24])[0]
        record = struct.Struct(endian + "IIII")
        while True:
            rec = fh.read(16)
            if not rec:
                return
            if len(rec) < 16:
                raise TraceFormatError("truncated pcap record header")
            sec, usec, incl_len, _orig_len = record.unpack(rec)
            frame = fh.read(incl_len)
            if len(frame) < incl_len:
                raise TraceFormatError("truncated pcap record")
            yield _decode_frame(frame, linktype, sec * 1_000_000 + usec)


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def encode_packet(p: PacketRecord) -> bytes:
    """Build an Ethernet/IPv4 frame for a packet record (payload zero-filled)."""
    proto_num = {Protocol.TCP: 6, Protocol.UDP: 17, Protocol.ICMP: 1}.get(p.protocol, 253)
    if p.protocol is Protocol.TCP:
        l4 = struct.pack("!HHIIBBHHH", p.src_port or 0, p.dst_port or 0, 0, 0, 5 << 4, p.tcp_flags & 0x3F, 65535, 0, 0)
    elif p.protocol is Protocol.UDP:
        l4 = struct.pack("!HHHH", p.src_port or 0, p.dst_port or 0, 8, 0)
    elif p.protocol is Protocol.ICMP:
        l4 = struct.pack("!BBHI", 8, 0, 0, 0)
    else:
        l4 = b""
    total = max(p.length_bytes, 20 + len(l4))
    payload = l4 + bytes(total - 20 - len(l4))
    src = ipaddress.IPv4Address(p.src_ip).packed
    dst = ipaddress.IPv4Address(p.dst_ip).packed
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, proto_num, 0, src, dst)
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + b"\x08\x00"
    return eth + ip + payload


def write_pcap(path, packets: Iterable[PacketRecord], snaplen: int = 65535) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        for p in packets:
            frame = encode_packet(p)
            sec, usec = divmod(p.timestamp_us, 1_000_000)
            fh.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
            fh.write(frame)


def read_trace(path) -> Iterator[PacketRecord]:
    """Dispatch on content: pcap magic in either byte order, else text."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) == 4 and PCAP_MAGIC in (struct.unpack("<I", head)[0], struct.unpack(">I", head)[0]):
        return read_pcap(path)
    return read_text_trace(path)


def trace_exists(path) -> bool:
    return os.path.isfile(path) and os.access(path, os.R_OK)
