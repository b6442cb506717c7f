import struct

import pytest

from ndrflow.flows import PacketRecord, Protocol, TcpFlag
from ndrflow.traces import (
    MALFORMED,
    TraceFormatError,
    format_flags,
    parse_flags,
    parse_text_line,
    read_pcap,
    read_trace,
    write_pcap,
    write_text_trace,
)

PACKETS = [
    PacketRecord(1_000_000, "10.0.0.1", "93.184.216.34", 40000, 443, Protocol.TCP, int(TcpFlag.SYN), 60),
    PacketRecord(1_000_250, "93.184.216.34", "10.0.0.1", 443, 40000, Protocol.TCP, int(TcpFlag.SYN | TcpFlag.ACK), 60),
    PacketRecord(1_001_000, "10.0.0.1", "10.0.0.2", 5353, 53, Protocol.UDP, 0, 80),
    PacketRecord(1_002_000, "10.0.0.1", "10.0.0.9", None, None, Protocol.ICMP, 0, 84),
]


@pytest.mark.parametrize(
    "text,value",
    [("S", 0x02), ("SA", 0x12), ("FA", 0x11), ("-", 0), ("", 0), ("0x14", 0x14), ("18", 18), ("RPAU", 0x3C)],
)
def test_parse_flags(text, value):
    assert parse_flags(text) == value


def test_unknown_flag_letter():
    with pytest.raises(TraceFormatError):
        parse_flags("SX")


def test_format_roundtrip():
    for v in range(64):
        assert parse_flags(format_flags(v)) == v


def test_text_line():
    p = parse_text_line("5,10.0.0.1,1000,10.0.0.2,80,tcp,SA,60")
    assert p == PacketRecord(5, "10.0.0.1", "10.0.0.2", 1000, 80, Protocol.TCP, 0x12, 60)


def test_text_roundtrip(tmp_path):
    path = tmp_path / "t.txt"
    write_text_trace(path, PACKETS)
    assert list(read_trace(path)) == PACKETS


def test_text_malformed_line_is_counted(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("# header\n1,10.0.0.1,1,10.0.0.2,2,TCP,S,60\nnot a packet\n")
    out = list(read_trace(path))
    assert len(out) == 2 and out[1].src_ip == MALFORMED


def test_pcap_roundtrip(tmp_path):
    path = tmp_path / "t.pcap"
    write_pcap(path, PACKETS)
    assert list(read_trace(path)) == PACKETS


def test_pcap_big_endian_header(tmp_path):
    path = tmp_path / "le.pcap"
    write_pcap(path, PACKETS[:1])
    data = path.read_bytes()
    magic, vmaj, vmin, tz, sig, snap, link = struct.unpack("<IHHiIII", data[:24])
    ts, us, incl, orig = struct.unpack("<IIII", data[24:40])
    be = struct.pack(">IHHiIII", magic, vmaj, vmin, tz, sig, snap, link) + struct.pack(">IIII", ts, us, incl, orig) + data[40:]
    bpath = tmp_path / "be.pcap"
    bpath.write_bytes(be)
    assert list(read_pcap(bpath)) == PACKETS[:1]
