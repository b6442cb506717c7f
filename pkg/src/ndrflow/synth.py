"""Synthetic packet generators for fixtures, replay experiments and model training.

Every generator is deterministic given its arguments (and ``rng`` seed where
one is taken). Scenario builders return packets sorted by timestamp.
"""

from __future__ import annotations

import random

from .flows import PacketRecord, Protocol, TcpFlag

S, A, R, F, P = TcpFlag.SYN, TcpFlag.ACK, TcpFlag.RST, TcpFlag.FIN, TcpFlag.PSH


def _tcp(ts, src, sport, dst, dport, flags, length=60):
    return PacketRecord(int(ts), src, dst, sport, dport, Protocol.TCP, int(flags), length)


def tcp_session(client, cport, server, sport, t0_us, exchanges=3, gap_us=20_000, payload=400):
    """Handshake, ``exchanges`` request/response pairs, then FIN from both sides."""
    t = t0_us
    out = [_tcp(t, client, cport, server, sport, S)]
    t += gap_us
    out.append(_tcp(t, server, sport, client, cport, S | A))
    t += gap_us
    out.append(_tcp(t, client, cport, server, sport, A))
    for _ in range(exchanges):
        t += gap_us
        out.append(_tcp(t, client, cport, server, sport, P | A, 60 + payload // 4))
        t += gap_us
        out.append(_tcp(t, server, sport, client, cport, P | A, 60 + payload))
    t += gap_us
    out.append(_tcp(t, client, cport, server, sport, F | A))
    t += gap_us
    out.append(_tcp(t, server, sport, client, cport, F | A))
    return out


def udp_exchange(client, cport, server, sport, t0_us, rounds=1, gap_us=5_000, length=80):
    out = []
    t = t0_us
    for _ in range(rounds):
        out.append(PacketRecord(int(t), client, server, cport, sport, Protocol.UDP, 0, length))
        t += gap_us
        out.append(PacketRecord(int(t), server, client, sport, cport, Protocol.UDP, 0, length * 2))
        t += gap_us
    return out


def port_scan(src, dst, ports, t0_us, spacing_us=150_000, sport=40000, answered=False):
    """SYN probes to each port. Unanswered by default (filtered host)."""
    out = []
    for i, port in enumerate(ports):
        t = t0_us + i * spacing_us
        out.append(_tcp(t, src, sport + i, dst, port, S, 44))
        if answered:
            out.append(_tcp(t + 500, dst, port, src, sport + i, R | A, 40))
    return out


def smb_burst(src, targets, t0_us, spacing_us=200_000, sport=50000):
    """Full SMB sessions (port 445) to each target in quick succession."""
    out = []
    for i, target in enumerate(targets):
        out.extend(tcp_session(src, sport + i, target, 445, t0_us + i * spacing_us, exchanges=2, gap_us=5_000, payload=900))
    return out


def syn_flood(sources, dst, dport, t0_us, count, spacing_us=200):
    out = []
    for i in range(count):
        src = sources[i % len(sources)]
        out.append(_tcp(t0_us + i * spacing_us, src, 1024 + (i * 7919) % 60000, dst, dport, S, 40))
    return out


def merge(*streams) -> list[PacketRecord]:
    packets = [p for s in streams for p in s]
    packets.sort(key=lambda p: p.timestamp_us)
    return packets


def benign_office(rng: random.Random, t0_us: int, duration_s: float, clients=8, servers=None, sessions_per_client=6):
    """Internal clients making a few web sessions and DNS lookups each.

    Each client talks to at most three external servers inside any 10 s span,
    uses only well-known destination ports and never sends RST.
    """
    servers = servers or ["93.184.216.34", "151.101.1.69", "142.250.74.110"]
    span = int(duration_s * 1_000_000)
    streams = []
    for c in range(clients):
        client = f"10.1.0.{10 + c}"
        for k in range(sessions_per_client):
            start = t0_us + rng.randrange(0, max(1, span - 2_000_000))
            server = servers[(c + k) % len(servers)]
            cport = 32768 + c * 512 + k * 3
            if rng.random() < 0.75:
                streams.append(
                    tcp_session(client, cport, server, 443, start, exchanges=rng.randint(1, 4), gap_us=rng.randint(5_000, 60_000))
                )
            else:
                streams.append(udp_exchange(client, cport + 1, "10.1.0.2", 53, start, rounds=1))
    return merge(*streams)
