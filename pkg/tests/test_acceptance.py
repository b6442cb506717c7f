"""Acceptance gate: one test per criterion, each at its stated tolerance and budget."""

import hashlib
import math
import os
import random
import time
from concurrent.futures import ProcessPoolExecutor

import pytest

from acceptance_report import criterion
from fuzzing import fuzz
from oracles import chain_name_scanner, forest_score, random_forest_doc, random_vector, window_oracle
from ndrflow.errors import AuthenticationError, IntegrityError, SecurityViolation
from ndrflow.evaluation import EvalReport, compute_memory_mb
from ndrflow.features import MISSING_SLOTS, SLOT, extract
from ndrflow.flows import PacketRecord, Protocol
from ndrflow.forest import CLASS_ORDER, AttackClass, ThresholdTable, decide, measure_latency, model_from_dict, predict
from ndrflow.heuristics import IP_VELOCITY, PORT_SCAN, RST_RATIO, SMB_CONNS, HeuristicConfig, WindowStats, evaluate
from ndrflow.pipeline import PipelineConfig, replay
from ndrflow.reference import reference_models
from ndrflow.response import EventRecord, emit_event, parse_event, read_verified_log, render_block, validate_chain_name, verify_event
from ndrflow.safepath import resolve_config, resolve_seed
from ndrflow.synth import benign_office, merge, port_scan, smb_burst
from ndrflow.transport import ChannelEndpoint, Direction, hkdf_sha256, open_frame

MAX_INT64 = 2**63 - 1
LOG_KEY = bytes(range(32))


def test_c01_metric_arithmetic():
    with criterion(1, "metric arithmetic tp=646 fp=2 fn=0 tn=12075", 1.0):
        r = EvalReport(646, 2, 0, 12075)
        assert abs(r.precision - 0.9969) <= 1e-4
        assert r.recall == 1.0
        assert abs(r.f1 - 0.9985) <= 1e-4


def test_c02_dual_score_law():
    with criterion(2, "dual-score law over 10,000 score pairs", 5.0):
        rng = random.Random(2)
        thresholds = ThresholdTable()
        for _ in range(10_000):
            fast = rng.choice((0.0, 1.0, rng.random()))
            ml = {c: rng.choice((0.0, rng.random(), thresholds[c], 1.0)) for c in CLASS_ORDER}
            d = decide(fast, ml, thresholds)
            for c in CLASS_ORDER:
                assert d.final_scores[c] == max(fast, ml[c])
            assert d.alert == any(d.final_scores[c] >= thresholds[c] for c in CLASS_ORDER)
            bump = rng.randrange(5)
            if bump == 4:
                after = decide(fast + 0.01, ml, thresholds)
            else:
                ml2 = dict(ml)
                ml2[CLASS_ORDER[bump]] += 0.01
                after = decide(fast, ml2, thresholds)
            assert after.alert or not d.alert


def test_c03_sentinel_neutrality():
    with criterion(3, "sentinel neutrality, 100 forests x 100 vectors", 30.0):
        rng = random.Random(3)
        for _ in range(100):
            model = model_from_dict(random_forest_doc(rng))
            for _ in range(100):
                x = random_vector(rng, MISSING_SLOTS)
                base = predict(model, x)
                y = list(x)
                for slot in rng.sample(MISSING_SLOTS, rng.randint(1, len(MISSING_SLOTS))):
                    y[slot] = -rng.choice((5e-324, 1e-6, rng.random(), rng.uniform(1, 1e9), 1e308, math.inf))
                assert predict(model, y) == base


def test_c04_forest_oracle():
    with criterion(4, "predict equals brute-force walker on 100 pairs", 10.0):
        rng = random.Random(4)
        for _ in range(100):
            doc = random_forest_doc(rng)
            x = random_vector(rng, MISSING_SLOTS)
            assert predict(model_from_dict(doc), x) == forest_score(doc, x)


def test_c05_heuristic_boundaries():
    with criterion(5, "heuristic boundaries, 8 cases at defaults", 1.0):
        cfg = HeuristicConfig()
        assert (cfg.ip_velocity_threshold, cfg.smb_conns_threshold, cfg.port_scan_threshold, cfg.rst_ratio_threshold) == (5, 3, 10, 0.20)
        base = dict(src_ip="10.0.0.1", window_start_us=0, window_end_us=10_000_000)
        cases = [
            ("distinct_external_dst_count", 5, 6, IP_VELOCITY),
            ("smb_connection_count", 3, 4, SMB_CONNS),
            ("distinct_dst_port_count", 10, 11, PORT_SCAN),
            ("rst_ratio", math.nextafter(0.20, 0.0), 0.20, RST_RATIO),
        ]
        passed = 0
        for field, below, at, name in cases:
            assert evaluate(WindowStats(**base, **{field: below}), cfg) == (0.0, frozenset())
            passed += 1
            assert evaluate(WindowStats(**base, **{field: at}), cfg) == (1.0, frozenset({name}))
            passed += 1
        assert passed == 8


# --- criterion 6 -------------------------------------------------------------

T0 = 1_700_000_000_000_000
SCANNER, SMB_SRC = "10.1.0.66", "10.1.0.77"


def c06_trace():
    rng = random.Random(6)
    attack = merge(
        port_scan(SCANNER, "10.1.0.200", range(20, 34), T0 + 2_000_000, spacing_us=120_000, answered=True),
        smb_burst(SMB_SRC, [f"10.1.3.{i}" for i in range(1, 8)], T0 + 5_000_000, spacing_us=180_000),
    )
    benign = benign_office(rng, T0, 45, clients=16, sessions_per_client=20)
    packets = merge(benign, attack)[:2000]
    assert set(map(id, attack)) <= set(map(id, packets)), "attack must sit inside the first 2,000 packets"
    return packets


def c06_models():
    smb = SLOT["src_window_smb_syns"]
    ransomware = {
        "class": "RANSOMWARE", "feature_count": 40, "version": "acceptance",
        "trees": [{"nodes": [{"feature": smb, "threshold": 0.65, "left": 1, "right": 2}, {"leaf": 0.0}, {"leaf": 1.0}]}],
    }
    models = {AttackClass.RANSOMWARE: model_from_dict(ransomware)}
    for c in (AttackClass.DDOS, AttackClass.TRAFFIC, AttackClass.INTERNAL):
        models[c] = model_from_dict({"class": c.value, "feature_count": 40, "version": "acceptance",
                                     "trees": [{"nodes": [{"leaf": 0.0}]}]})
    return models


def c06_oracle(packets):
    """Flows by unordered five-tuple (no tuple is reused and no flow idles 10 s);
    every flow is judged on its initiator's window at the flow's last packet."""
    flows = {}
    for p in packets:
        k = frozenset({(p.src_ip, p.src_port), (p.dst_ip, p.dst_port)}), p.protocol
        f = flows.setdefault(k, {"src": p.src_ip, "dst": p.dst_ip, "last": p.timestamp_us})
        f["last"] = p.timestamp_us
    thresholds = {"RANSOMWARE": 0.85, "DDOS": 0.90, "TRAFFIC": 0.80, "INTERNAL": 0.85}
    buckets = {"RANSOMWARE": 60, "DDOS": 10, "INTERNAL": 30, "TRAFFIC": 30}
    alerts = []
    for f in flows.values():
        w = window_oracle(packets, f["src"], f["last"])
        fired = set()
        if w["external_dsts"] > 5:
            fired.add("ip_velocity")
        if w["smb"] > 3:
            fired.add("smb_conns")
        if w["ports"] > 10:
            fired.add("port_scan")
        if w["rst_ratio"] >= 0.20:
            fired.add("rst_ratio")
        ml_ransom = 1.0 if math.log10(1 + w["smb"]) > 0.65 else 0.0
        if ml_ransom >= thresholds["RANSOMWARE"]:
            cls = "RANSOMWARE"
        elif fired:
            cls = max(thresholds, key=lambda c: (1.0 - thresholds[c], -list(thresholds).index(c)))
        else:
            continue
        bucket = f["last"] // (buckets[cls] * 1_000_000)
        tid = hashlib.sha256(f"{f['src']}|{f['dst']}|{cls}|{bucket}".encode()).hexdigest()
        alerts.append((f["last"], f["src"], f["dst"], cls, frozenset(fired), tid))
    return sorted(alerts)


def test_c06_end_to_end_replay():
    with criterion(6, "2,000-packet scripted replay matches oracle alert set", 10.0):
        packets = c06_trace()
        assert len(packets) == 2000
        expected = c06_oracle(packets)
        cfg = lambda: PipelineConfig(models=c06_models(), seed=bytes(32), log_key=LOG_KEY)  # noqa: E731
        a = replay(packets, cfg())
        b = replay(packets, cfg())
        got = sorted((x.timestamp_us, x.src_ip, x.dst_ip, x.attack_class, x.triggered, x.trace_id) for x in a.alerts)
        assert got == expected
        assert {x[1] for x in expected} == {SCANNER, SMB_SRC}
        assert any(PORT_SCAN in x[4] for x in expected) and any(SMB_CONNS in x[4] for x in expected)
        assert a.stats.errors == {"deser": 0, "feat": 0, "inf": 0}
        log_a = "".join(r + "\n" for r in a.event_rows).encode()
        log_b = "".join(r + "\n" for r in b.event_rows).encode()
        assert log_a == log_b and log_a
        assert {parse_event(r).trace_id for r in a.event_rows} == {x[5] for x in expected}


def test_c07_hkdf_polarity():
    with criterion(7, "channel-scoped round trip passes; component-scoped receiver fails 1000/1000", 5.0):
        seed = bytes(range(50, 82))
        channel = "fast-detector-to-ml-detector"
        tx = ChannelEndpoint(seed, channel, Direction.TX)
        rx = ChannelEndpoint(seed, channel, Direction.TX)
        rng = random.Random(7)
        for _ in range(1000):
            m = rng.randbytes(rng.randrange(1, 256))
            assert rx.open(tx.seal(m)) == m
        wrong = hkdf_sha256(seed, b"ml-defender:ml-detector:v1:rx")
        failures = 0
        for _ in range(1000):
            try:
                open_frame(wrong, tx.seal(rng.randbytes(64)))
            except AuthenticationError:
                failures += 1
        assert failures == 1000


def test_c08_safe_path(tmp_path):
    seconds = float(os.environ.get("NDRFLOW_FUZZ_SECONDS", "60"))
    with criterion(8, f"safe-path named cases plus {seconds:g} s fuzz per primitive, zero crashes"):
        root = os.path.realpath(tmp_path) + "/ml-defender/"
        os.makedirs(root + "fd")
        seed = root + "seed.bin"
        with open(seed, "wb") as fh:
            fh.write(os.urandom(32))
        os.chmod(seed, 0o400)
        os.symlink(seed, root + "seed-link.bin")
        with pytest.raises(SecurityViolation, match="symlink"):
            resolve_seed(root + "seed-link.bin", root)
        loose = root + "loose.bin"
        with open(loose, "wb") as fh:
            fh.write(os.urandom(32))
        os.chmod(loose, 0o644)
        with pytest.raises(SecurityViolation):
            resolve_seed(loose, root)
        with pytest.raises(SecurityViolation):
            resolve_config("/nonexistent-ml-defender/../etc/shadow", "/nonexistent-ml-defender/")
        target = root + "real-config.json"
        with open(target, "w") as fh:
            fh.write("{}")
        os.symlink(target, root + "fd/config.json")
        assert resolve_config(root + "fd/config.json", root) == target

        names = ["resolve", "resolve_seed", "resolve_config"]
        with ProcessPoolExecutor(max_workers=3) as pool:
            results = list(pool.map(fuzz, names, [seconds] * 3, [81, 82, 83]))
        for name, counts, crashes in results:
            print(f"  fuzz {name}: {sum(counts.values())} inputs in {seconds:g}s {counts}")
            assert crashes == [], crashes
            assert counts.get("crash", 0) == 0 and counts["outside"] == 0


SHELL_META = set(";|&$`<>()\\'\"\n\r\t *?[]{}!#~")


def test_c09_chain_allowlist():
    with criterion(9, "chain-name allowlist, 10,000 random byte strings, argv hygiene"):
        assert validate_chain_name("ARGUS")
        assert not validate_chain_name("ARGUS; rm -rf /")
        rng = random.Random(9)
        alphabet = b"ABCxyz019_-;| $`\n\x00\xff"
        for i in range(10_000):
            if i % 2:
                data = bytes(rng.choice(alphabet) for _ in range(rng.randrange(0, 40)))
            else:
                data = rng.randbytes(rng.randrange(0, 4097))
            assert validate_chain_name(data) == chain_name_scanner(data)
            text = data.decode("latin-1")
            ip = f"10.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(256)}"
            if validate_chain_name(text):
                action = render_block(ip, text)
                assert len(action.argv) == 7
                assert all(not (SHELL_META & set(arg)) for arg in action.argv)
            else:
                with pytest.raises(SecurityViolation):
                    render_block(ip, text)


def test_c10_memory_never_negative():
    with criterion(10, "compute_memory_mb never negative on 28 extreme combinations"):
        combos = [
            (pages, size)
            for size in (4096, 8192, 16384, 65536)
            for pages in (0, 1, 1000, MAX_INT64 // 65536, MAX_INT64 // 16384, MAX_INT64 // 8192, MAX_INT64 // 4096)
        ]
        assert len(combos) == 28
        for pages, size in combos:
            v = compute_memory_mb(pages, size)
            assert v >= 0.0 and math.isfinite(v)
        assert compute_memory_mb(MAX_INT64 // 4096, 8192) > 0


def test_c11_log_integrity(tmp_path):
    with criterion(11, "every single-byte mutation of a 1,000-row log is detected"):
        rng = random.Random(11)
        rows = []
        for i in range(1000):
            cls = rng.choice(CLASS_ORDER).value
            ev = EventRecord(T0 + i * 1000, os.urandom(32).hex(), f"10.0.{i // 256}.{i % 256}", "10.9.9.9", cls,
                             rng.choice((0.0, 1.0)), rng.random(), rng.random(), rng.choice(("ALERT", "BLOCK_DRYRUN")))
            rows.append(emit_event(ev, LOG_KEY).encode())
        path = tmp_path / "events.csv"
        path.write_bytes(b"".join(r + b"\n" for r in rows))
        assert len(read_verified_log(path, LOG_KEY)) == 1000
        for r, row in enumerate(rows):
            for i in range(len(row)):
                m = bytearray(row)
                m[i] = (m[i] + rng.randrange(1, 256)) % 256
                assert not verify_event(bytes(m), LOG_KEY), (r, i)
        data = path.read_bytes()
        for _ in range(300):
            i = rng.randrange(len(data))
            m = bytearray(data)
            m[i] = (m[i] + rng.randrange(1, 256)) % 256
            path.write_bytes(bytes(m))
            with pytest.raises(IntegrityError):
                read_verified_log(path, LOG_KEY)


def _burst(n, gap_us):
    out = []
    for i in range(n):
        src = f"10.20.{i // 250 % 250}.{i % 250 + 1}"
        out.append(PacketRecord(T0 + i * gap_us, src, "10.30.0.1", 20000 + i % 40000, 80, Protocol.TCP, 0x18, 200))
    return out


def test_c12_queue_drain():
    with criterion(12, "10x burst: blocking drains with zero drops; strict counts drops"):
        service_us = 200  # sustainable rate 5,000 packets/s on the flow stage
        packets = _burst(6000, service_us // 10)
        base = dict(seed=bytes(32), log_key=LOG_KEY, service_time_us={"flow": service_us})
        blocking = replay(packets, PipelineConfig(**base), rate_multiplier=1.0).stats
        offered = blocking.packets_in / max(blocking.elapsed_seconds - blocking.drain_seconds, 1e-9)
        print(f"  offered {offered:,.0f} pkt/s vs sustainable {1e6 / service_us:,.0f} pkt/s; "
              f"drain {blocking.drain_seconds:.3f}s; high water {blocking.high_water}")
        assert sum(blocking.drops.values()) == 0
        assert blocking.flow_packets == blocking.packets_in == 6000
        assert math.isfinite(blocking.drain_seconds) and blocking.drain_seconds > 0
        assert max(blocking.high_water.values()) <= 4096

        strict = replay(packets, PipelineConfig(bounded_strict=True, **base), rate_multiplier=1.0)
        s = strict.stats
        assert s.dropped_packets > 0 and sum(s.drops.values()) >= s.dropped_packets
        assert s.flow_packets + s.dropped_packets + s.errors["deser"] == s.packets_in
        assert s.errors == {"deser": 0, "feat": 0, "inf": 0}
        assert all(verify_event(r, LOG_KEY) for r in strict.event_rows)


def test_c13_latency_protocol():
    with criterion(13, "per-class mean latency over >=1,000 predict calls"):
        rng = random.Random(13)
        packets = merge(benign_office(rng, T0, 20), smb_burst("10.2.0.4", [f"10.1.1.{i}" for i in range(6)], T0 + 1_000_000))
        flows = replay(packets, PipelineConfig(seed=bytes(32), log_key=LOG_KEY), keep_flows=True).flows
        vectors = [extract(f, f.window) for f in flows]
        start = time.perf_counter()
        summary = measure_latency(reference_models(), vectors, 1000).summary()
        print(f"  {summary} ({time.perf_counter() - start:.2f}s)")
        assert set(summary) == {c.value for c in CLASS_ORDER}
        for row in summary.values():
            assert row["calls"] >= 1000 and row["mean_us"] > 0
