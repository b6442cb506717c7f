"""Command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 security violation, 4 integrity failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import random
import sys

from . import synth
from .config import deployment_root, load_deployment, read_key_material
from .errors import ConfigError, NdrError
from .evaluation import evaluate, load_ground_truth, read_scores_csv, threshold_sweep
from .features import extract, schema
from .forest import measure_latency
from .pipeline import STAGES, PipelineConfig, replay
from .response import EventLog, read_verified_log
from .safepath import resolve_seed
from .traces import TraceFormatError, read_trace, write_pcap, write_text_trace

log = logging.getLogger("ndrflow")


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _log_key(args, deployment):
    if getattr(args, "log_key", None):
        root = deployment_root(args.root)
        return read_key_material(resolve_seed(args.log_key, root))
    if deployment is not None and deployment.pipeline.log_key is not None:
        return deployment.pipeline.log_key
    return None


def cmd_replay(args) -> int:
    deployment = load_deployment(args.config, args.root) if args.config else None
    cfg = deployment.pipeline if deployment else PipelineConfig()
    if args.reference_models and not cfg.models:
        from .reference import reference_models

        cfg.models = reference_models()
    cfg.enforce = args.enforce
    cfg.bounded_strict = args.bounded_strict
    key = _log_key(args, deployment)
    if key is None:
        key = os.urandom(32)
        log.warning("no log key configured; using an ephemeral key, the event log cannot be verified later")
    cfg.log_key = key
    if cfg.seed is None:
        cfg.seed = os.urandom(32)

    log_path = args.log or (deployment.log_path if deployment else None)
    header = args.header or (deployment.log_header if deployment else False)
    try:
        packets = list(read_trace(args.trace))
    except (OSError, TraceFormatError) as exc:
        raise NdrError(f"unreadable trace {args.trace}: {exc}") from None
    rate = None if args.as_fast_as_possible else args.rate

    event_log = EventLog(log_path, key, header=header) if log_path else None
    try:
        result = replay(packets, cfg, rate, event_log)
    finally:
        if event_log is not None:
            event_log.close()
    stats = result.stats

    out = sys.stdout
    for k, v in _flatten(stats.as_dict()):
        out.write(f"{k}\t{v}\n")
    out.write(stats.errors_line() + "\n")
    if log_path is None:
        for row in result.event_rows:
            out.write(row + "\n")

    if args.report_dir:
        from .plotting import plot_latency, plot_queues

        os.makedirs(args.report_dir, exist_ok=True)
        _write_rows(
            os.path.join(args.report_dir, "stages.csv"),
            ["stage", "high_water", "drops"],
            [[s, stats.high_water[s], stats.drops[s]] for s in STAGES],
        )
        _write_rows(
            os.path.join(args.report_dir, "alerts.csv"),
            ["ts_us", "src", "dst", "class", "triggered", "block", "trace_id"],
            [[a.timestamp_us, a.src_ip, a.dst_ip, a.attack_class, "|".join(sorted(a.triggered)), int(a.block), a.trace_id]
             for a in result.alerts],
        )
        plot_queues(stats, os.path.join(args.report_dir, "queues.png"))
        if stats.latency:
            plot_latency(stats.latency, os.path.join(args.report_dir, "latency.png"))
    return 0


def cmd_evaluate(args) -> int:
    deployment = load_deployment(args.config, args.root) if args.config else None
    key = _log_key(args, deployment)
    if key is None:
        raise ConfigError("evaluate needs a log key (--log-key or a config with keys)")
    events = read_verified_log(args.events, key)
    truth = load_ground_truth(args.truth, args.total_events)
    if not truth.malicious_ips:
        log.warning("ground truth is empty")
    report = evaluate(events, truth, args.match)
    for k, v in report.as_dict().items():
        sys.stdout.write(f"{k}\t{v:.4f}\n" if isinstance(v, float) else f"{k}\t{v}\n")
    return 0


def _thresholds(text):
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty threshold list")
    return values


def cmd_sweep(args) -> int:
    try:
        scores, labels, span = read_scores_csv(args.scores)
    except (OSError, ValueError, IndexError) as exc:
        raise ConfigError(f"cannot read scores {args.scores}: {exc}") from None
    hours = args.hours or span
    if not hours:
        raise ConfigError("capture duration unknown: pass --hours or include a ts_us column")
    table = threshold_sweep(scores, labels, args.thresholds, hours, args.precision_min, args.recall_min)
    sys.stdout.write(table.to_csv())
    sys.stdout.write(f"# gate precision>={args.precision_min} recall>={args.recall_min}: "
                     f"{'satisfied' if table.gate_satisfied else 'not satisfied'}\n")
    if args.figure:
        from .plotting import plot_sweep

        plot_sweep(table, args.figure)
    return 0


def cmd_schema(args) -> int:
    sys.stdout.write(schema().to_json() + "\n")
    return 0


def cmd_latency(args) -> int:
    deployment = load_deployment(args.config, args.root) if args.config else None
    models = deployment.pipeline.models if deployment else {}
    if not models:
        from .reference import reference_models

        models = reference_models()
    rng = random.Random(args.seed)
    packets = synth.merge(
        synth.benign_office(rng, 0, 30),
        synth.port_scan("203.0.113.7", "10.1.0.9", range(20, 40), 1_000_000),
        synth.smb_burst("10.2.0.4", [f"10.1.1.{i}" for i in range(6)], 2_000_000),
    )
    flows = replay(packets, PipelineConfig(models=models, seed=bytes(32), log_key=bytes(32)), keep_flows=True).flows
    vectors = [extract(f, f.window) for f in flows]
    summary = measure_latency(models, vectors, args.calls).summary()
    sys.stdout.write("class\tcalls\tmean_us\n")
    for label, row in summary.items():
        sys.stdout.write(f"{label}\t{row['calls']}\t{row['mean_us']:.3f}\n")
    if args.figure:
        from .plotting import plot_latency

        plot_latency(summary, args.figure)
    return 0


def cmd_keygen(args) -> int:
    fd = os.open(args.out, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o400)
    with os.fdopen(fd, "w") as fh:
        fh.write(os.urandom(32).hex() + "\n")
    os.chmod(args.out, 0o400)
    return 0


def cmd_synth(args) -> int:
    rng = random.Random(args.seed)
    streams = [synth.benign_office(rng, args.start_us, args.duration)]
    if args.scenario == "attack":
        streams.append(synth.port_scan("10.1.0.66", "10.1.0.200", range(20, 32), args.start_us + 2_000_000))
        streams.append(synth.smb_burst("10.1.0.77", [f"10.1.3.{i}" for i in range(1, 7)], args.start_us + 5_000_000))
    packets = synth.merge(*streams)
    if args.out.endswith(".pcap"):
        write_pcap(args.out, packets)
    else:
        write_text_trace(args.out, packets)
    sys.stdout.write(f"{len(packets)} packets -> {args.out}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndrflow", description="flow-level detection and response")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--root", help="deployment root prefix for config, key and model paths (default /etc/ndrflow/)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("replay", help="replay a trace through the pipeline")
    r.add_argument("trace")
    r.add_argument("--config")
    r.add_argument("--rate", type=float, default=1.0, help="divide original inter-packet gaps by this")
    r.add_argument("--as-fast-as-possible", action="store_true")
    r.add_argument("--enforce", action="store_true", help="really run firewall commands (default dry-run)")
    r.add_argument("--bounded-strict", action="store_true", help="drop and count on full queues instead of blocking")
    r.add_argument("--header", action="store_true", help="write a CSV header to a fresh event log")
    r.add_argument("--log", help="event log path (overrides config)")
    r.add_argument("--log-key", help="file holding the 32-byte log HMAC key")
    r.add_argument("--reference-models", action="store_true", help="use the bundled reference forests")
    r.add_argument("--report-dir", help="write stage/alert tables and figures here")
    r.set_defaults(func=cmd_replay)

    e = sub.add_parser("evaluate", help="score a verified event log against ground-truth IPs")
    e.add_argument("events")
    e.add_argument("--truth", required=True)
    e.add_argument("--match", choices=("src", "dst", "either"), default="either")
    e.add_argument("--config")
    e.add_argument("--log-key")
    e.add_argument("--total-events", type=int)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="precision/recall/FP-per-hour over thresholds")
    s.add_argument("scores", help="CSV of score,label[,ts_us]")
    s.add_argument("--thresholds", type=_thresholds, default=[0.01, 0.1, 0.5, 0.82, 0.9])
    s.add_argument("--hours", type=float, help="capture duration; default is the ts_us span")
    s.add_argument("--precision-min", type=float, default=0.99)
    s.add_argument("--recall-min", type=float, default=0.95)
    s.add_argument("--figure")
    s.set_defaults(func=cmd_sweep)

    sub.add_parser("schema", help="print the feature schema as JSON").set_defaults(func=cmd_schema)

    lat = sub.add_parser("latency", help="per-class mean inference latency")
    lat.add_argument("--config")
    lat.add_argument("--calls", type=int, default=1000)
    lat.add_argument("--seed", type=int, default=1)
    lat.add_argument("--figure")
    lat.set_defaults(func=cmd_latency)

    k = sub.add_parser("keygen", help="write a fresh 32-byte key (hex) with mode 0400")
    k.add_argument("out")
    k.set_defaults(func=cmd_keygen)

    sy = sub.add_parser("synth", help="write a synthetic trace (.pcap or text)")
    sy.add_argument("out")
    sy.add_argument("--scenario", choices=("office", "attack"), default="attack")
    sy.add_argument("--duration", type=float, default=20.0)
    sy.add_argument("--seed", type=int, default=1)
    sy.add_argument("--start-us", type=int, default=1_700_000_000_000_000)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NdrError as exc:
        sys.stderr.write(f"ndrflow: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"ndrflow: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
