"""Staged replay pipeline over bounded in-process queues.

    reader -> flow -> features -> fast -> ml -> response

Each stage is one worker thread that owns its state; stages talk only through
FIFO queues, so a replay is deterministic for a given trace and config. The
fast -> ml hop carries sealed transport frames, as the inter-process link
would.

Queues block when full by default (backpressure, no loss). With
``bounded_strict`` a full queue drops the item and counts it.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field

from .errors import AuthenticationError, ConfigError, NdrError
from .features import FeatureError, FeatureVector, extract
from .flows import DEFAULT_REORDER_BUDGET_US, DEFAULT_SHARDS, FlowRecord, FlowState, ShardedFlowManager
from .forest import AttackClass, LatencyRecorder, ThresholdTable, decide, predict
from .heuristics import HeuristicConfig, LocalNetworks, WindowTracker
from .heuristics import evaluate as evaluate_heuristics
from .response import MemoryEventLog, ResponseAgent, trace_id
from .transport import ChannelEndpoint, Direction

log = logging.getLogger(__name__)

STAGES = ("flow", "features", "fast", "ml", "response")
DEFAULT_QUEUE_CAPACITY = 4096
ML_CHANNEL = "fast-detector-to-ml-detector"

_END = object()


@dataclass
class PipelineConfig:
    heuristics: HeuristicConfig = field(default_factory=HeuristicConfig)
    thresholds: ThresholdTable = field(default_factory=ThresholdTable)
    models: dict = field(default_factory=dict)
    local_networks: LocalNetworks = field(default_factory=LocalNetworks)
    shard_count: int = DEFAULT_SHARDS
    flow_timeout_seconds: float | None = None  # defaults to the heuristic window
    reorder_budget_us: int = DEFAULT_REORDER_BUDGET_US
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    bounded_strict: bool = False
    chain_name: str = "NDRFLOW"
    enforce: bool = False
    seed: bytes | None = None
    log_key: bytes | None = None
    # emulated per-item service time, for queue-stability experiments
    service_time_us: dict = field(default_factory=dict)

    @property
    def timeout_us(self) -> int:
        seconds = self.heuristics.window_seconds if self.flow_timeout_seconds is None else self.flow_timeout_seconds
        return int(round(seconds * 1_000_000))


@dataclass
class PipelineStats:
    packets_in: int = 0
    flows_created: int = 0
    flows_expired: int = 0
    flows_closed: int = 0
    flows_emitted: int = 0
    flow_packets: int = 0
    alerts: int = 0
    blocks: int = 0
    events: int = 0
    errors: dict = field(default_factory=lambda: {"deser": 0, "feat": 0, "inf": 0})
    ipv6_rejected: int = 0
    drops: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    dropped_packets: int = 0
    high_water: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    drain_seconds: float = 0.0
    elapsed_seconds: float = 0.0
    capture_span_us: int = 0
    latency: dict = field(default_factory=dict)

    def errors_line(self) -> str:
        e = self.errors
        return f"errors=(deser:{e['deser']}, feat:{e['feat']}, inf:{e['inf']})"

    def as_dict(self) -> dict:
        return {
            "packets_in": self.packets_in,
            "flows_created": self.flows_created,
            "flows_expired": self.flows_expired,
            "flows_closed": self.flows_closed,
            "flows_emitted": self.flows_emitted,
            "flow_packets": self.flow_packets,
            "alerts": self.alerts,
            "blocks": self.blocks,
            "events": self.events,
            "errors": dict(self.errors),
            "ipv6_rejected": self.ipv6_rejected,
            "drops": dict(self.drops),
            "dropped_packets": self.dropped_packets,
            "high_water": dict(self.high_water),
            "drain_seconds": self.drain_seconds,
            "elapsed_seconds": self.elapsed_seconds,
            "capture_span_us": self.capture_span_us,
            "latency": self.latency,
        }


@dataclass(frozen=True)
class AlertRecord:
    timestamp_us: int
    src_ip: str
    dst_ip: str
    attack_class: str
    triggered: frozenset
    block: bool
    trace_id: str


@dataclass
class ReplayResult:
    stats: PipelineStats
    alerts: list
    event_rows: list
    block_actions: list
    flows: list


class _Stage(threading.Thread):
    def __init__(self, name, inbox, outbox, handler, finisher=None, service_time_us=0, runner=None):
        super().__init__(name=f"stage-{name}", daemon=True)
        self.stage = name
        self.inbox = inbox
        self.outbox = outbox
        self.handler = handler
        self.finisher = finisher
        self.service_s = service_time_us / 1e6
        self.runner = runner
        self.last_item_t: float | None = None
        self.error: BaseException | None = None

    def run(self):
        try:
            while True:
                item = self.inbox.get()
                if item is _END:
                    if self.finisher:
                        flushed = self.finisher()
                        for out in flushed:
                            self.runner.put(self.outbox, out, self.stage_after)
                        if flushed:
                            self.last_item_t = time.perf_counter()
                    if self.outbox is not None:
                        self.outbox.put(_END)
                    return
                if self.service_s:
                    _busy_wait(self.service_s)
                for out in self.handler(item):
                    self.runner.put(self.outbox, out, self.stage_after)
                self.last_item_t = time.perf_counter()
        except BaseException as exc:  # surfaced by the runner; fail-closed
            self.error = exc
            self.runner.abort(exc)

    @property
    def stage_after(self):
        i = STAGES.index(self.stage)
        return STAGES[i + 1] if i + 1 < len(STAGES) else None


def _busy_wait(seconds: float) -> None:
    deadline = time.perf_counter() + seconds
    while time.perf_counter() < deadline:
        time.sleep(0)


class Pipeline:
    def __init__(self, config: PipelineConfig | None = None, event_log=None):
        self.config = config or PipelineConfig()
        cfg = self.config
        if not cfg.models:
            log.warning("no forest models configured; ML scores are 0.0")
        seed = cfg.seed if cfg.seed is not None else os.urandom(32)
        log_key = cfg.log_key if cfg.log_key is not None else os.urandom(32)
        self.event_log = event_log if event_log is not None else MemoryEventLog(log_key)
        self.stats = PipelineStats()
        self.latency = LatencyRecorder()
        self.alerts: list[AlertRecord] = []
        self.flows: list[FlowRecord] = []
        self.manager = ShardedFlowManager(cfg.shard_count, cfg.timeout_us, cfg.reorder_budget_us)
        self.tracker = WindowTracker(cfg.heuristics.window_seconds, cfg.local_networks)
        self.agent = ResponseAgent(self.event_log, cfg.chain_name, cfg.enforce)
        self._tx = ChannelEndpoint(seed, ML_CHANNEL, Direction.TX)
        self._rx = ChannelEndpoint(seed, ML_CHANNEL, Direction.TX)
        self._aborted = threading.Event()
        self._queues = {s: queue.Queue(maxsize=cfg.queue_capacity) for s in STAGES}
        self._lock = threading.Lock()
        self._first_error: BaseException | None = None
        self.keep_flows = False

    # -- queue plumbing ---------------------------------------------------

    def abort(self, exc: BaseException | None = None):
        with self._lock:
            if self._first_error is None and exc is not None:
                self._first_error = exc
        self._aborted.set()

    def put(self, q, item, stage):
        if q is None:
            return
        if self.config.bounded_strict:
            try:
                q.put_nowait(item)
            except queue.Full:
                with self._lock:
                    self.stats.drops[stage] += 1
                    if stage == "flow":
                        self.stats.dropped_packets += 1
                return
        else:
            while True:
                try:
                    q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    if self._aborted.is_set():
                        raise NdrError("pipeline aborted") from None
        depth = q.qsize()
        hw = self.stats.high_water
        if depth > hw[stage]:
            hw[stage] = depth

    # -- stage handlers ---------------------------------------------------

    def _flow_stage(self, packet):
        created_before = self.manager.counters.flows_created
        result = self.manager.ingest(packet)
        flow = result.flow
        out = list(result.expired)
        if flow is not None:
            is_new = self.manager.counters.flows_created != created_before
            self.tracker.observe(packet, is_new)
            flow.window = self.tracker.stats(flow.src_ip, self.manager.watermark_us)
            if flow.state in (FlowState.CLOSED_FIN, FlowState.CLOSED_RST):
                out.append(flow)
        for f in out:
            self.stats.flows_emitted += 1
            self.stats.flow_packets += f.packets
            if self.keep_flows:
                self.flows.append(f)
        return out

    def _flow_finish(self):
        now = self.manager.watermark_us or 0
        out = self.manager.expire_all(now)
        for f in out:
            self.stats.flows_emitted += 1
            self.stats.flow_packets += f.packets
            if self.keep_flows:
                self.flows.append(f)
        return out

    def _feature_stage(self, flow):
        try:
            vector = extract(flow, flow.window, self.config.local_networks)
        except (FeatureError, ArithmeticError, ValueError):
            with self._lock:
                self.stats.errors["feat"] += 1
            return []
        return [(flow, vector)]

    def _fast_stage(self, item):
        flow, vector = item
        fast, triggered = evaluate_heuristics(flow.window, self.config.heuristics)
        message = {
            "src": flow.src_ip,
            "dst": flow.dst_ip,
            "ts": flow.last_seen_us,
            "key": str(flow.key),
            "fast": fast,
            "triggered": sorted(triggered),
            "x": list(vector.values),
        }
        payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
        return [self._tx.seal(payload)]

    def _ml_stage(self, wire):
        try:
            message = json.loads(self._rx.open(wire))
        except AuthenticationError:
            raise  # fail-closed: a forged or mis-keyed frame halts the pipeline
        x = FeatureVector(tuple(message["x"]))
        scores = {}
        latency = {}
        for label, model in self.config.models.items():
            try:
                before = self.latency.total_ns[label]
                scores[label] = predict(model, x, self.latency)
                latency[label] = (self.latency.total_ns[label] - before) / 1000.0
            except Exception:
                with self._lock:
                    self.stats.errors["inf"] += 1
                scores[label] = 0.0
        detection = decide(message["fast"], scores, self.config.thresholds)
        detection.triggered = frozenset(message["triggered"])
        detection.latency_us = latency
        detection.src_ip = message["src"]
        detection.dst_ip = message["dst"]
        detection.timestamp_us = message["ts"]
        detection.key = message["key"]
        return [detection]

    def _response_stage(self, detection):
        if not detection.alert:
            return []
        self.stats.alerts += 1
        before_blocks = len(self.agent.actions)
        rows = self.agent.handle(detection)
        self.stats.blocks += len(self.agent.actions) - before_blocks
        self.stats.events += len(rows)
        label = detection.decided_class if detection.block else detection.alert_class
        tid = trace_id(detection.src_ip, detection.dst_ip, label, detection.timestamp_us).hex
        self.alerts.append(
            AlertRecord(
                detection.timestamp_us,
                detection.src_ip,
                detection.dst_ip,
                label.value if label else "NONE",
                detection.triggered,
                detection.block,
                tid,
            )
        )
        return []

    # -- driver -----------------------------------------------------------

    def run(self, packets, rate_multiplier: float | None = None) -> ReplayResult:
        """Feed ``packets`` through every stage and wait for the queues to drain.

        ``rate_multiplier=None`` replays as fast as possible; otherwise
        original inter-packet gaps are divided by the multiplier.
        """
        cfg = self.config
        handlers = {
            "flow": (self._flow_stage, self._flow_finish),
            "features": (self._feature_stage, None),
            "fast": (self._fast_stage, None),
            "ml": (self._ml_stage, None),
            "response": (self._response_stage, None),
        }
        workers = []
        for i, name in enumerate(STAGES):
            outbox = self._queues[STAGES[i + 1]] if i + 1 < len(STAGES) else None
            handler, finisher = handlers[name]
            workers.append(
                _Stage(name, self._queues[name], outbox, handler, finisher, cfg.service_time_us.get(name, 0), self)
            )
        for w in workers:
            w.start()

        start = time.perf_counter()
        first_ts = last_ts = None
        try:
            for packet in packets:
                if self._aborted.is_set():
                    break
                self.stats.packets_in += 1
                ts = packet.timestamp_us
                if first_ts is None:
                    first_ts = ts
                    t0 = time.perf_counter()
                if last_ts is None or ts > last_ts:
                    last_ts = ts
                if rate_multiplier:
                    due = t0 + (ts - first_ts) / 1e6 / rate_multiplier
                    delay = due - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
                self.put(self._queues["flow"], packet, "flow")
        except NdrError:
            pass
        input_done = time.perf_counter()
        self._queues["flow"].put(_END)
        for w in workers:
            while w.is_alive():
                w.join(timeout=0.1)
                if self._aborted.is_set():
                    break
        if self._first_error is not None:
            raise self._first_error
        finished = time.perf_counter()

        s = self.stats
        counters = self.manager.counters
        s.flows_created = counters.flows_created
        s.flows_expired = counters.flows_expired
        s.flows_closed = counters.flows_closed
        s.errors["deser"] = counters.deser
        s.ipv6_rejected = counters.ipv6
        s.elapsed_seconds = finished - start
        last_work = [w.last_item_t for w in workers if w.last_item_t is not None]
        s.drain_seconds = max(0.0, max(last_work) - input_done) if last_work and s.packets_in else 0.0
        s.capture_span_us = (last_ts - first_ts) if first_ts is not None else 0
        s.latency = self.latency.summary()
        return ReplayResult(
            stats=s,
            alerts=list(self.alerts),
            event_rows=list(getattr(self.event_log, "lines", [])),
            block_actions=list(self.agent.actions),
            flows=list(self.flows),
        )


def replay(packets, config: PipelineConfig | None = None, rate_multiplier: float | None = None, event_log=None, keep_flows=False) -> ReplayResult:
    pipeline = Pipeline(config, event_log)
    pipeline.keep_flows = keep_flows
    return pipeline.run(packets, rate_multiplier)


def models_by_class(models) -> dict:
    out = {}
    for model in models:
        if model.class_label in out:
            raise ConfigError(f"duplicate model for class {model.class_label.value}")
        out[model.class_label] = model
    return {c: out[c] for c in AttackClass if c in out}
