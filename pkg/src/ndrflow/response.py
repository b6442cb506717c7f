"""Detection correlation, integrity-protected event log, and firewall actions.

Event rows are CSV with columns::

    ts_us,trace_id,src,dst,class,fast,ml,final,action,hmac

``hmac`` is lowercase hex HMAC-SHA256 over the exact UTF-8 bytes of the row
preceding the final comma. ``action`` is ``ALERT``, ``BLOCK`` (enforced) or
``BLOCK_DRYRUN`` (rendered and logged, never executed).

Firewall commands are built as argv lists from one fixed template and run
without a shell.
"""

from __future__ import annotations

import csv
import hashlib
import hmac
import io
import ipaddress
import logging
import os
import re
import subprocess
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import IntegrityError, SecurityViolation
from .forest import AttackClass, Detection

log = logging.getLogger(__name__)

CSV_COLUMNS = ("ts_us", "trace_id", "src", "dst", "class", "fast", "ml", "final", "action", "hmac")
ALERT = "ALERT"
BLOCK = "BLOCK"
BLOCK_DRYRUN = "BLOCK_DRYRUN"
ACTIONS = (ALERT, BLOCK, BLOCK_DRYRUN)

# bucket length in seconds per class; SSH brute force is reported as INTERNAL
TRACE_POLICY_SECONDS = {
    AttackClass.RANSOMWARE: 60,
    AttackClass.DDOS: 10,
    AttackClass.INTERNAL: 30,
}
DEFAULT_POLICY_SECONDS = 30
NO_CLASS = "NONE"


class TraceId(NamedTuple):
    digest: bytes
    bucket_index: int
    policy_seconds: int

    @property
    def hex(self) -> str:
        return self.digest.hex()


def policy_seconds(attack_class, policy: dict | None = None) -> int:
    table = TRACE_POLICY_SECONDS if policy is None else policy
    return table.get(attack_class, DEFAULT_POLICY_SECONDS)


def _class_name(attack_class) -> str:
    if attack_class is None:
        return NO_CLASS
    return attack_class.value if isinstance(attack_class, AttackClass) else str(attack_class).upper()


def trace_id(src_ip: str, dst_ip: str, attack_class, timestamp_us: int, policy: dict | None = None) -> TraceId:
    seconds = policy_seconds(attack_class, policy)
    bucket = timestamp_us // (seconds * 1_000_000)
    canonical = f"{src_ip}|{dst_ip}|{_class_name(attack_class)}|{bucket}"
    return TraceId(hashlib.sha256(canonical.encode("ascii")).digest(), bucket, seconds)


# ---------------------------------------------------------------------------
# event rows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventRecord:
    timestamp_us: int
    trace_id: str
    src_ip: str
    dst_ip: str
    attack_class: str
    fast_score: float
    ml_score: float
    final_score: float
    action: str
    hmac_tag: str = ""

    @property
    def is_block(self) -> bool:
        return self.action in (BLOCK, BLOCK_DRYRUN)

    @property
    def dry_run(self) -> bool:
        return self.action == BLOCK_DRYRUN


def _score(x: float) -> str:
    return f"{x:.6f}"


def _body(event: EventRecord) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="").writerow(
        [
            event.timestamp_us,
            event.trace_id,
            event.src_ip,
            event.dst_ip,
            event.attack_class,
            _score(event.fast_score),
            _score(event.ml_score),
            _score(event.final_score),
            event.action,
        ]
    )
    return buf.getvalue()


def _tag(body: str, key: bytes) -> str:
    return hmac.new(key, body.encode("utf-8"), hashlib.sha256).hexdigest()


def emit_event(event: EventRecord, log_key: bytes) -> str:
    """Serialized row (no newline) with the HMAC tag appended."""
    if event.action not in ACTIONS:
        raise ValueError(f"unknown action {event.action!r}")
    body = _body(event)
    return f"{body},{_tag(body, log_key)}"


def _split(row: str) -> tuple[str, str]:
    body, sep, tag = row.rpartition(",")
    if not sep:
        raise IntegrityError("row has no hmac column")
    return body, tag


def verify_event(row, log_key: bytes) -> bool:
    if isinstance(row, bytes):
        try:
            row = row.decode("utf-8")
        except UnicodeDecodeError:
            return False
    row = row.rstrip("\n")
    try:
        body, tag = _split(row)
    except IntegrityError:
        return False
    return hmac.compare_digest(tag, _tag(body, log_key))


def parse_event(row: str) -> EventRecord:
    fields_ = next(csv.reader([row]))
    if len(fields_) != len(CSV_COLUMNS):
        raise IntegrityError(f"expected {len(CSV_COLUMNS)} columns, found {len(fields_)}")
    ts, tid, src, dst, cls, fast, ml, final, action, tag = fields_
    if action not in ACTIONS:
        raise IntegrityError(f"unknown action {action!r}")
    try:
        return EventRecord(int(ts), tid, src, dst, cls, float(fast), float(ml), float(final), action, tag)
    except ValueError as exc:
        raise IntegrityError(f"unparseable field: {exc}") from None


def read_verified_log(path, log_key: bytes) -> list[EventRecord]:
    """Verify every row and return the parsed records.

    Raises :class:`IntegrityError` naming the first bad row (1-based, header
    not counted). A final row without a newline is reported as truncated.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    lines = data.split(b"\n")
    truncated = lines and lines[-1] != b""
    if not truncated:
        lines = lines[:-1]
    records = []
    row_number = 0
    for i, raw in enumerate(lines):
        if i == 0 and raw.startswith(b"ts_us,"):
            if raw.decode("utf-8", "replace") != ",".join(CSV_COLUMNS):
                raise IntegrityError("row 0: malformed header")
            continue
        row_number += 1
        last = i == len(lines) - 1
        if last and truncated:
            raise IntegrityError(f"row {row_number}: truncated final row")
        if not verify_event(raw, log_key):
            raise IntegrityError(f"row {row_number}: hmac verification failed")
        records.append(parse_event(raw.decode("utf-8")))
    return records


class EventLog:
    """Append-only writer. Any write failure is fatal."""

    def __init__(self, path, log_key: bytes, header: bool = False):
        self.path = os.fspath(path)
        self.key = log_key
        self.rows = 0
        try:
            fresh = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
            self._fh = open(self.path, "a", encoding="utf-8", newline="")
        except OSError as exc:
            raise IntegrityError(f"cannot open event log {self.path}: {exc}") from None
        if header and fresh:
            self._write(",".join(CSV_COLUMNS))

    def _write(self, line: str) -> None:
        try:
            self._fh.write(line + "\n")
            self._fh.flush()
        except (OSError, ValueError) as exc:
            raise IntegrityError(f"event log write failed: {exc}") from None

    def append(self, event: EventRecord) -> str:
        row = emit_event(event, self.key)
        self._write(row)
        self.rows += 1
        return row

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MemoryEventLog:
    """Same contract as :class:`EventLog`, rows kept in memory."""

    def __init__(self, log_key: bytes):
        self.key = log_key
        self.lines: list[str] = []

    @property
    def rows(self) -> int:
        return len(self.lines)

    def append(self, event: EventRecord) -> str:
        row = emit_event(event, self.key)
        self.lines.append(row)
        return row

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# firewall actions
# ---------------------------------------------------------------------------

_CHAIN_RE = re.compile(r"[A-Za-z0-9_\-]{1,30}")
IPTABLES = "iptables"


def validate_chain_name(name) -> bool:
    """Allowlist: ASCII letters, digits, ``_`` and ``-``; 1 to 30 characters."""
    if isinstance(name, (bytes, bytearray)):
        try:
            name = bytes(name).decode("ascii")
        except UnicodeDecodeError:
            return False
    if not isinstance(name, str):
        return False
    # fullmatch: "$" alone would accept a trailing newline
    return _CHAIN_RE.fullmatch(name) is not None


@dataclass(frozen=True)
class BlockAction:
    src_ip: str
    chain_name: str
    argv: tuple
    dry_run: bool = True


def render_block(src_ip: str, chain_name: str, dry_run: bool = True) -> BlockAction:
    if not validate_chain_name(chain_name):
        raise SecurityViolation(f"invalid chain_name rejected: {chain_name!r}")
    try:
        address = ipaddress.IPv4Address(src_ip)
    except (ValueError, TypeError):
        raise SecurityViolation(f"invalid source address rejected: {src_ip!r}") from None
    argv = (IPTABLES, "-I", chain_name, "-s", str(address), "-j", "DROP")
    return BlockAction(str(address), chain_name, argv, dry_run)


def execute_block(action: BlockAction, runner=subprocess.run) -> bool:
    """Run an enforced action as an argv list (never through a shell).

    Dry-run actions return False without spawning anything.
    """
    if action.dry_run:
        log.info("dry-run block: %s", action.argv)
        return False
    if not validate_chain_name(action.chain_name):
        raise SecurityViolation(f"invalid chain_name rejected: {action.chain_name!r}")
    runner(list(action.argv), shell=False, check=True)
    return True


@dataclass
class ResponseAgent:
    """Turns detections into event rows and (idempotent) block actions.

    One ALERT row is written per trace id; an escalation to a block for the
    same trace id writes one additional BLOCK row.
    """

    event_log: object
    chain_name: str = "NDRFLOW"
    enforce: bool = False
    policy: dict | None = None
    runner: object = subprocess.run
    actions: list = field(default_factory=list)
    _seen: dict = field(default_factory=dict)
    _blocked: set = field(default_factory=set)

    def __post_init__(self):
        if not validate_chain_name(self.chain_name):
            raise SecurityViolation(f"invalid chain_name rejected: {self.chain_name!r}")

    def handle(self, detection: Detection) -> list[str]:
        if not detection.alert:
            return []
        label = detection.decided_class if detection.block else detection.alert_class
        tid = trace_id(detection.src_ip, detection.dst_ip, label, detection.timestamp_us, self.policy).hex
        level = 2 if detection.block else 1
        if self._seen.get(tid, 0) >= level:
            return []
        self._seen[tid] = level

        if detection.block:
            action_name = BLOCK if self.enforce else BLOCK_DRYRUN
            self._block(detection.src_ip)
        else:
            action_name = ALERT
        event = EventRecord(
            timestamp_us=detection.timestamp_us,
            trace_id=tid,
            src_ip=detection.src_ip,
            dst_ip=detection.dst_ip,
            attack_class=_class_name(label),
            fast_score=detection.fast_score,
            ml_score=detection.ml_for(label),
            final_score=detection.final_for(label),
            action=action_name,
        )
        return [self.event_log.append(event)]

    def _block(self, src_ip: str) -> None:
        if (src_ip, self.chain_name) in self._blocked:
            return
        self._blocked.add((src_ip, self.chain_name))
        action = render_block(src_ip, self.chain_name, dry_run=not self.enforce)
        self.actions.append(action)
        execute_block(action, self.runner)
