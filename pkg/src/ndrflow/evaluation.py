"""Confusion-matrix metrics, threshold sweeps and resource counters."""

from __future__ import annotations

import csv
import ipaddress
from dataclasses import dataclass

from .errors import ConfigError

BYTES_PER_MB = 1_048_576.0
MATCH_MODES = ("src", "dst", "either")


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int

    # empty-denominator conventions: precision and recall default to 1.0
    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fpr": self.fpr,
        }


@dataclass(frozen=True)
class GroundTruth:
    malicious_ips: frozenset
    total_events_expected: int | None = None


def load_ground_truth(path, total_events_expected: int | None = None) -> GroundTruth:
    """One dotted-quad per line; ``#`` begins a comment."""
    ips = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                ips.add(str(ipaddress.IPv4Address(text)))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: not an IPv4 address: {text!r}") from None
    return GroundTruth(frozenset(ips), total_events_expected)


def _matches(event, ips, match: str) -> bool:
    if match == "src":
        return event.src_ip in ips
    if match == "dst":
        return event.dst_ip in ips
    return event.src_ip in ips or event.dst_ip in ips


def evaluate(events, truth: GroundTruth, match: str = "either") -> EvalReport:
    """Score verified event records against ground-truth addresses.

    Alerts are counted once per trace id. An alert touching a listed address
    is a TP, any other alert an FP. Each listed address that no alert
    touched is an FN. TN is whatever remains of ``total_events_expected``
    (0 when unknown).
    """
    if match not in MATCH_MODES:
        raise ConfigError(f"match must be one of {MATCH_MODES}, got {match!r}")
    ips = truth.malicious_ips
    seen = set()
    tp = fp = 0
    touched = set()
    for event in events:
        if event.trace_id in seen:
            continue
        seen.add(event.trace_id)
        if _matches(event, ips, match):
            tp += 1
            if match in ("src", "either") and event.src_ip in ips:
                touched.add(event.src_ip)
            if match in ("dst", "either") and event.dst_ip in ips:
                touched.add(event.dst_ip)
        else:
            fp += 1
    fn = len(ips - touched)
    tn = 0
    if truth.total_events_expected is not None:
        tn = max(0, truth.total_events_expected - tp - fp - fn)
    return EvalReport(tp, fp, fn, tn)


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    fp_per_hour: float

    @property
    def report(self) -> EvalReport:
        return EvalReport(self.tp, self.fp, self.fn, self.tn)

    @property
    def precision(self) -> float:
        return self.report.precision

    @property
    def recall(self) -> float:
        return self.report.recall


@dataclass(frozen=True)
class SweepTable:
    rows: tuple
    precision_min: float
    recall_min: float

    @property
    def gate_rows(self) -> list:
        return [r for r in self.rows if r.precision >= self.precision_min and r.recall >= self.recall_min]

    @property
    def gate_satisfied(self) -> bool:
        return bool(self.gate_rows)

    def to_csv(self) -> str:
        lines = ["threshold,precision,recall,fp_per_hour,tp,fp,fn,tn"]
        for r in self.rows:
            lines.append(f"{r.threshold:g},{r.precision:.4f},{r.recall:.4f},{r.fp_per_hour:.4f},{r.tp},{r.fp},{r.fn},{r.tn}")
        return "\n".join(lines) + "\n"


def threshold_sweep(
    scores,
    labels,
    thresholds,
    capture_hours: float,
    precision_min: float = 0.99,
    recall_min: float = 0.95,
) -> SweepTable:
    """A flow is predicted positive at ``threshold`` when ``score >= threshold``."""
    scores = list(scores)
    labels = [bool(v) for v in labels]
    if not scores:
        raise ValueError("threshold sweep needs at least one scored flow")
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    if not capture_hours or capture_hours <= 0:
        raise ValueError("capture duration must be positive")
    rows = []
    for theta in thresholds:
        tp = fp = fn = tn = 0
        for s, y in zip(scores, labels):
            predicted = s >= theta
            if predicted and y:
                tp += 1
            elif predicted:
                fp += 1
            elif y:
                fn += 1
            else:
                tn += 1
        rows.append(SweepRow(float(theta), tp, fp, fn, tn, fp / capture_hours))
    return SweepTable(tuple(rows), precision_min, recall_min)


def read_scores_csv(path):
    """``score,label[,ts_us]`` with an optional header. Returns (scores, labels, span_hours or None)."""
    scores, labels, stamps = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                score = float(row[0])
            except ValueError:
                continue  # header
            scores.append(score)
            labels.append(int(float(row[1])) != 0)
            if len(row) > 2 and row[2].strip():
                stamps.append(int(row[2]))
    span = (max(stamps) - min(stamps)) / 3.6e9 if len(stamps) >= 2 else None
    return scores, labels, span


def compute_memory_mb(pages: int, page_size: int) -> float:
    """Resident size in MiB. Operands become floats before the product is formed."""
    if pages < 0 or page_size < 0:
        raise ValueError("pages and page_size must be non-negative")
    return float(pages) * float(page_size) / BYTES_PER_MB
