"""Embedded decision-forest inference and the Maximum-Threat-Wins policy.

Model files are canonical JSON (sorted keys, no insignificant whitespace)::

    {"class": "DDOS", "feature_count": 40, "version": "1",
     "trees": [{"root": 0, "nodes": [
         {"feature": 3, "threshold": 2.0, "left": 1, "right": 2},
         {"leaf": 0.1}, {"leaf": 0.9}]}]}

with a detached 64-byte Ed25519 signature in ``<model>.sig``. The signature
is checked over the raw file bytes before the body is parsed.

Every split sends ``x[feature] <= threshold`` to the left child. Thresholds
are constrained to [0.0, 5.1], so the missing-feature sentinel (-9999.0)
always routes left.
"""

from __future__ import annotations

import enum
import json
import math
import os
import time
from collections import defaultdict
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .errors import ConfigError, ModelInvariantError, SignatureError
from .features import FEATURE_COUNT

THRESHOLD_MIN = 0.0
THRESHOLD_MAX = 5.1
SIGNATURE_SUFFIX = ".sig"


class AttackClass(enum.Enum):
    RANSOMWARE = "RANSOMWARE"
    DDOS = "DDOS"
    TRAFFIC = "TRAFFIC"
    INTERNAL = "INTERNAL"

    @classmethod
    def parse(cls, value) -> "AttackClass":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ConfigError(f"unknown attack class {value!r}") from None


CLASS_ORDER = tuple(AttackClass)
_ORDER_INDEX = {c: i for i, c in enumerate(CLASS_ORDER)}


@dataclass(frozen=True)
class Tree:
    """Flat node arrays. ``feature[i] == -1`` marks a leaf whose score is ``value[i]``."""

    feature: tuple
    threshold: tuple
    left: tuple
    right: tuple
    value: tuple
    root: int = 0

    def __len__(self) -> int:
        return len(self.feature)


@dataclass(frozen=True)
class ForestModel:
    class_label: AttackClass
    trees: tuple
    version: str
    signature: bytes = b""
    feature_count: int = FEATURE_COUNT

    @property
    def tree_count(self) -> int:
        return len(self.trees)


def eval_tree(tree: Tree, x) -> float:
    values = x.values if hasattr(x, "values") else x
    feature, threshold, left, right = tree.feature, tree.threshold, tree.left, tree.right
    i = tree.root
    while feature[i] >= 0:
        i = left[i] if values[feature[i]] <= threshold[i] else right[i]
    return tree.value[i]


class LatencyRecorder:
    """Wall-clock latency per class around each :func:`predict` call."""

    def __init__(self):
        self.count: dict = defaultdict(int)
        self.total_ns: dict = defaultdict(int)

    def record(self, label, elapsed_ns: int) -> None:
        self.count[label] += 1
        self.total_ns[label] += elapsed_ns

    def mean_us(self, label) -> float:
        n = self.count.get(label, 0)
        return self.total_ns[label] / n / 1000.0 if n else 0.0

    def summary(self) -> dict:
        return {
            (k.value if isinstance(k, AttackClass) else str(k)): {"calls": self.count[k], "mean_us": self.mean_us(k)}
            for k in sorted(self.count, key=lambda c: _ORDER_INDEX.get(c, 99))
        }


def predict(model: ForestModel, x, recorder: LatencyRecorder | None = None) -> float:
    """Mean leaf score over all trees."""
    start = time.perf_counter_ns()
    score = math.fsum(eval_tree(t, x) for t in model.trees) / len(model.trees)
    if recorder is not None:
        recorder.record(model.class_label, max(1, time.perf_counter_ns() - start))
    return score


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def canonical_bytes(document: dict) -> bytes:
    return json.dumps(document, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_index(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def tree_from_dict(doc: dict, tree_index: int = 0, feature_count: int = FEATURE_COUNT) -> Tree:
    where = f"tree {tree_index}"
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list) or not doc["nodes"]:
        raise ModelInvariantError(f"{where}: missing or empty node list")
    nodes = doc["nodes"]
    n = len(nodes)
    root = doc.get("root", 0)
    if not _is_index(root) or not 0 <= root < n:
        raise ModelInvariantError(f"{where}: root index {root!r} out of range")
    feature, threshold, left, right, value = [], [], [], [], []
    for i, node in enumerate(nodes):
        if not isinstance(node, dict):
            raise ModelInvariantError(f"{where} node {i}: not an object")
        if "leaf" in node:
            score = node["leaf"]
            if not _is_number(score) or not 0.0 <= score <= 1.0:
                raise ModelInvariantError(f"{where} node {i}: leaf score {score!r} outside [0, 1]")
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(float(score))
            continue
        f, t, lo, hi = node.get("feature"), node.get("threshold"), node.get("left"), node.get("right")
        if not _is_index(f) or not 0 <= f < feature_count:
            raise ModelInvariantError(f"{where} node {i}: feature index {f!r} not in [0, {feature_count})")
        if not _is_number(t) or not THRESHOLD_MIN <= t <= THRESHOLD_MAX:
            raise ModelInvariantError(
                f"{where} node {i}: split threshold {t!r} outside [{THRESHOLD_MIN}, {THRESHOLD_MAX}]"
            )
        for child in (lo, hi):
            if not _is_index(child) or not 0 <= child < n:
                raise ModelInvariantError(f"{where} node {i}: dangling child index {child!r}")
        feature.append(f)
        threshold.append(float(t))
        left.append(lo)
        right.append(hi)
        value.append(0.0)

    # every path from the root must terminate at a leaf without revisiting a node
    state = [0] * n  # 0 unseen, 1 on stack, 2 done
    stack = [(root, False)]
    while stack:
        i, exiting = stack.pop()
        if exiting:
            state[i] = 2
            continue
        if state[i] == 1:
            raise ModelInvariantError(f"{where} node {i}: cycle detected")
        if state[i] == 2:
            continue
        state[i] = 1
        stack.append((i, True))
        if feature[i] >= 0:
            for child in (left[i], right[i]):
                if state[child] == 1:
                    raise ModelInvariantError(f"{where} node {child}: cycle detected")
                if state[child] == 0:
                    stack.append((child, False))
    return Tree(tuple(feature), tuple(threshold), tuple(left), tuple(right), tuple(value), root)


def tree_to_dict(tree: Tree) -> dict:
    nodes = []
    for i in range(len(tree)):
        if tree.feature[i] < 0:
            nodes.append({"leaf": tree.value[i]})
        else:
            nodes.append(
                {"feature": tree.feature[i], "threshold": tree.threshold[i], "left": tree.left[i], "right": tree.right[i]}
            )
    return {"root": tree.root, "nodes": nodes}


def model_from_dict(doc: dict, signature: bytes = b"") -> ForestModel:
    if not isinstance(doc, dict):
        raise ModelInvariantError("model document must be a JSON object")
    label = doc.get("class")
    try:
        class_label = AttackClass(label)
    except ValueError:
        raise ModelInvariantError(f"unknown model class {label!r}") from None
    feature_count = doc.get("feature_count")
    if feature_count != FEATURE_COUNT:
        raise ModelInvariantError(f"feature_count must be {FEATURE_COUNT}, got {feature_count!r}")
    trees = doc.get("trees")
    if not isinstance(trees, list) or not trees:
        raise ModelInvariantError("model needs at least one tree")
    version = doc.get("version")
    if not isinstance(version, str) or not version:
        raise ModelInvariantError("model version must be a non-empty string")
    parsed = tuple(tree_from_dict(t, i) for i, t in enumerate(trees))
    return ForestModel(class_label, parsed, version, signature)


def model_to_dict(model: ForestModel) -> dict:
    return {
        "class": model.class_label.value,
        "feature_count": model.feature_count,
        "version": model.version,
        "trees": [tree_to_dict(t) for t in model.trees],
    }


def load_public_key(path) -> Ed25519PublicKey:
    """Raw 32-byte key file, or the same bytes hex-encoded on one line."""
    with open(path, "rb") as fh:
        data = fh.read()
    return public_key_from_bytes(data)


def public_key_from_bytes(data: bytes) -> Ed25519PublicKey:
    if len(data) != 32:
        try:
            data = bytes.fromhex(data.decode("ascii").strip())
        except (UnicodeDecodeError, ValueError):
            raise ConfigError("public key must be 32 raw bytes or 64 hex characters") from None
    if len(data) != 32:
        raise ConfigError("public key must be 32 bytes")
    return Ed25519PublicKey.from_public_bytes(data)


def load_model(path, public_key) -> ForestModel:
    """Verify the detached signature, then parse and validate. Fail-closed."""
    if isinstance(public_key, (bytes, bytearray)):
        public_key = public_key_from_bytes(bytes(public_key))
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            body = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from None
    try:
        with open(path + SIGNATURE_SUFFIX, "rb") as fh:
            signature = fh.read()
    except OSError:
        raise SignatureError(f"missing signature for model {path}") from None
    if len(signature) != 64:
        raise SignatureError(f"signature for {path} must be 64 bytes, got {len(signature)}")
    try:
        public_key.verify(signature, body)
    except InvalidSignature:
        raise SignatureError(f"invalid signature for model {path}") from None
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelInvariantError(f"model {path} is not valid JSON: {exc}") from None
    return model_from_dict(doc, signature)


def write_signed_model(path, document: dict, private_key: Ed25519PrivateKey) -> bytes:
    """Write canonical model bytes and the detached signature; returns the signature."""
    path = os.fspath(path)
    body = canonical_bytes(document)
    signature = private_key.sign(body)
    with open(path, "wb") as fh:
        fh.write(body)
    with open(path + SIGNATURE_SUFFIX, "wb") as fh:
        fh.write(signature)
    return signature


# ---------------------------------------------------------------------------
# decision policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdTable:
    ransomware: float = 0.85
    ddos: float = 0.90
    traffic: float = 0.80
    internal: float = 0.85

    def __post_init__(self):
        for c in CLASS_ORDER:
            v = getattr(self, c.value.lower())
            if not _is_number(v) or not 0.0 < v <= 1.0:
                raise ConfigError(f"threshold {c.value.lower()} must lie in (0, 1], got {v!r}")

    def __getitem__(self, label: AttackClass) -> float:
        return getattr(self, label.value.lower())

    @classmethod
    def from_mapping(cls, data) -> "ThresholdTable":
        if not isinstance(data, dict):
            raise ConfigError("thresholds must be a JSON object")
        unknown = sorted(set(data) - {c.value.lower() for c in CLASS_ORDER})
        if unknown:
            raise ConfigError(f"unknown threshold class(es): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class Detection:
    fast_score: float
    ml_scores: dict
    final_scores: dict
    alert: bool
    alert_class: AttackClass | None
    decided_class: AttackClass | None
    block: bool
    triggered: frozenset = frozenset()
    latency_us: dict = field(default_factory=dict)
    src_ip: str = ""
    dst_ip: str = ""
    timestamp_us: int = 0
    key: object = None

    def ml_for(self, label: AttackClass | None) -> float:
        return self.ml_scores.get(label, 0.0) if label else max(self.ml_scores.values(), default=0.0)

    def final_for(self, label: AttackClass | None) -> float:
        return self.final_scores.get(label, self.fast_score) if label else max(self.final_scores.values(), default=self.fast_score)


def _best(candidates, margin) -> AttackClass | None:
    # highest margin; ties go to the earliest class in CLASS_ORDER
    if not candidates:
        return None
    return max(candidates, key=lambda c: (margin(c), -_ORDER_INDEX[c]))


def decide(fast_score: float, ml_scores: dict, thresholds: ThresholdTable | None = None) -> Detection:
    """Per class ``final = max(fast, ml)``.

    An alert is raised when any ``final >= threshold``; a block requires the
    ML score itself to reach the threshold, so fast-only triggers never block.
    """
    thresholds = thresholds or ThresholdTable()
    ml = {c: float(ml_scores.get(c, 0.0)) for c in CLASS_ORDER}
    final = {c: max(fast_score, ml[c]) for c in CLASS_ORDER}
    alerting = [c for c in CLASS_ORDER if final[c] >= thresholds[c]]
    blocking = [c for c in CLASS_ORDER if ml[c] >= thresholds[c]]
    decided = _best(blocking, lambda c: ml[c] - thresholds[c])
    alert_class = decided or _best(alerting, lambda c: final[c] - thresholds[c])
    return Detection(
        fast_score=fast_score,
        ml_scores=ml,
        final_scores=final,
        alert=bool(alerting),
        alert_class=alert_class,
        decided_class=decided,
        block=decided is not None,
    )


def classify(models: dict, x, recorder: LatencyRecorder | None = None) -> dict:
    return {label: predict(model, x, recorder) for label, model in models.items()}


def measure_latency(models: dict, vectors, calls_per_class: int = 1000) -> LatencyRecorder:
    """Run at least ``calls_per_class`` timed predictions per model, cycling over ``vectors``."""
    vectors = list(vectors)
    if not vectors:
        raise ValueError("need at least one feature vector")
    recorder = LatencyRecorder()
    for model in models.values():
        for i in range(calls_per_class):
            predict(model, vectors[i % len(vectors)], recorder)
    return recorder
