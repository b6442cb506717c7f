"""Deployment configuration: one JSON document, every referenced path vetted.

Relative paths inside the document are taken relative to the directory of the
config file. All paths must stay under the deployment root prefix.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .forest import AttackClass, ThresholdTable, load_model, load_public_key
from .heuristics import DEFAULT_LOCAL_NETWORKS, HeuristicConfig, LocalNetworks
from .pipeline import DEFAULT_QUEUE_CAPACITY, PipelineConfig, models_by_class
from .response import validate_chain_name
from .safepath import resolve, resolve_config, resolve_seed
from .transport import derive_log_key

DEFAULT_ROOT = "/etc/ndrflow/"
ROOT_ENV = "NDRFLOW_ROOT"

TOP_LEVEL_KEYS = {"heuristics", "thresholds", "models", "log", "keys", "local_networks", "firewall", "pipeline"}
KEY_FIELDS = {"seed_path", "log_key_path", "model_pubkey_path"}
LOG_FIELDS = {"path", "header"}
FIREWALL_FIELDS = {"chain"}
PIPELINE_FIELDS = {"shard_count", "flow_timeout_seconds", "queue_capacity", "reorder_budget_us"}


def deployment_root(explicit: str | None = None) -> str:
    root = explicit or os.environ.get(ROOT_ENV) or DEFAULT_ROOT
    root = os.path.realpath(root)
    return root if root.endswith("/") else root + "/"


@dataclass
class Deployment:
    pipeline: PipelineConfig
    log_path: str | None = None
    log_header: bool = False
    root: str = DEFAULT_ROOT
    sources: dict = field(default_factory=dict)


def read_key_material(path: str) -> bytes:
    """32 raw bytes, or 64 hex characters (surrounding whitespace ignored)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) == 32:
        return data
    try:
        decoded = bytes.fromhex(data.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError):
        decoded = b""
    if len(decoded) != 32:
        raise ConfigError(f"{path}: key material must be 32 raw bytes or 64 hex characters")
    return decoded


def _section(doc, name, allowed) -> dict:
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"'{name}' must be a JSON object")
    unknown = sorted(set(value) - allowed)
    if unknown:
        raise ConfigError(f"unknown field(s) in '{name}': {', '.join(unknown)}")
    return value


def load_deployment(path, root: str | None = None) -> Deployment:
    root = deployment_root(root)
    config_path = resolve_config(path, root)
    try:
        with open(config_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {config_path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(doc) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {', '.join(unknown)}")

    base = os.path.dirname(config_path)

    def locate(p):
        if not isinstance(p, str) or not p:
            raise ConfigError(f"path values must be non-empty strings, got {p!r}")
        return p if os.path.isabs(p) else os.path.join(base, p)

    cfg = PipelineConfig()
    sources = {"config": config_path}
    if "heuristics" in doc:
        cfg.heuristics = HeuristicConfig.from_mapping(doc["heuristics"])
    if "thresholds" in doc:
        cfg.thresholds = ThresholdTable.from_mapping(doc["thresholds"])
    nets = doc.get("local_networks", list(DEFAULT_LOCAL_NETWORKS))
    if not isinstance(nets, list) or not all(isinstance(n, str) for n in nets):
        raise ConfigError("'local_networks' must be a list of CIDR strings")
    cfg.local_networks = LocalNetworks(nets)

    keys = _section(doc, "keys", KEY_FIELDS)
    if "seed_path" in keys:
        seed_path = resolve_seed(locate(keys["seed_path"]), root)
        cfg.seed = read_key_material(seed_path)
        sources["seed"] = seed_path
    if "log_key_path" in keys:
        key_path = resolve_seed(locate(keys["log_key_path"]), root)
        cfg.log_key = read_key_material(key_path)
        sources["log_key"] = key_path
    elif cfg.seed is not None:
        cfg.log_key = derive_log_key(cfg.seed)

    models_doc = doc.get("models", {})
    if not isinstance(models_doc, dict):
        raise ConfigError("'models' must map class name to model path")
    if models_doc:
        if "model_pubkey_path" not in keys:
            raise ConfigError("models configured but keys.model_pubkey_path is missing")
        pub_path = resolve(locate(keys["model_pubkey_path"]), root)
        public_key = load_public_key(pub_path)
        sources["model_pubkey"] = pub_path
        loaded = []
        for name, mpath in models_doc.items():
            try:
                label = AttackClass(name.upper())
            except ValueError:
                raise ConfigError(f"unknown model class {name!r}") from None
            model_path = resolve(locate(mpath), root)
            model = load_model(model_path, public_key)
            if model.class_label is not label:
                raise ConfigError(f"{model_path}: model declares class {model.class_label.value}, configured as {label.value}")
            loaded.append(model)
            sources[f"model:{label.value}"] = model_path
        cfg.models = models_by_class(loaded)

    firewall = _section(doc, "firewall", FIREWALL_FIELDS)
    if "chain" in firewall:
        if not validate_chain_name(firewall["chain"]):
            raise ConfigError(f"firewall chain name rejected by allowlist: {firewall['chain']!r}")
        cfg.chain_name = firewall["chain"]

    pipe = _section(doc, "pipeline", PIPELINE_FIELDS)
    for name, value in pipe.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError(f"pipeline.{name} must be a positive number, got {value!r}")
        if name != "flow_timeout_seconds" and not isinstance(value, int):
            raise ConfigError(f"pipeline.{name} must be an integer, got {value!r}")
        setattr(cfg, name, value)
    cfg.queue_capacity = cfg.queue_capacity or DEFAULT_QUEUE_CAPACITY

    log_doc = _section(doc, "log", LOG_FIELDS)
    log_path = None
    if "path" in log_doc:
        log_path = resolve(locate(log_doc["path"]), root)
        sources["log"] = log_path
    return Deployment(cfg, log_path, bool(log_doc.get("header", False)), root, sources)
