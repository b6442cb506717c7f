"""Flow-level network detection and response."""

from .errors import AuthenticationError, ConfigError, IntegrityError, NdrError, SecurityViolation, SignatureError
from .evaluation import EvalReport, compute_memory_mb, threshold_sweep
from .features import extract, schema
from .flows import PacketRecord, ShardedFlowManager
from .forest import AttackClass, ThresholdTable, decide, load_model, predict
from .pipeline import PipelineConfig, replay

__version__ = "0.1.0"

__all__ = [
    "AttackClass",
    "AuthenticationError",
    "ConfigError",
    "EvalReport",
    "IntegrityError",
    "NdrError",
    "PacketRecord",
    "PipelineConfig",
    "SecurityViolation",
    "ShardedFlowManager",
    "SignatureError",
    "ThresholdTable",
    "compute_memory_mb",
    "decide",
    "extract",
    "load_model",
    "predict",
    "replay",
    "schema",
    "threshold_sweep",
]
