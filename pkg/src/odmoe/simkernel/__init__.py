from .costs import CostModel, transfer_time
from .decode import PREDICTORS, DecodeResult, ShadowConfig, run_decode_sim
from .engine import TICKS_PER_SECOND, Environment, to_seconds, to_ticks
from .pipeline import ABLATION_CASES, AblationCase, PipelineResult, ablation_case, run_ablation, run_pipeline
from .prefill import run_prefill_sim, worker_completion
from .trace import EventTrace, Kind, TraceEvent

__all__ = [
    "ABLATION_CASES",
    "AblationCase",
    "CostModel",
    "DecodeResult",
    "Environment",
    "EventTrace",
    "Kind",
    "PREDICTORS",
    "PipelineResult",
    "ShadowConfig",
    "TICKS_PER_SECOND",
    "TraceEvent",
    "ablation_case",
    "run_ablation",
    "run_decode_sim",
    "run_pipeline",
    "run_prefill_sim",
    "to_seconds",
    "to_ticks",
    "transfer_time",
    "worker_completion",
]
