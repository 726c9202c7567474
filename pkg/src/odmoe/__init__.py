"""Desk-scale simulation of on-demand expert loading for mixture-of-experts inference."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AlignmentError,
    ConfigError,
    InputError,
    NumericError,
    ODMoEError,
    PlanningError,
    PreconditionError,
    RoutingError,
    SimulationError,
)
from .moe_core import ModelConfig, ToyMoEModel, decode, forward_token, init_model, prefill, quantize_model  # noqa: E402
from .sep import AlignmentPolicy, RoutingRecord, compute_recall  # noqa: E402
from .cluster import ClusterConfig  # noqa: E402
from .simkernel import CostModel, run_decode_sim, run_prefill_sim  # noqa: E402
