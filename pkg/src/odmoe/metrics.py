"""Evaluation quantities derived from simulation traces and routing records."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .cluster import ClusterConfig, budget_multiplier, max_load_budget
from .errors import InputError
from .moe_core import ModelConfig
from .simkernel.costs import CostModel
from .simkernel.engine import to_seconds, to_ticks
from .simkernel.trace import EventTrace

SUMMARY_COLUMNS = ("tokens_per_s_decode", "ttft_s", "total_stall_s", "mispredict_count", "recall_overall")


def _token_times(trace: EventTrace) -> list[int]:
    if not trace.token_times:
        raise InputError("trace has no TokenEmitted events")
    return sorted(trace.token_times)


def decode_throughput(trace: EventTrace, N: int | None = None, with_flag: bool = False):
    """Tokens per second between the first and the N-th emitted token.

    Prefill is excluded.  With a single token the rate is undefined and 0.0
    is returned; ``with_flag=True`` returns ``(rate, flagged)`` so callers
    can tell that case apart.
    """
    times = _token_times(trace)
    if N is None:
        N = len(times)
    if not 1 <= N <= len(times):
        raise InputError(f"trace has {len(times)} tokens, asked for {N}")
    if N == 1:
        rate, flagged = 0.0, True
    else:
        span = times[N - 1] - times[0]
        rate, flagged = ((N - 1) / to_seconds(span), False) if span > 0 else (math.inf, False)
    return (rate, flagged) if with_flag else rate


def ttft(trace: EventTrace, request_start: float = 0.0) -> float:
    """Seconds from the request start to the first emitted token."""
    return to_seconds(_token_times(trace)[0] - to_ticks(request_start))


def output_throughput(trace: EventTrace, request_start: float = 0.0) -> float:
    """All emitted tokens over the whole request time (prefill + decode)."""
    times = _token_times(trace)
    span = times[-1] - to_ticks(request_start)
    return len(times) / to_seconds(span) if span > 0 else math.inf


def stall_by_layer(trace: EventTrace, num_layers: int, steady: bool | None = None) -> list[float]:
    """Stall seconds per layer index, summed over iterations."""
    ticks = [0] * num_layers
    for (n, l), s in trace.layer_stalls.items():
        if steady is None or ((n, l) in trace.warmup_layers) != steady:
            ticks[l] += s
    return [to_seconds(t) for t in ticks]


@dataclass(frozen=True)
class SpeedReport:
    decode_tokens_per_s: float
    ttft_s: float
    output_tokens_per_s: float
    layer_stall_s: tuple[float, ...]
    mispredict_count: int
    single_token: bool = False

    @property
    def total_stall_s(self) -> float:
        return math.fsum(self.layer_stall_s)


def speed_report(
    trace: EventTrace,
    num_layers: int,
    mispredicts: int = 0,
    request_start: float = 0.0,
) -> SpeedReport:
    rate, flagged = decode_throughput(trace, with_flag=True)
    return SpeedReport(
        decode_tokens_per_s=rate,
        ttft_s=ttft(trace, request_start),
        output_tokens_per_s=output_throughput(trace, request_start),
        layer_stall_s=tuple(stall_by_layer(trace, num_layers)),
        mispredict_count=mispredicts,
        single_token=flagged,
    )


@dataclass(frozen=True)
class BottleneckReport:
    budget_s: float
    required_s: float
    bottlenecked: bool
    multiplier: int

    @property
    def excess_s(self) -> float:
        return max(0.0, self.required_s - self.budget_s)


def bottleneck_report(
    cluster: ClusterConfig,
    cost: CostModel,
    model: ModelConfig | None = None,
    mode: str = "groups",
) -> BottleneckReport:
    """Compare one expert's load time with the maximum allowable load time.

    Equality counts as not bottlenecked.  The comparison is done on integer
    ticks so it agrees with the simulator's own rounding.
    """
    if model is not None:
        cluster.check_model(model)
    n = budget_multiplier(cluster, mode)
    budget = max_load_budget(cost.t_main, cost.t_worker, n)
    required = cost.load_time(cluster.expert_param_bytes)
    budget_ticks = n * to_ticks(cost.t_main) + (n - 1) * to_ticks(cost.t_worker)
    return BottleneckReport(budget, required, to_ticks(required) > budget_ticks, n)


def ensemble_mean(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        raise InputError("empty ensemble")
    return math.fsum(vals) / len(vals)


def pooled_decode_throughput(traces: Sequence[EventTrace]) -> float:
    """Total decode intervals over total decode time across runs."""
    tokens = 0
    span = 0
    for tr in traces:
        times = _token_times(tr)
        tokens += len(times) - 1
        span += times[-1] - times[0]
    if span == 0:
        raise InputError("no decode interval in any trace")
    return tokens / to_seconds(span)


def format_value(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    return str(v)


def write_summary_csv(
    path, rows: Sequence[dict], lead_columns: Sequence[str] = (), extra_columns: Sequence[str] = ()
) -> None:
    """Columns are ``lead_columns``, then SUMMARY_COLUMNS, then ``extra_columns``."""
    columns = list(lead_columns) + list(SUMMARY_COLUMNS) + list(extra_columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(row.get(c, "")) for c in columns])
