"""Worker grouping, round-robin layer placement and expert load planning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ConfigError, InputError, PlanningError
from .moe_core import ExpertId, ModelConfig, RoutingDecision

GiB = 1024**3
MiB = 1024**2


@dataclass(frozen=True)
class ClusterConfig:
    num_workers: int = 8
    group_size: int = 2
    memory_budget_bytes: int = 1 * GiB
    expert_param_bytes: int = 256 * MiB

    def __post_init__(self):
        if self.num_workers < 1 or self.group_size < 1:
            raise ConfigError("num_workers and group_size must be positive")
        if self.num_workers % self.group_size:
            raise ConfigError(f"num_workers={self.num_workers} is not divisible by group_size={self.group_size}")
        if self.num_groups < 2:
            raise ConfigError(f"need at least 2 groups, got {self.num_groups}")
        if self.expert_param_bytes < 0:
            raise ConfigError("expert_param_bytes must be non-negative")
        if self.memory_budget_bytes < self.expert_param_bytes:
            raise ConfigError("memory budget cannot hold a single expert")

    @property
    def num_groups(self) -> int:
        return self.num_workers // self.group_size

    def check_model(self, model: ModelConfig) -> None:
        if self.group_size != model.top_k:
            raise ConfigError(f"group_size={self.group_size} must equal the model's top_k={model.top_k}")


def plan_groups(config: ClusterConfig) -> list[list[int]]:
    """Contiguous groups: group g owns workers [g*G, (g+1)*G)."""
    G = config.group_size
    return [list(range(g * G, (g + 1) * G)) for g in range(config.num_groups)]


def assign_layer(layer: int, num_groups: int) -> int:
    return layer % num_groups


def assign_experts(predicted: Sequence[int], workers: Sequence[int]) -> dict[int, int]:
    """Pair sorted expert indices with sorted worker ids, one to one."""
    if len(set(predicted)) != len(predicted) or len(predicted) != len(workers):
        raise PlanningError(f"cannot assign experts {sorted(predicted)} one-to-one onto workers {list(workers)}")
    return dict(zip(sorted(predicted), sorted(workers)))


def max_load_budget(t_main: float, t_worker: float, n: int) -> float:
    """Longest expert load that never stalls compute: n*t_main + (n-1)*t_worker.

    ``n`` is the number of groups (pass the group size instead for the
    literal printed form of the bound).
    """
    if t_main < 0 or t_worker < 0:
        raise InputError("times must be non-negative")
    if n < 1:
        raise InputError("n must be >= 1")
    return n * t_main + (n - 1) * t_worker


EQ1_MODES = ("groups", "group-size")


def budget_multiplier(cluster: ClusterConfig, mode: str = "groups") -> int:
    if mode == "groups":
        return cluster.num_groups
    if mode == "group-size":
        return cluster.group_size
    raise ConfigError(f"unknown load budget mode {mode!r}; expected one of {EQ1_MODES}")


def handle_misprediction(
    layer: int,
    true_experts: Sequence[int],
    resident: Mapping[int, int | None],
) -> list[tuple[ExpertId, int]]:
    """Reloads needed before layer ``layer`` may compute.

    ``resident`` maps each worker of the group to the expert index it holds
    (or None).  Missing true experts go, in sorted order, to the sorted
    workers whose resident expert is not needed.
    """
    true_set = set(true_experts)
    held = {e for e in resident.values() if e is not None}
    missing = sorted(true_set - held)
    free = sorted(w for w, e in resident.items() if e is None or e not in true_set)
    if len(free) < len(missing):
        raise PlanningError(f"layer {layer}: {len(missing)} reloads but only {len(free)} workers available")
    return [(ExpertId(layer, e), w) for e, w in zip(missing, free)]


@dataclass
class WorkerState:
    worker_id: int
    group_id: int
    budget_bytes: int
    expert_bytes: int
    resident: set = field(default_factory=set)

    @property
    def bytes_used(self) -> int:
        return len(self.resident) * self.expert_bytes

    def admit(self, expert: ExpertId) -> None:
        if self.bytes_used + self.expert_bytes > self.budget_bytes:
            raise PlanningError(f"worker {self.worker_id} out of memory admitting {expert}")
        self.resident.add(expert)

    def evict_all(self) -> list[ExpertId]:
        gone = sorted(self.resident, key=lambda e: (e.layer, e.index))
        self.resident.clear()
        return gone


@dataclass(frozen=True)
class ExpertBatches:
    expert: ExpertId
    worker: int
    batches: tuple[tuple[int, ...], ...]

    @property
    def token_count(self) -> int:
        return sum(len(b) for b in self.batches)


@dataclass(frozen=True)
class PrefillPlan:
    """Per layer, one entry per expert (in index order) with its mini-batches."""

    num_tokens: int
    mini_batch: int
    layers: tuple[tuple[ExpertBatches, ...], ...]

    def worker_experts(self, layer: int, worker: int) -> list[ExpertBatches]:
        return [eb for eb in self.layers[layer] if eb.worker == worker]


def expert_worker(expert_index: int, num_workers: int) -> int:
    """Prefill placement: expert e of every layer lives on worker e mod N_W."""
    return expert_index % num_workers


def plan_prefill(
    routings: Sequence[Sequence[RoutingDecision | Sequence[int]]],
    mini_batch: int,
    model: ModelConfig,
    cluster: ClusterConfig,
) -> PrefillPlan:
    """Group prompt tokens by routed expert and split each group into mini-batches.

    ``routings[t][l]`` is the routing of token ``t`` at layer ``l``, either a
    RoutingDecision or a plain collection of expert indices.
    """
    if mini_batch < 1:
        raise PlanningError("mini_batch must be >= 1")
    layers = []
    for l in range(model.num_layers):
        per_expert: dict[int, list[int]] = {e: [] for e in range(model.num_experts)}
        for t, token_routing in enumerate(routings):
            dec = token_routing[l]
            experts = dec.experts if isinstance(dec, RoutingDecision) else dec
            for e in sorted(set(experts)):
                if not 0 <= e < model.num_experts:
                    raise PlanningError(f"token {t} layer {l}: expert {e} out of range")
                per_expert[e].append(t)
        entries = []
        for e in range(model.num_experts):
            toks = per_expert[e]
            n_batches = math.ceil(len(toks) / mini_batch)
            batches = tuple(tuple(toks[i * mini_batch : (i + 1) * mini_batch]) for i in range(n_batches))
            entries.append(ExpertBatches(ExpertId(l, e), expert_worker(e, cluster.num_workers), batches))
        layers.append(tuple(entries))
    return PrefillPlan(len(routings), mini_batch, tuple(layers))
