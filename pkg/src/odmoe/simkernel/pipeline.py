"""Composite runs: prefill followed by decode, and the six ablation cases."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..cluster import ClusterConfig, plan_prefill
from ..errors import ConfigError
from ..moe_core import ToyMoEModel, prefill
from ..sep import EOS_TOKEN, FULL_SYNC, NEVER, NO_ALIGNMENT, AlignmentPolicy, make_shadow
from .costs import CostModel
from .decode import DecodeResult, ShadowConfig, run_decode_sim
from .prefill import run_prefill_sim
from .trace import EventTrace


@dataclass(frozen=True)
class AblationCase:
    case_id: int
    predictor: str
    policy: AlignmentPolicy
    description: str


ABLATION_CASES = {
    1: AblationCase(1, "shadow", FULL_SYNC, "shadow, token + KV alignment every iteration"),
    2: AblationCase(2, "shadow", AlignmentPolicy(1, NEVER), "shadow, token alignment only"),
    3: AblationCase(3, "shadow", AlignmentPolicy(NEVER, 1), "shadow, KV alignment only"),
    4: AblationCase(4, "shadow", NO_ALIGNMENT, "shadow, no alignment"),
    5: AblationCase(5, "random", NO_ALIGNMENT, "no shadow, random prefetch"),
    6: AblationCase(6, "none", NO_ALIGNMENT, "no shadow, load after gate"),
}


def ablation_case(case_id: int) -> AblationCase:
    try:
        return ABLATION_CASES[case_id]
    except KeyError:
        raise ConfigError(f"ablation case must be 1..6, got {case_id}") from None


@dataclass
class PipelineResult:
    decode: DecodeResult
    trace: EventTrace
    prefill_end: float


def run_pipeline(
    model: ToyMoEModel,
    shadow: ShadowConfig | None,
    policy: AlignmentPolicy,
    cluster: ClusterConfig,
    cost: CostModel,
    prompt: Sequence[int],
    max_tokens: int,
    mini_batch: int,
    *,
    predictor: str = "shadow",
    seed: int = 0,
    eos_token: int | None = EOS_TOKEN,
    shadow_model: ToyMoEModel | None = None,
    q: int = 0,
) -> PipelineResult:
    """Prefill the prompt on the cluster, then decode from the prefill's end time."""
    _, routings = prefill(model, prompt)
    plan = plan_prefill(routings, mini_batch, model.config, cluster)
    _, pre_trace, pre_end = run_prefill_sim(model, prompt, plan, cost, cluster)
    dec = run_decode_sim(
        model, shadow, policy, cluster, cost, prompt, max_tokens,
        predictor=predictor, seed=seed, eos_token=eos_token, shadow_model=shadow_model,
        start_time=pre_end, q=q,
    )
    trace = EventTrace()
    trace.merge(pre_trace)
    trace.merge(dec.trace)
    return PipelineResult(dec, trace, pre_end)


def run_ablation(
    case_id: int,
    runs: Sequence[tuple[ToyMoEModel, Sequence[int]]],
    cluster: ClusterConfig,
    cost: CostModel,
    max_tokens: int,
    *,
    shadow_bits: int | None = 8,
    seed: int = 0,
    eos_token: int | None = EOS_TOKEN,
    shadow_models: Sequence[ToyMoEModel] | None = None,
) -> list[DecodeResult]:
    """Decode every (model, prompt) pair under ablation case ``case_id``.

    Random prefetch (case 5) draws from ``seed + run index``.
    """
    case = ablation_case(case_id)
    results = []
    for i, (model, prompt) in enumerate(runs):
        shadow_model = None
        if case.predictor == "shadow":
            shadow_model = shadow_models[i] if shadow_models is not None else make_shadow(model, shadow_bits)
        results.append(
            run_decode_sim(
                model, ShadowConfig(shadow_bits), case.policy, cluster, cost, prompt, max_tokens,
                predictor=case.predictor, seed=seed + i, eos_token=eos_token, shadow_model=shadow_model, q=i,
            )
        )
    return results
