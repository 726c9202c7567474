"""Round-robin decode pipeline in virtual time with real toy-model numerics.

Actors:

* main node - for every layer runs the non-expert part (``t_main``), reveals
  the gate decision, waits until the layer's experts are resident on the
  layer's group, then lets the group compute (``t_worker``);
* shadow node - decodes with the shadow model at ``shadow_time`` per layer,
  at most ``L`` layers ahead of the main node, waiting for alignment data
  whenever the policy asks for it;
* one loader per worker group - after the group's previous layer computed,
  loads the predicted experts (or, when no prediction arrived before the
  gate decision, the true ones) and reloads mispredicted experts.

Each worker's CPU-GPU link carries one load at a time; an expert becomes
resident at LoadStart, which also evicts whatever the worker held before.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..cluster import (
    ClusterConfig,
    WorkerState,
    assign_experts,
    assign_layer,
    handle_misprediction,
    plan_groups,
)
from ..errors import ConfigError, SimulationError
from ..moe_core import ExpertId, ToyMoEModel, forward_token, prefill
from ..sep import (
    EOS_TOKEN,
    NO_ALIGNMENT,
    AlignmentPolicy,
    RoutingRecord,
    alignment_payload_bytes,
    feedback_from,
    make_shadow,
    shadow_decode_step,
)
from .costs import CostModel
from .engine import Environment, to_ticks
from .trace import EventTrace, Kind

PREDICTORS = ("shadow", "random", "none")


@dataclass(frozen=True)
class ShadowConfig:
    """Shadow precision (None = exact full-precision copy)."""

    bits: int | None = 8


@dataclass
class DecodeResult:
    tokens: list[int]
    trace: EventTrace
    records: list[RoutingRecord]
    mispredicts: int = 0
    start_ticks: int = 0
    warmup: set = field(default_factory=set)

    def __iter__(self):
        # allows ``tokens, trace, records = run_decode_sim(...)``
        return iter((self.tokens, self.trace, self.records))


def _worker(w: int) -> str:
    return f"worker:{w}"


def run_decode_sim(
    full_model: ToyMoEModel,
    shadow: ShadowConfig | None,
    policy: AlignmentPolicy,
    cluster: ClusterConfig,
    cost: CostModel,
    prompt: Sequence[int],
    max_tokens: int,
    *,
    predictor: str = "shadow",
    seed: int = 0,
    eos_token: int | None = EOS_TOKEN,
    shadow_model: ToyMoEModel | None = None,
    start_time: float = 0.0,
    q: int = 0,
) -> DecodeResult:
    """Simulate ``max_tokens`` decode iterations of ``prompt``.

    ``predictor`` selects where prefetch decisions come from: the shadow
    model (``shadow``), a seeded uniform draw of k experts per layer
    (``random``) or nothing, loading only after the gate (``none``).
    """
    cfg = full_model.config
    cluster.check_model(cfg)
    if predictor not in PREDICTORS:
        raise ConfigError(f"unknown predictor {predictor!r}")
    if max_tokens < 1:
        raise ConfigError("max_tokens must be >= 1")
    use_shadow = predictor == "shadow"
    if not use_shadow:
        policy = NO_ALIGNMENT
    elif shadow_model is None:
        if shadow is None:
            raise ConfigError("predictor 'shadow' needs a ShadowConfig or a shadow model")
        shadow_model = make_shadow(full_model, shadow.bits)

    L, k, E = cfg.num_layers, cfg.top_k, cfg.num_experts
    NG = cluster.num_groups
    groups = plan_groups(cluster)
    t_main, t_worker = to_ticks(cost.t_main), to_ticks(cost.t_worker)
    t_shadow = to_ticks(cost.shadow_time)
    t_load = to_ticks(cost.load_time(cluster.expert_param_bytes))
    total = max_tokens * L

    env = Environment(to_ticks(start_time))
    trace = EventTrace()
    emit = trace.emit
    workers = [
        WorkerState(w, g, cluster.memory_budget_bytes, cluster.expert_param_bytes)
        for g, ws in enumerate(groups)
        for w in ws
    ]
    link_free = [env.now] * cluster.num_workers
    lan_free = [env.now]

    def events(name):
        return [env.event(f"{name}{g}") for g in range(total)]

    gate_ev, pred_ev, ready_ev, ec_done, main_started = (
        events(n) for n in ("gate", "pred", "ready", "ec", "mstart")
    )
    iter_done = [env.event(f"iter{n}") for n in range(max_tokens + 1)]

    main_state, _ = prefill(full_model, prompt)
    shadow_state = prefill(shadow_model, prompt)[0] if use_shadow else None
    iter_done[0].succeed(feedback_from(main_state))

    result = DecodeResult([], trace, [], start_ticks=env.now)
    rng = np.random.default_rng(seed)
    random_picks = (
        [tuple(int(e) for e in rng.choice(E, size=k, replace=False)) for _ in range(total)]
        if predictor == "random"
        else None
    )
    for n in range(1, max_tokens + 1):
        if n == 1 or (use_shadow and (policy.token_fires(n) or policy.kv_fires(n))):
            for l in range(min(NG, L)):
                trace.warmup_layers.add((n, l))

    def layer_of(g):
        n, l = divmod(g, L)
        return n + 1, l

    def load(w: int, expert: ExpertId, g: int):
        start = max(env.now, link_free[w])
        link_free[w] = start + t_load
        if start > env.now:
            yield env.until(start)
        ws = workers[w]
        evicted = ws.evict_all()
        if evicted:
            emit(env.now, Kind.Evict, _worker(w), experts=[[e.layer, e.index] for e in evicted])
        try:
            ws.admit(expert)
        except Exception as exc:
            raise SimulationError(str(exc), trace.dump(50)) from exc
        n, _ = layer_of(g)
        emit(env.now, Kind.LoadStart, _worker(w), iteration=n, layer=expert.layer, expert=expert.index,
             resident=len(ws.resident))
        yield env.timeout(t_load)
        emit(env.now, Kind.LoadEnd, _worker(w), iteration=n, layer=expert.layer, expert=expert.index)

    def main():
        nonlocal main_state
        for n in range(1, max_tokens + 1):
            token, routing, main_state = forward_token(full_model, main_state)
            for l in range(L):
                g = (n - 1) * L + l
                main_started[g].succeed()
                emit(env.now, Kind.MainStart, "main", iteration=n, layer=l)
                yield env.timeout(t_main)
                emit(env.now, Kind.MainEnd, "main", iteration=n, layer=l)
                gate_time = env.now
                gate_ev[g].succeed(routing[l].experts)
                yield ready_ev[g]
                stall = env.now - gate_time
                trace.layer_stalls[(n, l)] = stall
                if stall:
                    emit(gate_time, Kind.Stall, "main", iteration=n, layer=l, duration=stall / 1e12)
                group = groups[assign_layer(l, NG)]
                for w in group:
                    emit(env.now, Kind.ComputeStart, _worker(w), iteration=n, layer=l)
                yield env.timeout(t_worker)
                for w in group:
                    emit(env.now, Kind.ComputeEnd, _worker(w), iteration=n, layer=l)
                ec_done[g].succeed()
            emit(env.now, Kind.TokenEmitted, "main", iteration=n, token=token)
            result.tokens.append(token)
            iter_done[n].succeed(feedback_from(main_state))
            if eos_token is not None and token == eos_token:
                return

    def shadow_node():
        nonlocal shadow_state
        for n in range(1, max_tokens + 1):
            tok_due, kv_due = policy.token_fires(n), policy.kv_fires(n)
            feedback = None
            if tok_due or kv_due:
                yield iter_done[n - 1]
                feedback = iter_done[n - 1].value
                nbytes = alignment_payload_bytes(L, cfg.hidden_dim, token=tok_due, kv=kv_due)
                start = max(env.now, lan_free[0])
                lan_free[0] = start + to_ticks(cost.lan_time(nbytes))
                yield env.until(start)
                emit(env.now, Kind.AlignStart, "shadow", iteration=n, bytes=nbytes)
                yield env.until(lan_free[0])
                emit(env.now, Kind.AlignEnd, "shadow", iteration=n, bytes=nbytes)
            preds, _, shadow_state = shadow_decode_step(shadow_model, shadow_state, policy, feedback, n)
            for l in range(L):
                g = (n - 1) * L + l
                if g >= L:
                    yield main_started[g - L]
                emit(env.now, Kind.ComputeStart, "shadow", iteration=n, layer=l)
                yield env.timeout(t_shadow)
                emit(env.now, Kind.ComputeEnd, "shadow", iteration=n, layer=l)
                pred_ev[g].succeed(preds[l].experts)

    def loader(gid: int):
        members = groups[gid]
        prev = None
        for g in range(total):
            n, l = layer_of(g)
            if assign_layer(l, NG) != gid:
                continue
            if prev is not None:
                yield ec_done[prev]
            if predictor == "random":
                chosen, avail = random_picks[g], True
            elif predictor == "none":
                yield gate_ev[g]
                chosen, avail = None, False
            else:
                if not (pred_ev[g].triggered or gate_ev[g].triggered):
                    yield env.any_of([pred_ev[g], gate_ev[g]])
                avail = pred_ev[g].triggered
                chosen = pred_ev[g].value if avail else None
            if chosen is None:
                chosen = gate_ev[g].value
            assignment = assign_experts(chosen, members)
            loads = [env.process(load(w, ExpertId(l, e), g), f"load{g}w{w}") for e, w in assignment.items()]
            yield gate_ev[g]
            true = gate_ev[g].value
            result.records.append(RoutingRecord(q, n, l, frozenset(true), frozenset(chosen), avail))
            resident = {w: e for e, w in assignment.items()}
            reloads = handle_misprediction(l, true, resident)
            if reloads:
                result.mispredicts += 1
                emit(env.now, Kind.Mispredict, "main", iteration=n, layer=l,
                     predicted=sorted(chosen), true=sorted(true))
                loads += [env.process(load(w, eid, g), f"reload{g}w{w}") for eid, w in reloads]
            yield env.all_of(loads)
            ready_ev[g].succeed()
            prev = g

    main_proc = env.process(main(), "main")
    if use_shadow:
        env.process(shadow_node(), "shadow")
    for gid in range(NG):
        env.process(loader(gid), f"loader{gid}")
    env.run()
    if not main_proc.triggered:
        blocked = ", ".join(f"{p.name} waiting on {p.waiting_on!r}" for p in env.blocked())
        raise SimulationError(f"decode pipeline deadlocked: {blocked}", trace.dump(50))

    n_done = len(result.tokens)
    result.records = [r for r in result.records if r.n <= n_done]
    result.records.sort(key=lambda r: (r.q, r.n, r.l))
    result.warmup = {key for key in trace.warmup_layers if key[0] <= n_done}
    trace.warmup_layers = result.warmup
    return result
