"""Batched prefill with mini-batch pipelining between main node and workers.

Per layer the main node runs the non-expert part for the whole prompt, then
streams mini-batches of embeddings to the workers hosting the routed
experts (one LAN transfer at a time per sender, chunk-major order).  A
worker computes a mini-batch once it has arrived, the previous mini-batch
finished and the expert is loaded, then streams the result back.  Expert
loads run ahead on each worker's link, keeping at most two layers resident.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

from ..cluster import ClusterConfig, PrefillPlan
from ..errors import PlanningError
from ..moe_core import InferenceState, ToyMoEModel, prefill
from .costs import CostModel
from .engine import to_seconds, to_ticks
from .trace import EventTrace, Kind


def run_prefill_sim(
    model: ToyMoEModel,
    prompt: Sequence[int],
    plan: PrefillPlan,
    cost: CostModel,
    cluster: ClusterConfig,
    start_time: float = 0.0,
) -> tuple[InferenceState, EventTrace, float]:
    """Returns the prefilled state, the trace and the prefill completion time (s).

    The plan supplies timing only; numerics always come from
    :func:`odmoe.moe_core.prefill`.
    """
    cfg = model.config
    if len(plan.layers) != cfg.num_layers:
        raise PlanningError(f"plan has {len(plan.layers)} layers, model has {cfg.num_layers}")
    if plan.num_tokens != len(prompt):
        raise PlanningError(f"plan covers {plan.num_tokens} tokens, prompt has {len(prompt)}")
    state, _ = prefill(model, prompt)

    trace = EventTrace()
    emit = trace.emit
    t0 = to_ticks(start_time)
    P = len(prompt)
    t_load = to_ticks(cost.load_time(cluster.expert_param_bytes))

    def lan(nbytes):
        return to_ticks(cost.lan_time(nbytes))

    sender_free = defaultdict(lambda: t0)  # LAN senders: "main" and each worker
    link_free = defaultdict(lambda: t0)
    gpu_free = defaultdict(lambda: t0)
    resident = defaultdict(list)  # worker -> [(layer, expert)]
    layer_done_on = defaultdict(dict)  # worker -> layer -> compute end
    main_free = t0

    for l, entries in enumerate(plan.layers):
        # expert loads for this layer; evict layer l-2 once it has computed
        load_end = {}
        for eb in entries:
            w = eb.worker
            start = max(link_free[w], layer_done_on[w].get(l - 2, t0))
            stale = [x for x in resident[w] if x[0] <= l - 2]
            if stale:
                resident[w] = [x for x in resident[w] if x[0] > l - 2]
                emit(start, Kind.Evict, f"worker:{w}", experts=[list(x) for x in stale])
            resident[w].append((l, eb.expert.index))
            emit(start, Kind.LoadStart, f"worker:{w}", layer=l, expert=eb.expert.index, resident=len(resident[w]))
            link_free[w] = start + t_load
            emit(link_free[w], Kind.LoadEnd, f"worker:{w}", layer=l, expert=eb.expert.index)
            load_end[eb.expert.index] = link_free[w]

        emit(main_free, Kind.MainStart, "main", layer=l, tokens=P)
        main_free += to_ticks(cost.batched(cost.t_main, P))
        emit(main_free, Kind.MainEnd, "main", layer=l, tokens=P)

        depth = max((len(eb.batches) for eb in entries), default=0)
        sends = [(i, eb) for i in range(depth) for eb in entries if i < len(eb.batches)]
        returns = []
        for i, eb in sends:
            batch = eb.batches[i]
            w, e = eb.worker, eb.expert.index
            start = max(sender_free["main"], main_free)
            arrive = start + lan(len(batch) * cost.embedding_bytes)
            sender_free["main"] = arrive
            emit(start, Kind.TransferStart, "lan:main", layer=l, expert=e, batch=i, to=w, tokens=len(batch))
            emit(arrive, Kind.TransferEnd, "lan:main", layer=l, expert=e, batch=i, to=w, tokens=len(batch))

            c_start = max(arrive, gpu_free[w], load_end[e])
            c_end = c_start + to_ticks(cost.batched(cost.t_worker, len(batch)))
            gpu_free[w] = c_end
            layer_done_on[w][l] = c_end
            emit(c_start, Kind.ComputeStart, f"worker:{w}", layer=l, expert=e, batch=i, tokens=len(batch))
            emit(c_end, Kind.ComputeEnd, f"worker:{w}", layer=l, expert=e, batch=i, tokens=len(batch))
            returns.append((c_end, w, e, i, len(batch)))

        # results flow back in completion order, one transfer at a time per worker
        layer_ready = main_free
        for c_end, w, e, i, ntok in sorted(returns):
            sender = f"lan:worker:{w}"
            start = max(sender_free[sender], c_end)
            back = start + lan(ntok * cost.embedding_bytes)
            sender_free[sender] = back
            emit(start, Kind.TransferStart, f"worker:{w}", layer=l, expert=e, batch=i, to="main", tokens=ntok)
            emit(back, Kind.TransferEnd, f"worker:{w}", layer=l, expert=e, batch=i, to="main", tokens=ntok)
            layer_ready = max(layer_ready, back)
        main_free = layer_ready

    return state, trace, to_seconds(main_free)


def worker_completion(trace: EventTrace, worker: int, layer: int = 0) -> float:
    """Time the last expert compute of ``layer`` finished on ``worker``."""
    ends = [
        e.time
        for e in trace.of_kind(Kind.ComputeEnd)
        if e.subject == f"worker:{worker}" and e.payload.get("layer") == layer
    ]
    if not ends:
        raise PlanningError(f"worker {worker} computed nothing at layer {layer}")
    return to_seconds(max(ends))
