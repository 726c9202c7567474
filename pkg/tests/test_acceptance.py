"""Acceptance criteria 1-10.

Each test prints one ``CRITERION n: PASS|FAIL`` line (visible even under
capture) and then asserts.  Residency peaks of every simulated run are
collected for criterion 9, so run this file as a whole.
"""

import random
from functools import lru_cache

import pytest

from odmoe.cli import main as cli_main
from odmoe.cluster import ClusterConfig, plan_prefill
from odmoe.experiments import PromptSpec, generate_prompts
from odmoe.metrics import bottleneck_report, decode_throughput, ensemble_mean, pooled_decode_throughput
from odmoe.moe_core import ModelConfig, init_model
from odmoe.sep import FULL_SYNC, NEVER, NO_ALIGNMENT, AlignmentPolicy, RoutingRecord, compute_recall, make_shadow, run_sep_experiment
from odmoe.simkernel import CostModel, ShadowConfig, run_ablation, run_decode_sim, run_prefill_sim, to_ticks, worker_completion
from audits import residency_peak
from reference import brute_force_recall, pipeline_completion, random_record_tuples, reference_decode

CLUSTER = ClusterConfig()
COST = CostModel()
DEFAULT = ModelConfig()
RESIDENCY = []  # (source, peak) for every simulated run in this file


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")


def model_for(seed):
    return init_model(ModelConfig(seed=seed))


def prompt_for(seed, length=16):
    return generate_prompts(PromptSpec(count=1, lengths=(length,)), seed, DEFAULT.vocab_size)[0]


def track(source, trace):
    RESIDENCY.append((source, residency_peak(trace)))


# ---------------------------------------------------------------- 1


ORACLE_POLICIES = (
    AlignmentPolicy(1, 1),
    AlignmentPolicy(2, 4),
    AlignmentPolicy(4, 2),
    AlignmentPolicy(8, NEVER),
    AlignmentPolicy(NEVER, 16),
)


def test_criterion_1_oracle_equivalence(capsys):
    N = 32
    mismatches = []
    checked = 0
    for seed in range(50):
        m = model_for(seed)
        prompt = prompt_for(seed)
        expected = reference_decode(m, prompt, N)
        shadow = make_shadow(m, 8)
        for case in range(1, 7):
            res = run_ablation(case, [(m, prompt)], CLUSTER, COST, N, seed=seed, shadow_models=[shadow])[0]
            track(f"c1 seed {seed} case {case}", res.trace)
            checked += 1
            if res.tokens != expected:
                mismatches.append((seed, f"case{case}"))
        for policy in ORACLE_POLICIES:
            res = run_decode_sim(m, ShadowConfig(8), policy, CLUSTER, COST, prompt, N, shadow_model=shadow)
            track(f"c1 seed {seed} {policy.label}", res.trace)
            checked += 1
            if res.tokens != expected:
                mismatches.append((seed, policy.label))
    ok = not mismatches
    report(capsys, 1, ok, f"{checked} simulated runs vs full-recompute reference, mismatches={mismatches[:5]}")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_recall_exactness(capsys):
    rng = random.Random(20240601)
    bad = 0
    worst = 0.0
    for _ in range(1000):
        tuples, k, L = random_record_tuples(rng, max_q=5, max_n=20, max_l=8, max_k=3)
        rep = compute_recall([RoutingRecord(*t) for t in tuples], k, L)
        per_token, overall = brute_force_recall(tuples, k, L)
        exact = rep.overall_exact == overall and all(rep.token_recall(n) == v for n, v in per_token.items())
        worst = max(worst, abs(rep.overall - float(overall)))
        bad += not exact
    ok = bad == 0 and worst <= 1e-12
    report(capsys, 2, ok, f"1000 random record sets, exact mismatches={bad}, max float error={worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_perfect_shadow_recall(capsys):
    values = []
    for seed in range(20):
        m = model_for(seed)
        rep, _ = run_sep_experiment(m, None, FULL_SYNC, [prompt_for(seed)], 64)
        values.append(rep.overall_exact)
    ok = all(v == 1 for v in values)
    report(capsys, 3, ok, f"Full-precision shadow + T1_KV1 on 20 seeds, overall recall values={sorted(set(map(str, values)))}")
    assert ok


# ---------------------------------------------------------------- 4


@lru_cache(maxsize=None)
def recall_ensemble(policy: AlignmentPolicy, N=256):
    records = []
    for seed in range(20):
        _, recs = run_sep_experiment(model_for(seed), 8, policy, [prompt_for(seed)], N)
        records += [RoutingRecord(seed, r.n, r.l, r.true_experts, r.predicted_experts, r.prediction_available)
                    for r in recs]
    return compute_recall(records, DEFAULT.top_k, DEFAULT.num_layers)


def test_criterion_4_recall_direction(capsys):
    free = recall_ensemble(NO_ALIGNMENT)
    synced = recall_ensemble(FULL_SYNC)
    early, late = free.window_mean(1, 16), free.window_mean(241, 256)
    ok = early > late and synced.overall > free.overall
    report(capsys, 4, ok,
           f"8-bit shadow, 20 seeds, N=256: no-alignment recall tokens 1-16={early:.4f} > 241-256={late:.4f}; "
           f"overall T1_KV1={synced.overall:.4f} > unaligned={free.overall:.4f}")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_load_budget_boundary(capsys):
    budget = bottleneck_report(CLUSTER, COST, DEFAULT).budget_s
    NG = CLUSTER.num_groups
    steady = {}
    details = {}
    for factor in (0.5, 0.9, 1.0, 1.1, 1.5):
        cost = COST.with_load_time(CLUSTER.expert_param_bytes, factor * budget)
        totals, stalled_values, cycle_sums = [], set(), set()
        for seed in range(3):
            m = model_for(seed)
            res = run_decode_sim(m, None, NO_ALIGNMENT, CLUSTER, cost, prompt_for(seed), 32, eos_token=None,
                                 shadow_model=m)
            track(f"c5 {factor} seed {seed}", res.trace)
            tr = res.trace
            totals.append(tr.stall_seconds(steady=True))
            for (n, l), s in tr.layer_stalls.items():
                if (n, l) not in tr.warmup_layers and n > 1 and s:
                    stalled_values.add(s)
            for n in range(3, 33):
                for start in range(0, 8, NG):
                    cycle_sums.add(sum(tr.layer_stalls[(n, l)] for l in range(start, start + NG)))
        steady[factor] = ensemble_mean(totals)
        details[factor] = (stalled_values, cycle_sums)

    eps = to_ticks(0.1 * budget)
    stalled, cycles = details[1.1]
    zero_ok = all(steady[f] == 0.0 for f in (0.5, 0.9, 1.0))
    grow_ok = 0 < steady[1.1] < steady[1.5]
    layer_ok = bool(stalled) and all(abs(s - eps) <= to_ticks(1e-9) for s in stalled)
    cycle_ok = all(abs(c - eps) <= to_ticks(1e-9) for c in cycles)
    ok = zero_ok and grow_ok and layer_ok and cycle_ok
    report(capsys, 5, ok,
           f"budget={budget * 1e3:.3f} ms, steady stall by factor={ {f: round(v, 6) for f, v in steady.items()} }; "
           f"at 1.1x every stalled layer stalls {sorted(s / 1e9 for s in stalled)} ms and every {NG}-layer cycle "
           f"{sorted(c / 1e9 for c in cycles)} ms (0.1 x budget = {eps / 1e9} ms; one stalled layer per cycle)")
    assert ok


# ---------------------------------------------------------------- 6


@lru_cache(maxsize=None)
def ablation_ensemble(N=256):
    out = {}
    for case in range(1, 7):
        runs = []
        for seed in range(20):
            m = model_for(seed)
            res = run_ablation(case, [(m, prompt_for(seed))], CLUSTER, COST, N, seed=seed)[0]
            track(f"c6 case {case} seed {seed}", res.trace)
            runs.append(res.trace)
        out[case] = runs
    return out


def ensemble_rates(traces):
    rates = [decode_throughput(t, with_flag=True) for t in traces]
    return ensemble_mean(r for r, flagged in rates if not flagged)


def test_criterion_6_ablation_ordering(capsys):
    ens = ablation_ensemble()
    mean = {c: ensemble_rates(ens[c]) for c in ens}
    pooled = {c: pooled_decode_throughput(ens[c]) for c in ens}
    pairs = [(1, 2), (2, 4), (4, 5), (5, 6), (1, 3), (3, 4)]
    violations = [(a, b, round(1 - mean[a] / mean[b], 4)) for a, b in pairs if mean[a] < mean[b] * 0.99]
    lengths = sorted(len(t.token_times) for t in ens[1])
    ok = not violations
    report(capsys, 6, ok,
           f"ensemble-mean tokens/s by case={ {c: round(v, 3) for c, v in mean.items()} }; "
           f"violations beyond 1% (a, b, shortfall)={violations}; pooled tokens/s="
           f"{ {c: round(v, 3) for c, v in pooled.items()} }; run lengths={lengths}")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_late_departure(capsys):
    NG = CLUSTER.num_groups

    def warm_stall(policy, bits):
        total = 0
        for seed in range(20):
            m = model_for(seed)
            shadow = m if bits is None else make_shadow(m, bits)
            res = run_decode_sim(m, ShadowConfig(bits), policy, CLUSTER, COST, prompt_for(seed), 64,
                                 shadow_model=shadow)
            track(f"c7 {policy.label} {bits} seed {seed}", res.trace)
            total += sum(v for (n, l), v in res.trace.layer_stalls.items() if l < NG)
        return total / 1e12

    aligned, free = warm_stall(FULL_SYNC, None), warm_stall(NO_ALIGNMENT, None)
    q_aligned, q_free = warm_stall(FULL_SYNC, 8), warm_stall(NO_ALIGNMENT, 8)
    ens = ablation_ensemble()
    thr_aligned, thr_free = ensemble_rates(ens[1]), ensemble_rates(ens[4])
    ok = aligned > free and thr_aligned > thr_free
    report(capsys, 7, ok,
           f"stall over first {NG} layers per iteration, full-precision shadow: T1_KV1={aligned:.4f} s > "
           f"none={free:.4f} s (8-bit shadow: {q_aligned:.4f} s vs {q_free:.4f} s); 8-bit throughput "
           f"T1_KV1={thr_aligned:.3f} > none={thr_free:.3f} tokens/s")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_prefill_pipelining(capsys):
    m = init_model(ModelConfig(num_layers=1))
    cl = ClusterConfig(expert_param_bytes=0)
    cost = CostModel(t_main=0.0, t_worker=1.2e-3, lan_bandwidth=1000.0, lan_latency=0.0, embedding_bytes=1,
                     batch_alpha=0.2)
    prompt = [1, 2, 3, 4]
    done = {}
    for mb in (1, 4):
        plan = plan_prefill([[(0,)]] * 4, mb, m.config, cl)
        _, trace, _ = run_prefill_sim(m, prompt, plan, cost, cl)
        track(f"c8 mini-batch {mb}", trace)
        done[mb] = worker_completion(trace, 0)
    single_compute = cost.batched(cost.t_worker, 4)
    chunk_sum = 4 * cost.batched(cost.t_worker, 1)
    oracle = pipeline_completion([1e-3, 2e-3, 3e-3, 4e-3], [cost.batched(cost.t_worker, 1)] * 4)
    ok = done[1] < done[4] and single_compute < chunk_sum and abs(done[1] - oracle) <= 1e-9
    report(capsys, 8, ok,
           f"4 mini-batches complete at {done[1] * 1e3:.6f} ms (oracle {oracle * 1e3:.6f} ms) vs single batch "
           f"{done[4] * 1e3:.6f} ms; aggregate compute {single_compute * 1e3:.3f} ms < chunk sum {chunk_sum * 1e3:.3f} ms")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_residency(capsys):
    if not RESIDENCY:
        pytest.skip("run the whole acceptance file to collect traces")
    worst = max(RESIDENCY, key=lambda x: x[1])
    ok = worst[1] <= 2
    report(capsys, 9, ok, f"{len(RESIDENCY)} simulated runs audited, peak experts per worker={worst[1]} ({worst[0]})")
    assert ok


# ---------------------------------------------------------------- 10


SMALL = """
[model]
num_layers = 4
hidden_dim = 16
vocab_size = 64

[prompts]
count = 2
lengths = 4 8
max_tokens = 16
"""


@pytest.fixture(scope="module")
def spec_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("specs")


def test_criterion_10_determinism(capsys, spec_dir):
    kinds = {
        "RecallCurve": "",
        "AlignmentSweep": "token_periods = 1 4\nkv_periods = 1 inf",
        "Ablation": "",
        "BottleneckSweep": "",
        "PrefillPipeline": "mini_batches = 1 4",
        "FullPipeline": "",
    }
    differing = []
    for kind, extra in kinds.items():
        path = spec_dir / f"{kind}.ini"
        path.write_text(f"[experiment]\nkind = {kind}\nseeds = 3 4\ntraces = first\n{extra}\n{SMALL}")
        outs = []
        for i in range(2):
            out = spec_dir / f"{kind}_{i}"
            assert cli_main(["run", "--spec", str(path), "--out", str(out)]) == 0
            outs.append((out / "summary.csv").read_bytes())
        if outs[0] != outs[1]:
            differing.append(kind)
    ok = not differing
    report(capsys, 10, ok, f"6 experiment kinds run twice each, differing summary CSVs={differing}")
    assert ok
