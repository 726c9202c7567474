"""Experiment specs (INI files), run planning, execution and output writing.

A spec file has the sections ``experiment``, ``model``, ``cluster``,
``cost``, ``prompts``.  Every experiment kind expands into summary rows; each
row runs over every (seed, prompt) pair, where the seed fixes both the model
weights and the prompt set.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from typing import Any, Sequence

import numpy as np

from . import __version__
from .cluster import EQ1_MODES, ClusterConfig
from .errors import ConfigError
from .metrics import (
    SUMMARY_COLUMNS,
    bottleneck_report,
    decode_throughput,
    ensemble_mean,
    format_value,
    ttft,
    write_summary_csv,
)
from .moe_core import ModelConfig, ToyMoEModel, init_model
from .sep import NEVER, AlignmentPolicy, compute_recall, make_shadow, run_sep_prompt
from .simkernel import CostModel, ShadowConfig, ablation_case, run_decode_sim, run_pipeline
from .simkernel.engine import to_seconds

KINDS = {
    "RecallCurve": "per-token recall of the shadow's expert predictions for each policy",
    "AlignmentSweep": "decode throughput and recall over a grid of token/KV alignment periods",
    "Ablation": "the six prefetch/alignment cases, one summary row per case",
    "BottleneckSweep": "steady-state stall for expert load times around the load budget",
    "PrefillPipeline": "prefill completion and TTFT for several mini-batch sizes",
    "FullPipeline": "prefill followed by decoding, per policy",
}

TRACE_MODES = ("all", "first", "none")
PROMPT_STREAM = 1  # keeps prompt draws independent of weight draws for the same seed


class SpecError(ConfigError):
    """Invalid experiment spec; the message starts with ``path:line:``."""


@dataclass(frozen=True)
class PromptSpec:
    count: int = 20
    lengths: tuple[int, ...] = (16,)
    max_tokens: int = 256
    eos_token: int | None = 0


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    name: str
    seeds: tuple[int, ...]
    model: ModelConfig
    cluster: ClusterConfig
    cost: CostModel
    prompts: PromptSpec
    eq1: str = "groups"
    traces: str = "all"
    shadow_bits: int | None = 8
    policies: tuple[AlignmentPolicy, ...] = ()
    cases: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    load_factors: tuple[float, ...] = (0.5, 0.9, 1.0, 1.1, 1.5)
    mini_batches: tuple[int, ...] = (1, 2, 4)
    source: str = ""

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "name": self.name,
            "seeds": list(self.seeds),
            "model": asdict(self.model),
            "cluster": asdict(self.cluster),
            "cost": asdict(self.cost),
            "prompts": asdict(self.prompts),
            "eq1": self.eq1,
            "traces": self.traces,
            "shadow_bits": self.shadow_bits,
            "policies": [p.label for p in self.policies],
            "cases": list(self.cases),
            "load_factors": list(self.load_factors),
            "mini_batches": list(self.mini_batches),
        }
        d["prompts"]["lengths"] = list(self.prompts.lengths)
        return d


# ---------------------------------------------------------------- parsing


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    sec_line = 1
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[(.+)\]$", line)
        if m:
            current = m.group(1).strip()
            if current == section:
                sec_line = i
            continue
        if current == section and key is not None:
            name = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            if name == key.lower():
                return i
    return sec_line


def _int_list(value: str) -> tuple[int, ...]:
    out = []
    for part in value.replace(",", " ").split():
        if re.fullmatch(r"\d+-\d+", part):
            lo, hi = map(int, part.split("-"))
            if hi < lo:
                raise ValueError(f"empty range {part}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _float_list(value: str) -> tuple[float, ...]:
    return tuple(float(p) for p in value.replace(",", " ").split())


def _bits(value: str) -> int | None:
    return None if value.strip().lower() in ("full", "none") else int(value)


def _period(value: str) -> float:
    v = value.strip().lower()
    return NEVER if v in ("inf", "never") else int(v)


def _optional_int(value: str) -> int | None:
    return None if value.strip().lower() == "none" else int(value)


def _optional_float(value: str) -> float | None:
    return None if value.strip().lower() == "none" else float(value)


_SECTION_TYPES = {
    "model": (ModelConfig, {f.name: int for f in fields(ModelConfig)}),
    "cluster": (ClusterConfig, {f.name: int for f in fields(ClusterConfig)}),
    "cost": (
        CostModel,
        {
            **{f.name: float for f in fields(CostModel)},
            "shadow_layer_time": _optional_float,
            "embedding_bytes": int,
        },
    ),
    "prompts": (
        PromptSpec,
        {"count": int, "lengths": _int_list, "max_tokens": int, "eos_token": _optional_int},
    ),
}

_EXPERIMENT_KEYS = {
    "kind": str,
    "name": str,
    "seeds": _int_list,
    "eq1": str,
    "traces": str,
    "shadow_bits": _bits,
    "policies": lambda v: tuple(AlignmentPolicy.parse(p) for p in v.split()),
    "token_periods": lambda v: tuple(_period(p) for p in v.replace(",", " ").split()),
    "kv_periods": lambda v: tuple(_period(p) for p in v.replace(",", " ").split()),
    "cases": _int_list,
    "load_factors": _float_list,
    "mini_batches": _int_list,
}

_DEFAULT_POLICIES = {
    "RecallCurve": (AlignmentPolicy(NEVER, NEVER), AlignmentPolicy(1, 1)),
    "FullPipeline": (AlignmentPolicy(1, 1),),
    "PrefillPipeline": (AlignmentPolicy(1, 1),),
}

SWEEP_PERIODS = (1, 2, 4, 8, 16)


def parse_spec(text: str, path: str = "<spec>", eq1: str | None = None) -> ExperimentSpec:
    """Parse and validate spec text; errors name the offending line."""

    def fail(section, key, msg):
        raise SpecError(f"{path}:{_line_of(text, section, key)}: [{section}] {key or ''}: {msg}".replace(" : ", ": "))

    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", 1)
        raise SpecError(f"{path}:{lineno}: {exc.message if hasattr(exc, 'message') else exc}") from None

    allowed = {"experiment", *_SECTION_TYPES}
    for sec in cp.sections():
        if sec not in allowed:
            fail(sec, None, f"unknown section; expected one of {sorted(allowed)}")
    if not cp.has_section("experiment"):
        raise SpecError(f"{path}:1: missing [experiment] section")

    def read(section, table):
        values = {}
        if not cp.has_section(section):
            return values
        for key, raw in cp.items(section):
            if key not in table:
                fail(section, key, f"unknown key; expected one of {sorted(table)}")
            try:
                values[key] = table[key](raw)
            except (ValueError, ConfigError) as exc:
                fail(section, key, f"bad value {raw!r} ({exc})")
        return values

    exp = read("experiment", _EXPERIMENT_KEYS)
    if cp.has_option("model", "seed"):
        fail("model", "seed", "model seeds come from [experiment] seeds")
    built = {}
    for section, (cls, table) in _SECTION_TYPES.items():
        values = read(section, table)
        try:
            built[section] = cls(**values)
        except ConfigError as exc:
            key = next((k for k in values if k in str(exc)), None)
            fail(section, key, str(exc))

    kind = exp.get("kind")
    if kind not in KINDS:
        fail("experiment", "kind", f"expected one of {sorted(KINDS)}, got {kind!r}")
    seeds = exp.get("seeds", (0,))
    if not seeds:
        fail("experiment", "seeds", "at least one seed is required")
    if len(set(seeds)) != len(seeds):
        fail("experiment", "seeds", "seeds must be distinct")
    mode = eq1 or exp.get("eq1", "groups")
    if mode not in EQ1_MODES:
        fail("experiment", "eq1", f"expected one of {EQ1_MODES}, got {mode!r}")
    traces = exp.get("traces", "all")
    if traces not in TRACE_MODES:
        fail("experiment", "traces", f"expected one of {TRACE_MODES}, got {traces!r}")

    prompts = built["prompts"]
    if prompts.count < 1 or not prompts.lengths or min(prompts.lengths) < 1:
        fail("prompts", "count", "count and every length must be >= 1")
    if prompts.max_tokens < 1:
        fail("prompts", "max_tokens", "must be >= 1")
    try:
        built["cluster"].check_model(built["model"])
    except ConfigError as exc:
        fail("cluster", "group_size", str(exc))

    bits = exp.get("shadow_bits", 8)
    if bits is not None and not 2 <= bits <= 16:
        fail("experiment", "shadow_bits", "must be in [2, 16] or 'full'")

    if kind == "AlignmentSweep":
        if "policies" in exp:
            policies = exp["policies"]
        else:
            tps = exp.get("token_periods", SWEEP_PERIODS)
            kvs = exp.get("kv_periods", SWEEP_PERIODS)
            policies = tuple(AlignmentPolicy(t, kv) for t in tps for kv in kvs)
    else:
        policies = exp.get("policies", _DEFAULT_POLICIES.get(kind, ()))
    cases = exp.get("cases", (1, 2, 3, 4, 5, 6))
    for c in cases:
        if not 1 <= c <= 6:
            fail("experiment", "cases", f"case ids are 1..6, got {c}")
    factors = exp.get("load_factors", (0.5, 0.9, 1.0, 1.1, 1.5))
    if any(f <= 0 for f in factors):
        fail("experiment", "load_factors", "factors must be positive")
    if kind == "BottleneckSweep" and built["cluster"].expert_param_bytes == 0:
        fail("cluster", "expert_param_bytes", "BottleneckSweep needs non-zero expert size")
    batches = exp.get("mini_batches", (1, 2, 4))
    if any(m < 1 for m in batches):
        fail("experiment", "mini_batches", "mini-batch sizes must be >= 1")
    if kind in ("RecallCurve", "AlignmentSweep", "FullPipeline", "PrefillPipeline") and not policies:
        fail("experiment", "policies", "no policies to run")

    return ExperimentSpec(
        kind=kind,
        name=exp.get("name", kind.lower()),
        seeds=seeds,
        model=built["model"],
        cluster=built["cluster"],
        cost=built["cost"],
        prompts=prompts,
        eq1=mode,
        traces=traces,
        shadow_bits=bits,
        policies=tuple(policies),
        cases=tuple(cases),
        load_factors=tuple(factors),
        mini_batches=tuple(batches),
        source=text,
    )


def load_spec(path, eq1: str | None = None) -> ExperimentSpec:
    with open(path) as fh:
        text = fh.read()
    return parse_spec(text, str(path), eq1)


# ---------------------------------------------------------------- prompts


def generate_prompts(prompts: PromptSpec, seed: int, vocab_size: int) -> list[list[int]]:
    """``count`` prompts of each length, token ids drawn from 1..V-1 (never EOS=0)."""
    if prompts.count < 1 or min(prompts.lengths, default=0) < 1:
        raise ConfigError("prompt count and lengths must be >= 1")
    if vocab_size < 2:
        raise ConfigError("vocab_size must be >= 2")
    rng = np.random.default_rng([seed, PROMPT_STREAM])
    out = []
    for length in prompts.lengths:
        for _ in range(prompts.count):
            out.append([int(t) for t in rng.integers(1, vocab_size, size=length)])
    return out


# ---------------------------------------------------------------- planning


@dataclass(frozen=True)
class Row:
    index: int
    lead: tuple[tuple[str, Any], ...]
    params: tuple[tuple[str, Any], ...]

    def param(self, name, default=None):
        return dict(self.params).get(name, default)


LEAD_COLUMNS = {
    "RecallCurve": ("row", "policy", "shadow_bits"),
    "AlignmentSweep": ("row", "policy", "token_period", "kv_period"),
    "Ablation": ("case", "predictor", "policy"),
    "BottleneckSweep": ("row", "load_factor", "load_time_s", "budget_s", "bottlenecked"),
    "PrefillPipeline": ("row", "mini_batch", "policy"),
    "FullPipeline": ("row", "policy"),
}

EXTRA_COLUMNS = {
    "RecallCurve": ("recall_first_window", "recall_last_window"),
    "AlignmentSweep": ("tokens_per_s_pooled",),
    "Ablation": ("tokens_per_s_pooled",),
    "BottleneckSweep": ("steady_stall_s", "max_layer_stall_s"),
    "PrefillPipeline": ("prefill_s",),
    "FullPipeline": ("tokens_per_s_pooled", "output_tokens_per_s"),
}


def _bits_label(bits):
    return "full" if bits is None else bits


def _period_label(p):
    return "inf" if p == NEVER else int(p)


def plan_rows(spec: ExperimentSpec) -> list[Row]:
    rows = []
    if spec.kind == "RecallCurve":
        for p in spec.policies:
            rows.append(((("policy", p.label), ("shadow_bits", _bits_label(spec.shadow_bits))), (("policy", p.label),)))
    elif spec.kind == "AlignmentSweep":
        for p in spec.policies:
            lead = (("policy", p.label), ("token_period", _period_label(p.token_period)),
                    ("kv_period", _period_label(p.kv_period)))
            rows.append((lead, (("policy", p.label),)))
    elif spec.kind == "Ablation":
        for c in sorted(spec.cases):
            case = ablation_case(c)
            rows.append(((("case", c), ("predictor", case.predictor), ("policy", case.policy.label)), (("case", c),)))
    elif spec.kind == "BottleneckSweep":
        report = bottleneck_report(spec.cluster, spec.cost, spec.model, spec.eq1)
        for f in spec.load_factors:
            load = f * report.budget_s
            cost = spec.cost.with_load_time(spec.cluster.expert_param_bytes, load)
            hit = bottleneck_report(spec.cluster, cost, spec.model, spec.eq1).bottlenecked
            lead = (("load_factor", f), ("load_time_s", load), ("budget_s", report.budget_s), ("bottlenecked", hit))
            rows.append((lead, (("load_time", load),)))
    elif spec.kind == "PrefillPipeline":
        for m in spec.mini_batches:
            for p in spec.policies:
                rows.append(((("mini_batch", m), ("policy", p.label)), (("mini_batch", m), ("policy", p.label))))
    elif spec.kind == "FullPipeline":
        m = max(spec.mini_batches)
        for p in spec.policies:
            rows.append(((("policy", p.label),), (("mini_batch", m), ("policy", p.label))))
    out = []
    for i, (lead, params) in enumerate(rows):
        if "row" in LEAD_COLUMNS[spec.kind]:
            lead = (("row", i),) + lead
        out.append(Row(i, lead, params))
    return out


def config_hash(spec: ExperimentSpec, row: Row, seed: int) -> str:
    blob = {
        "kind": spec.kind,
        "model": asdict(replace(spec.model, seed=seed)),
        "cluster": asdict(spec.cluster),
        "cost": asdict(spec.cost),
        "prompts": spec.to_dict()["prompts"],
        "shadow_bits": spec.shadow_bits,
        "row": [list(kv) for kv in row.params],
    }
    text = json.dumps(blob, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- execution


@lru_cache(maxsize=8)
def _model(cfg: ModelConfig) -> ToyMoEModel:
    return init_model(cfg)


@lru_cache(maxsize=8)
def _shadow(cfg: ModelConfig, bits: int | None) -> ToyMoEModel:
    return make_shadow(_model(cfg), bits)


@dataclass
class RunResult:
    row: int
    seed: int
    prompt_id: int
    config_hash: str
    tokens: int
    decode_rate: float
    single_token: bool
    ttft_s: float
    stall_s: float
    mispredicts: int
    records: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    first_token_s: float = math.nan
    last_token_s: float = math.nan
    trace_file: str | None = None


@dataclass(frozen=True)
class Task:
    spec: ExperimentSpec
    row: Row
    seed: int
    prompt_id: int
    prompt: tuple[int, ...]
    out_dir: str | None
    write_trace: bool


def _speed_fields(trace, start_s=0.0):
    rate, flagged = decode_throughput(trace, with_flag=True)
    times = sorted(trace.token_times)
    return {
        "tokens": len(times),
        "decode_rate": rate,
        "single_token": flagged,
        "ttft_s": ttft(trace, start_s),
        "stall_s": trace.total_stall_seconds(),
        "first_token_s": to_seconds(times[0]),
        "last_token_s": to_seconds(times[-1]),
    }


def execute_task(task: Task) -> RunResult:
    spec, row = task.spec, task.row
    cfg = replace(spec.model, seed=task.seed)
    model = _model(cfg)
    eos = spec.prompts.eos_token
    N = spec.prompts.max_tokens
    q = task.prompt_id
    base = dict(row=row.index, seed=task.seed, prompt_id=q, config_hash=config_hash(spec, row, task.seed))
    trace = None
    extras = {}

    if spec.kind == "RecallCurve":
        policy = AlignmentPolicy.parse(row.param("policy"))
        run = run_sep_prompt(model, _shadow(cfg, spec.shadow_bits), policy, task.prompt, N, q, eos)
        return RunResult(**base, tokens=len(run.tokens), decode_rate=math.nan, single_token=False,
                         ttft_s=math.nan, stall_s=math.nan, mispredicts=0, records=run.records)

    if spec.kind in ("AlignmentSweep", "Ablation"):
        if spec.kind == "Ablation":
            case = ablation_case(row.param("case"))
            predictor, policy = case.predictor, case.policy
        else:
            predictor, policy = "shadow", AlignmentPolicy.parse(row.param("policy"))
        shadow_model = _shadow(cfg, spec.shadow_bits) if predictor == "shadow" else None
        res = run_decode_sim(model, ShadowConfig(spec.shadow_bits), policy, spec.cluster, spec.cost, task.prompt, N,
                             predictor=predictor, seed=task.seed * 1_000_003 + q, eos_token=eos,
                             shadow_model=shadow_model, q=q)
        trace, speed, records, mis = res.trace, _speed_fields(res.trace), res.records, res.mispredicts
    elif spec.kind == "BottleneckSweep":
        cost = spec.cost.with_load_time(spec.cluster.expert_param_bytes, row.param("load_time"))
        res = run_decode_sim(model, ShadowConfig(None), AlignmentPolicy(NEVER, NEVER), spec.cluster, cost,
                             task.prompt, N, eos_token=eos, shadow_model=model, q=q)
        trace, speed, records, mis = res.trace, _speed_fields(res.trace), res.records, res.mispredicts
        extras["steady_stall_s"] = trace.stall_seconds(steady=True)
        steady = [s for key, s in trace.layer_stalls.items() if key not in trace.warmup_layers]
        extras["max_layer_stall_s"] = to_seconds(max(steady, default=0))
    else:  # PrefillPipeline / FullPipeline
        policy = AlignmentPolicy.parse(row.param("policy"))
        n_tokens = 1 if spec.kind == "PrefillPipeline" else N
        res = run_pipeline(model, ShadowConfig(spec.shadow_bits), policy, spec.cluster, spec.cost, task.prompt,
                           n_tokens, row.param("mini_batch"), eos_token=eos,
                           shadow_model=_shadow(cfg, spec.shadow_bits), q=q)
        trace, speed, records, mis = res.trace, _speed_fields(res.trace), res.decode.records, res.decode.mispredicts
        extras["prefill_s"] = res.prefill_end
        if speed["last_token_s"] > 0:
            extras["output_tokens_per_s"] = speed["tokens"] / speed["last_token_s"]

    result = RunResult(**base, **speed, mispredicts=mis, records=records, extras=extras)
    if task.write_trace and task.out_dir is not None:
        name = f"traces/r{row.index:03d}_s{task.seed}_q{q}.jsonl"
        trace.write_jsonl(os.path.join(task.out_dir, name))
        result.trace_file = name
    return result


def build_tasks(spec: ExperimentSpec, out_dir: str | None = None) -> list[Task]:
    tasks = []
    first = True
    for row in plan_rows(spec):
        for seed in spec.seeds:
            prompts = generate_prompts(spec.prompts, seed, spec.model.vocab_size)
            for q, prompt in enumerate(prompts):
                write = spec.traces == "all" or (spec.traces == "first" and first)
                tasks.append(Task(spec, row, seed, q, tuple(prompt), out_dir, write and spec.kind != "RecallCurve"))
                first = False
    return tasks


def execute(tasks: Sequence[Task], jobs: int = 1) -> list[RunResult]:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(execute_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [execute_task(t) for t in tasks]
    results.sort(key=lambda r: (r.row, r.seed, r.prompt_id))
    return results


# ---------------------------------------------------------------- aggregation


def _pooled_records(runs: Sequence[RunResult]) -> list:
    """Records of several runs, renumbered so every run is a distinct prompt."""
    return [replace(rec, q=i) for i, r in enumerate(runs) for rec in r.records]


def summarize(spec: ExperimentSpec, rows: Sequence[Row], results: Sequence[RunResult]) -> list[dict]:
    by_row: dict[int, list[RunResult]] = {r.index: [] for r in rows}
    for res in results:
        by_row[res.row].append(res)
    N = spec.prompts.max_tokens
    out = []
    for row in rows:
        runs = by_row[row.index]
        d = dict(row.lead)
        records = _pooled_records(runs)
        d["recall_overall"] = compute_recall(records, spec.model.top_k, spec.model.num_layers).overall if records else math.nan
        if spec.kind == "RecallCurve":
            report = compute_recall(records, spec.model.top_k, spec.model.num_layers)
            w = max(1, N // 16)
            d["recall_first_window"] = report.window_mean(1, w)
            d["recall_last_window"] = report.window_mean(N - w + 1, N)
            d["mispredict_count"] = ""
            out.append(d)
            continue
        rates = [r.decode_rate for r in runs if not r.single_token]
        d["tokens_per_s_decode"] = ensemble_mean(rates) if rates else math.nan
        d["ttft_s"] = ensemble_mean(r.ttft_s for r in runs)
        d["total_stall_s"] = ensemble_mean(r.stall_s for r in runs)
        d["mispredict_count"] = sum(r.mispredicts for r in runs)
        span = sum(r.last_token_s - r.first_token_s for r in runs)
        d["tokens_per_s_pooled"] = sum(r.tokens - 1 for r in runs) / span if span > 0 else math.nan
        for key in EXTRA_COLUMNS[spec.kind]:
            if key in ("tokens_per_s_pooled",):
                continue
            vals = [r.extras[key] for r in runs if key in r.extras]
            if key == "max_layer_stall_s":
                d[key] = max(vals, default=math.nan)
            else:
                d[key] = ensemble_mean(vals) if vals else math.nan
        out.append(d)
    return out


RUN_COLUMNS = ("row", "seed", "prompt_id", "config_hash", "tokens", "tokens_per_s_decode", "ttft_s",
               "total_stall_s", "mispredict_count", "trace_file")


def write_runs_csv(path, results: Sequence[RunResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in results:
            rate = "" if r.single_token else r.decode_rate
            w.writerow([format_value(v) for v in (r.row, r.seed, r.prompt_id, r.config_hash, r.tokens, rate,
                                                  r.ttft_s, r.stall_s, r.mispredicts, r.trace_file or "")])


def write_recall_curves(path, rows: Sequence[Row], results: Sequence[RunResult], spec: ExperimentSpec) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "policy", "token_index", "recall"])
        for row in rows:
            records = _pooled_records([r for r in results if r.row == row.index])
            report = compute_recall(records, spec.model.top_k, spec.model.num_layers)
            for n, value in enumerate(report.per_token, start=1):
                w.writerow([row.index, row.param("policy"), n, format_value(value)])


def _write_manifest(path, spec, rows, results, status, error=None, files=()):
    manifest = {
        "artifact": "odmoe",
        "version": __version__,
        "status": status,
        "error": error,
        "spec": spec.to_dict(),
        "spec_text": spec.source,
        "seeds": list(spec.seeds),
        "eq1": spec.eq1,
        "rows": [{"row": r.index, "lead": {k: v for k, v in r.lead}} for r in rows],
        "runs": [
            {"row": r.row, "seed": r.seed, "prompt_id": r.prompt_id, "config_hash": r.config_hash,
             "trace_file": r.trace_file}
            for r in results
        ],
        "files": sorted(files),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def run_experiment(spec: ExperimentSpec, out_dir, jobs: int = 1) -> list[dict]:
    """Execute ``spec`` and write summary.csv, runs.csv, traces/ and manifest.json.

    On failure the manifest is written with ``status = "failed"`` before the
    exception propagates; files already written are kept.
    """
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)
    rows = plan_rows(spec)
    results: list[RunResult] = []
    files = []
    try:
        results = execute(build_tasks(spec, out_dir), jobs)
        summary = summarize(spec, rows, results)
        write_summary_csv(os.path.join(out_dir, "summary.csv"), summary, LEAD_COLUMNS[spec.kind],
                          EXTRA_COLUMNS[spec.kind])
        files.append("summary.csv")
        write_runs_csv(os.path.join(out_dir, "runs.csv"), results)
        files.append("runs.csv")
        if spec.kind == "RecallCurve":
            write_recall_curves(os.path.join(out_dir, "recall_curve.csv"), rows, results, spec)
            files.append("recall_curve.csv")
        files += [r.trace_file for r in results if r.trace_file]
    except Exception as exc:
        _write_manifest(os.path.join(out_dir, "manifest.json"), spec, rows, results, "failed",
                        f"{type(exc).__name__}: {exc}", files)
        raise
    _write_manifest(os.path.join(out_dir, "manifest.json"), spec, rows, results, "ok", None, files)
    return summary


def summary_columns(kind: str) -> list[str]:
    return list(LEAD_COLUMNS[kind]) + list(SUMMARY_COLUMNS) + list(EXTRA_COLUMNS[kind])
