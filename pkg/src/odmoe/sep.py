"""Shadow-model expert prediction with token and KV-cache alignment.

A shadow model (usually a grid-quantized copy of the main model) decodes in
lockstep with the main model; its routing decisions for iteration ``n`` are
the predictions for the main model's iteration ``n``.  Alignment replaces the
shadow's pending token and/or the previous position's KV rows with the main
model's before the shadow's forward pass.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, InputError
from .moe_core import (
    InferenceState,
    RoutingDecision,
    ToyMoEModel,
    copy_model,
    forward_token,
    prefill,
    quantize_model,
)

NEVER = math.inf
EOS_TOKEN = 0


@dataclass(frozen=True)
class AlignmentPolicy:
    """Alignment periods in decode iterations; ``math.inf`` disables one."""

    token_period: float = 1
    kv_period: float = 1

    def __post_init__(self):
        for name in ("token_period", "kv_period"):
            p = getattr(self, name)
            if p != NEVER and (int(p) != p or p < 1):
                raise ConfigError(f"{name} must be a positive integer or inf, got {p!r}")

    def token_fires(self, n: int) -> bool:
        return self.token_period != NEVER and n % int(self.token_period) == 0

    def kv_fires(self, n: int) -> bool:
        return self.kv_period != NEVER and n % int(self.kv_period) == 0

    @property
    def enabled(self) -> bool:
        return self.token_period != NEVER or self.kv_period != NEVER

    @property
    def label(self) -> str:
        def fmt(p):
            return "inf" if p == NEVER else str(int(p))

        return f"T{fmt(self.token_period)}_KV{fmt(self.kv_period)}"

    @classmethod
    def parse(cls, text: str) -> "AlignmentPolicy":
        """Parse labels such as ``T1_KV4`` or ``Tinf_KVinf``."""
        try:
            t, kv = text.strip().upper().split("_")
            assert t.startswith("T") and kv.startswith("KV")
            vals = [NEVER if v in ("INF", "") else int(v) for v in (t[1:], kv[2:])]
        except (ValueError, AssertionError):
            raise ConfigError(f"bad alignment policy {text!r}, expected e.g. T1_KV4") from None
        return cls(*vals)


FULL_SYNC = AlignmentPolicy(1, 1)
NO_ALIGNMENT = AlignmentPolicy(NEVER, NEVER)


@dataclass(frozen=True)
class MainFeedback:
    """What the main model sends after finishing an iteration."""

    token: int
    kv_entries: list[tuple[np.ndarray, np.ndarray]]


def feedback_from(state: InferenceState) -> MainFeedback:
    """Pending token plus KV rows of the most recently processed position."""
    return MainFeedback(state.pending_token, state.kv.entries(state.kv.length - 1))


def align_token(state: InferenceState, true_token: int, vocab_size: int | None = None) -> InferenceState:
    if not state.token_ids:
        raise InputError("cannot align an empty shadow state")
    if true_token < 0 or (vocab_size is not None and true_token >= vocab_size):
        raise InputError(f"token id {true_token} outside vocabulary")
    state.token_ids[-1] = int(true_token)
    return state


def align_kv(
    state: InferenceState, entries: Sequence[tuple[np.ndarray, np.ndarray]], position: int | None = None
) -> InferenceState:
    """Overwrite every layer's KV row at ``position`` (default: the last processed one)."""
    kv = state.kv
    if position is None:
        position = kv.length - 1
    if not 0 <= position < kv.length:
        raise AlignmentError(f"position {position} not present in shadow KV of length {kv.length}")
    if len(entries) != kv.num_layers:
        raise AlignmentError(f"feedback has {len(entries)} layers, shadow has {kv.num_layers}")
    for l, (k, v) in enumerate(entries):
        k, v = np.asarray(k), np.asarray(v)
        if k.shape != (kv.dim,) or v.shape != (kv.dim,):
            raise AlignmentError(f"layer {l}: feedback shapes {k.shape}/{v.shape} do not match dim {kv.dim}")
        kv.write(l, position, k, v)
    return state


def alignment_payload_bytes(num_layers: int, hidden_dim: int, token: bool = False, kv: bool = True) -> int:
    """Bytes on the wire for one alignment message (float64 rows, int64 token id)."""
    return (num_layers * 2 * hidden_dim * 8 if kv else 0) + (8 if token else 0)


def shadow_decode_step(
    shadow_model: ToyMoEModel,
    shadow_state: InferenceState,
    policy: AlignmentPolicy,
    main_feedback: MainFeedback | None,
    n: int,
) -> tuple[list[RoutingDecision], int, InferenceState]:
    """Apply the alignments due at iteration ``n`` then run one shadow forward pass."""
    tok_due, kv_due = policy.token_fires(n), policy.kv_fires(n)
    if (tok_due or kv_due) and main_feedback is None:
        raise AlignmentError(f"iteration {n} requires main feedback under {policy.label}")
    if tok_due:
        align_token(shadow_state, main_feedback.token, shadow_model.config.vocab_size)
    if kv_due:
        align_kv(shadow_state, main_feedback.kv_entries)
    token, routing, shadow_state = forward_token(shadow_model, shadow_state)
    return routing, token, shadow_state


def make_shadow(model: ToyMoEModel, bits: int | None) -> ToyMoEModel:
    """Quantized shadow, or an exact full-precision copy when ``bits`` is None."""
    return copy_model(model) if bits is None else quantize_model(model, bits)


@dataclass(frozen=True)
class RoutingRecord:
    q: int
    n: int
    l: int
    true_experts: frozenset
    predicted_experts: frozenset
    prediction_available: bool = True

    def to_json(self) -> str:
        return json.dumps(
            {
                "q": self.q,
                "n": self.n,
                "l": self.l,
                "true": sorted(self.true_experts),
                "pred": sorted(self.predicted_experts),
                "avail": self.prediction_available,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "RoutingRecord":
        d = json.loads(line)
        return cls(d["q"], d["n"], d["l"], frozenset(d["true"]), frozenset(d["pred"]), bool(d["avail"]))

    @property
    def correct(self) -> int:
        if not self.prediction_available:
            return 0
        return len(self.true_experts & self.predicted_experts)


@dataclass
class RecallReport:
    """Per-token and overall recall.

    ``correct[n]`` is the summed c(q, n, l) over prompts and layers and
    ``present[n]`` is the number of prompts that produced token ``n``.
    ``per_token[i]`` is the recall of token ``i + 1``; tokens no prompt
    reached are ``nan``.
    """

    k: int
    num_layers: int
    correct: dict[int, int] = field(default_factory=dict)
    present: dict[int, int] = field(default_factory=dict)

    @property
    def max_token(self) -> int:
        return max(self.present, default=0)

    def token_recall(self, n: int) -> Fraction | None:
        a = self.present.get(n, 0)
        if a == 0:
            return None
        return Fraction(self.correct.get(n, 0), self.k * self.num_layers * a)

    @property
    def per_token(self) -> list[float]:
        out = []
        for n in range(1, self.max_token + 1):
            r = self.token_recall(n)
            out.append(math.nan if r is None else float(r))
        return out

    @property
    def overall_exact(self) -> Fraction:
        total = sum(self.present.values())
        if total == 0:
            raise InputError("no tokens observed")
        return Fraction(sum(self.correct.values()), self.k * self.num_layers * total)

    @property
    def overall(self) -> float:
        return float(self.overall_exact)

    def window_mean(self, first: int, last: int) -> float:
        """Unweighted mean of per-token recall over tokens ``first..last`` that exist."""
        vals = [self.token_recall(n) for n in range(first, last + 1)]
        vals = [v for v in vals if v is not None]
        if not vals:
            return math.nan
        return float(sum(vals) / len(vals))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token_index", "recall"])
            for n, r in enumerate(self.per_token, start=1):
                w.writerow([n, "" if math.isnan(r) else repr(r)])


def compute_recall(records: Iterable[RoutingRecord], k: int, num_layers: int) -> RecallReport:
    """Recall per token and overall; predictions marked unavailable score zero."""
    layers_seen = defaultdict(set)
    report = RecallReport(k, num_layers)
    for rec in records:
        if len(rec.true_experts) != k:
            raise InputError(f"record {rec.q},{rec.n},{rec.l} has {len(rec.true_experts)} true experts, k={k}")
        if rec.prediction_available and len(rec.predicted_experts) != k:
            raise InputError(f"record {rec.q},{rec.n},{rec.l} has {len(rec.predicted_experts)} predictions, k={k}")
        if not 0 <= rec.l < num_layers:
            raise InputError(f"record layer {rec.l} out of range")
        seen = layers_seen[(rec.q, rec.n)]
        if rec.l in seen:
            raise InputError(f"duplicate record for q={rec.q} n={rec.n} l={rec.l}")
        seen.add(rec.l)
        report.correct[rec.n] = report.correct.get(rec.n, 0) + rec.correct
    for (q, n), seen in layers_seen.items():
        if len(seen) != num_layers:
            raise InputError(f"prompt {q} token {n} has records for {len(seen)} of {num_layers} layers")
        report.present[n] = report.present.get(n, 0) + 1
    return report


def write_records(records: Iterable[RoutingRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[RoutingRecord]:
    with open(path) as fh:
        return [RoutingRecord.from_json(line) for line in fh if line.strip()]


@dataclass
class SepRun:
    tokens: list[int]
    shadow_tokens: list[int]
    records: list[RoutingRecord]


def run_sep_prompt(
    main_model: ToyMoEModel,
    shadow_model: ToyMoEModel | None,
    policy: AlignmentPolicy,
    prompt: Sequence[int],
    max_tokens: int,
    q: int = 0,
    eos_token: int | None = EOS_TOKEN,
) -> SepRun:
    """Lockstep driver for one prompt.

    Main feedback for iteration ``n`` is taken only after the main model
    finished iteration ``n - 1`` and the shadow's predictions are recorded
    before they are compared, so this is one valid interleaving of two
    independent decode loops.  With ``shadow_model=None`` no predictions are
    made and every record is marked unavailable.
    """
    if max_tokens < 1:
        raise InputError("max_tokens must be >= 1")
    main_state, _ = prefill(main_model, prompt)
    shadow_state = prefill(shadow_model, prompt)[0] if shadow_model is not None else None
    run = SepRun([], [], [])
    for n in range(1, max_tokens + 1):
        preds = None
        if shadow_model is not None:
            needs_fb = policy.token_fires(n) or policy.kv_fires(n)
            fb = feedback_from(main_state) if needs_fb else None
            preds, s_tok, shadow_state = shadow_decode_step(shadow_model, shadow_state, policy, fb, n)
            run.shadow_tokens.append(s_tok)
        tok, routing, main_state = forward_token(main_model, main_state)
        run.tokens.append(tok)
        for l, dec in enumerate(routing):
            pred = preds[l].expert_set if preds is not None else frozenset()
            run.records.append(RoutingRecord(q, n, l, dec.expert_set, pred, preds is not None))
        if eos_token is not None and tok == eos_token:
            break
    return run


def run_sep_experiment(
    full_model: ToyMoEModel,
    shadow_bits: int | None,
    policy: AlignmentPolicy,
    prompts: Sequence[Sequence[int]],
    max_tokens: int,
    eos_token: int | None = EOS_TOKEN,
) -> tuple[RecallReport, list[RoutingRecord]]:
    """Recall of a ``shadow_bits`` shadow (None = full precision) over ``prompts``."""
    if not prompts:
        raise InputError("no prompts given")
    shadow = make_shadow(full_model, shadow_bits)
    records = []
    for q, prompt in enumerate(prompts):
        records += run_sep_prompt(full_model, shadow, policy, prompt, max_tokens, q, eos_token).records
    cfg = full_model.config
    return compute_recall(records, cfg.top_k, cfg.num_layers), records
