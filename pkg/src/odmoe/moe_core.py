"""A small deterministic top-k MoE transformer.

Each layer is single-head causal attention followed by a top-k mixture of
two-matrix ReLU experts, both wrapped in a residual connection (no norms).
Tokens are abstract integer ids; decoding is greedy.

Weights are drawn in ``iter_matrices`` order from numpy's PCG64 generator
seeded with ``ModelConfig.seed``, each matrix uniform in
``[-1/sqrt(d), 1/sqrt(d))``.  The same order is used by checkpoints.

An :class:`InferenceState` always carries one *pending* token at the end of
``token_ids``: the token the next forward pass will consume.  Its KV entry
does not exist yet, so ``kv.length == position - 1`` between passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError, PreconditionError, RoutingError

MAX_CONTEXT = 1024
FFN_EXPANSION = 4


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    num_experts: int = 8
    top_k: int = 2
    hidden_dim: int = 64
    vocab_size: int = 256
    seed: int = 1

    def __post_init__(self):
        for name in ("num_layers", "num_experts", "top_k", "hidden_dim", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.top_k > self.num_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if self.hidden_dim < 2:
            raise ConfigError("hidden_dim must be >= 2")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")


@dataclass(frozen=True)
class ExpertId:
    layer: int
    index: int


@dataclass(frozen=True)
class RoutingDecision:
    """Top-k routing of one layer. ``experts`` is in rank order."""

    layer: int
    experts: tuple[int, ...]
    gate_scores: tuple[float, ...]

    @property
    def expert_set(self) -> frozenset[int]:
        return frozenset(self.experts)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    gate: np.ndarray  # (E, d)
    w1: np.ndarray  # (E, 4d, d)
    w2: np.ndarray  # (E, d, 4d)


@dataclass
class ToyMoEModel:
    config: ModelConfig
    layers: list[LayerWeights]
    embedding: np.ndarray  # (V, d)
    head: np.ndarray  # (d, V)
    bits: int | None = None  # None means full precision

    @property
    def is_full_precision(self) -> bool:
        return self.bits is None

    @property
    def precision(self) -> str:
        return "full" if self.bits is None else f"emulated{self.bits}"

    def iter_matrices(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield every weight matrix in canonical declaration order.

        Per layer: query, key, value, output, gate, then for each expert its
        up-projection (4d x d) and down-projection (d x 4d).  After all
        layers: the embedding table (V x d) and the output head (d x V).
        Expert matrices are views into the stacked per-layer arrays.
        """
        for l, lw in enumerate(self.layers):
            yield f"layers.{l}.wq", lw.wq
            yield f"layers.{l}.wk", lw.wk
            yield f"layers.{l}.wv", lw.wv
            yield f"layers.{l}.wo", lw.wo
            yield f"layers.{l}.gate", lw.gate
            for e in range(self.config.num_experts):
                yield f"layers.{l}.experts.{e}.w1", lw.w1[e]
                yield f"layers.{l}.experts.{e}.w2", lw.w2[e]
        yield "embedding", self.embedding
        yield "head", self.head


def matrix_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    d, h = config.hidden_dim, FFN_EXPANSION * config.hidden_dim
    shapes = []
    for _ in range(config.num_layers):
        shapes += [(d, d)] * 4 + [(config.num_experts, d)]
        shapes += [(h, d), (d, h)] * config.num_experts
    return shapes + [(config.vocab_size, d), (d, config.vocab_size)]


def assemble_model(config: ModelConfig, matrices: Sequence[np.ndarray], bits: int | None = None) -> ToyMoEModel:
    """Build a model from matrices given in declaration order."""
    shapes = matrix_shapes(config)
    if len(matrices) != len(shapes):
        raise ConfigError(f"expected {len(shapes)} matrices, got {len(matrices)}")
    for i, (m, shape) in enumerate(zip(matrices, shapes)):
        if m.shape != shape:
            raise ConfigError(f"matrix {i} has shape {m.shape}, expected {shape}")
    it = iter(matrices)
    layers = []
    for _ in range(config.num_layers):
        wq, wk, wv, wo, gate = (np.array(next(it), dtype=np.float64) for _ in range(5))
        w1, w2 = [], []
        for _ in range(config.num_experts):
            w1.append(next(it))
            w2.append(next(it))
        layers.append(
            LayerWeights(wq, wk, wv, wo, gate, np.array(w1, dtype=np.float64), np.array(w2, dtype=np.float64))
        )
    embedding = np.array(next(it), dtype=np.float64)
    head = np.array(next(it), dtype=np.float64)
    return ToyMoEModel(config, layers, embedding, head, bits)


def init_model(config: ModelConfig) -> ToyMoEModel:
    """Draw a full-precision model from the config's seed."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_model expects a ModelConfig")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    bound = 1.0 / math.sqrt(config.hidden_dim)
    matrices = [rng.uniform(-bound, bound, size=shape) for shape in matrix_shapes(config)]
    return assemble_model(config, matrices)


def quantize_matrix(w: np.ndarray, bits: int) -> np.ndarray:
    """Snap ``w`` to a symmetric uniform grid with step max|w| / (2^(bits-1) - 1).

    Rounding is half-to-even.  An all-zero matrix maps to itself.
    """
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    if amax == 0.0:
        return np.zeros_like(w, dtype=np.float64)
    return np.round(w * qmax / amax) * amax / qmax


def quantize_model(model: ToyMoEModel, bits: int) -> ToyMoEModel:
    """Return an emulated-precision copy; the input model is left untouched."""
    if not model.is_full_precision:
        raise PreconditionError(f"model is already quantized ({model.precision})")
    if not isinstance(bits, (int, np.integer)) or not 2 <= bits <= 16:
        raise ConfigError(f"bits must be an integer in [2, 16], got {bits!r}")
    matrices = [quantize_matrix(m, int(bits)) for _, m in model.iter_matrices()]
    return assemble_model(model.config, matrices, bits=int(bits))


def copy_model(model: ToyMoEModel) -> ToyMoEModel:
    return assemble_model(model.config, [m.copy() for _, m in model.iter_matrices()], model.bits)


class KVCache:
    """Per-layer key/value rows, one per processed token, in growable buffers."""

    def __init__(self, num_layers: int, dim: int, capacity: int = 64):
        self._keys = np.zeros((num_layers, capacity, dim))
        self._values = np.zeros((num_layers, capacity, dim))
        self.length = 0

    @property
    def num_layers(self) -> int:
        return self._keys.shape[0]

    @property
    def dim(self) -> int:
        return self._keys.shape[2]

    def _reserve(self, n: int):
        cap = self._keys.shape[1]
        if n <= cap:
            return
        new_cap = max(n, 2 * cap)
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            grown = np.zeros((old.shape[0], new_cap, old.shape[2]))
            grown[:, :cap] = old
            setattr(self, name, grown)

    def keys(self, layer: int, upto: int | None = None) -> np.ndarray:
        return self._keys[layer, : self.length if upto is None else upto]

    def values(self, layer: int, upto: int | None = None) -> np.ndarray:
        return self._values[layer, : self.length if upto is None else upto]

    def write(self, layer: int, position: int, key: np.ndarray, value: np.ndarray):
        self._reserve(position + 1)
        self._keys[layer, position] = key
        self._values[layer, position] = value

    def entries(self, position: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Copies of the (key, value) rows of every layer at ``position``."""
        if not 0 <= position < self.length:
            raise IndexError(f"position {position} not in cache of length {self.length}")
        return [(self._keys[l, position].copy(), self._values[l, position].copy()) for l in range(self.num_layers)]

    def copy(self) -> "KVCache":
        new = KVCache.__new__(KVCache)
        new._keys = self._keys.copy()
        new._values = self._values.copy()
        new.length = self.length
        return new


@dataclass
class InferenceState:
    token_ids: list[int]
    kv: KVCache

    @property
    def position(self) -> int:
        return len(self.token_ids)

    @property
    def pending_token(self) -> int:
        return self.token_ids[-1]

    def copy(self) -> "InferenceState":
        return InferenceState(list(self.token_ids), self.kv.copy())


def _check_finite(x: np.ndarray, where: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")


def _top_k(scores: np.ndarray, k: int) -> tuple[int, ...]:
    # stable sort on negated scores keeps the lower index first among ties
    order = np.argsort(-scores, kind="stable")
    return tuple(int(i) for i in order[:k])


def gate(model: ToyMoEModel, layer: int, embedding: np.ndarray) -> RoutingDecision:
    """Top-k routing for ``embedding`` at ``layer``; ties go to the lower index."""
    if not 0 <= layer < model.config.num_layers:
        raise InputError(f"layer {layer} out of range")
    embedding = np.asarray(embedding, dtype=np.float64)
    _check_finite(embedding, "gate input")
    scores = model.layers[layer].gate @ embedding
    _check_finite(scores, "gate scores")
    return RoutingDecision(layer, _top_k(scores, model.config.top_k), tuple(float(s) for s in scores))


def expert_forward(model: ToyMoEModel, expert: ExpertId, embedding: np.ndarray) -> np.ndarray:
    cfg = model.config
    if not (0 <= expert.layer < cfg.num_layers and 0 <= expert.index < cfg.num_experts):
        raise InputError(f"{expert} out of range")
    lw = model.layers[expert.layer]
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = lw.w2[expert.index] @ np.maximum(lw.w1[expert.index] @ embedding, 0.0)
        except FloatingPointError as exc:
            raise NumericError(f"overflow in expert {expert}") from exc
    _check_finite(out, f"expert {expert} output")
    return out


def _validate_override(model: ToyMoEModel, override: Sequence[RoutingDecision]):
    cfg = model.config
    if len(override) != cfg.num_layers:
        raise RoutingError(f"routing override needs {cfg.num_layers} entries, got {len(override)}")
    for l, dec in enumerate(override):
        experts = tuple(dec.experts)
        if len(experts) != cfg.top_k or len(set(experts)) != cfg.top_k:
            raise RoutingError(f"layer {l}: override must name {cfg.top_k} distinct experts, got {experts}")
        if any(not 0 <= e < cfg.num_experts for e in experts):
            raise RoutingError(f"layer {l}: override expert out of range: {experts}")


def _step(
    model: ToyMoEModel,
    kv: KVCache,
    token: int,
    override: Sequence[RoutingDecision] | None = None,
) -> tuple[int, list[RoutingDecision]]:
    """One causal forward pass of ``token`` at position ``kv.length``."""
    cfg = model.config
    if not 0 <= token < cfg.vocab_size:
        raise InputError(f"token id {token} outside vocabulary of size {cfg.vocab_size}")
    pos = kv.length
    inv_sqrt_d = 1.0 / math.sqrt(cfg.hidden_dim)
    x = model.embedding[token].copy()
    routing = []
    for l, lw in enumerate(model.layers):
        kv.write(l, pos, lw.wk @ x, lw.wv @ x)
        q = lw.wq @ x
        att = kv.keys(l, pos + 1) @ q * inv_sqrt_d
        att = np.exp(att - att.max())
        att /= att.sum()
        h = x + lw.wo @ (att @ kv.values(l, pos + 1))
        _check_finite(h, f"layer {l} attention")

        scores = lw.gate @ h
        natural = _top_k(scores, cfg.top_k)
        experts = natural if override is None else tuple(int(e) for e in override[l].experts)
        routing.append(RoutingDecision(l, experts, tuple(float(s) for s in scores)))

        chosen = sorted(experts)
        sel = scores[chosen]
        mix = np.exp(sel - sel.max())
        mix /= mix.sum()
        moe = np.zeros_like(h)
        for w, e in zip(mix, chosen):
            moe += w * (lw.w2[e] @ np.maximum(lw.w1[e] @ h, 0.0))
        x = h + moe
        _check_finite(x, f"layer {l} output")
    kv.length = pos + 1
    logits = x @ model.head
    _check_finite(logits, "logits")
    return int(np.argmax(logits)), routing


def new_state(model: ToyMoEModel, first_token: int) -> InferenceState:
    """An empty-cache state whose pending token is ``first_token``."""
    cfg = model.config
    return InferenceState([int(first_token)], KVCache(cfg.num_layers, cfg.hidden_dim))


def forward_token(
    model: ToyMoEModel,
    state: InferenceState,
    routing_override: Sequence[RoutingDecision] | None = None,
) -> tuple[int, list[RoutingDecision], InferenceState]:
    """Consume the pending token, append the greedy next token.

    The state is updated in place and returned for convenience; call
    ``state.copy()`` first to keep the old one.
    """
    if not state.token_ids:
        raise InputError("state has no pending token")
    if state.kv.length != state.position - 1:
        raise PreconditionError("state KV length is inconsistent with its token count")
    if routing_override is not None:
        _validate_override(model, routing_override)
    nxt, routing = _step(model, state.kv, state.token_ids[-1], routing_override)
    state.token_ids.append(nxt)
    return nxt, routing, state


def prefill(
    model: ToyMoEModel, prompt: Sequence[int], max_context: int = MAX_CONTEXT
) -> tuple[InferenceState, list[list[RoutingDecision]]]:
    """Process the prompt strictly in order, returning the state and per-token routing.

    The greedy continuation of the prompt is left as the pending token.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt is empty")
    if len(prompt) > max_context:
        raise InputError(f"prompt length {len(prompt)} exceeds context bound {max_context}")
    cfg = model.config
    kv = KVCache(cfg.num_layers, cfg.hidden_dim, capacity=max(64, 2 * len(prompt)))
    routings = []
    nxt = 0
    for tok in prompt:
        nxt, routing = _step(model, kv, tok)
        routings.append(routing)
    return InferenceState(prompt + [nxt], kv), routings


def decode(model: ToyMoEModel, prompt: Sequence[int], max_tokens: int, eos_token: int | None = 0) -> list[int]:
    """Greedy decoding convenience wrapper: up to ``max_tokens`` tokens after the prompt."""
    state, _ = prefill(model, prompt)
    out = []
    for _ in range(max_tokens):
        tok, _, state = forward_token(model, state)
        out.append(tok)
        if eos_token is not None and tok == eos_token:
            break
    return out
