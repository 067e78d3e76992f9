"""
Model Core Service
Deterministic toy decoder-only MoE transformer with full activation tracing

Flow: embedding → [attention → MoE/dense FFN] × n_layers → final norm → W_U
Sublayers run in float32; the residual stream and every recorded update are float64.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
from pydantic import ValidationError
from scipy.special import expit, softmax
from tqdm import tqdm

from schemas.model import ModelConfig
from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

MAX_SEQ_LEN = 2048
NORM_EPS = 1e-6


def load_config(text: str) -> ModelConfig:
    """Parse a ModelConfig JSON document, mapping validation failures to ConfigurationError."""
    try:
        return ModelConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigurationError(f"invalid model config: {e}") from e


# ============================================================
# Weights
# ============================================================

class ExpertWeights(NamedTuple):
    w_gate: np.ndarray  # (d_ff, d)
    w_up: np.ndarray    # (d_ff, d)
    w_down: np.ndarray  # (d, d_ff)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name → shape, in canonical (serialization and init) order."""
    d, d_ff, vocab = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (vocab, d)}
    for l in range(config.n_layers):
        p = f"layers.{l}"
        shapes[f"{p}.attn_norm.scale"] = (d,)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{p}.attn.{name}"] = (d, d)
        shapes[f"{p}.ffn_norm.scale"] = (d,)
        if config.is_moe(l):
            shapes[f"{p}.router.weight"] = (config.n_experts, d)
        for i in range(config.experts_in_layer(l)):
            shapes[f"{p}.experts.{i}.w_gate"] = (d_ff, d)
            shapes[f"{p}.experts.{i}.w_up"] = (d_ff, d)
            shapes[f"{p}.experts.{i}.w_down"] = (d, d_ff)
    shapes["final_norm.scale"] = (d,)
    shapes["unembed.weight"] = (d, vocab)
    return shapes


class Weights:
    """Flat, read-only float32 tensor storage keyed by name.

    `unembed.weight` (W_U, d × |V|) is the only vocabulary projection; attribution
    and specialization both read it from here.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        shapes = expected_shapes(config)
        missing = sorted(set(shapes) - set(tensors))
        extra = sorted(set(tensors) - set(shapes))
        if missing or extra:
            raise ConfigurationError(f"weights do not match config (missing={missing[:3]}, unexpected={extra[:3]})")
        frozen = {}
        for name, shape in shapes.items():
            arr = np.array(tensors[name], dtype=np.float32, copy=True)
            if arr.shape != shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name}: non-finite values")
            arr.setflags(write=False)
            frozen[name] = arr
        self.config = config
        self._tensors = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def expert(self, layer: int, index: int) -> ExpertWeights:
        p = f"layers.{layer}.experts.{index}"
        return ExpertWeights(self[f"{p}.w_gate"], self[f"{p}.w_up"], self[f"{p}.w_down"])

    def router(self, layer: int) -> np.ndarray:
        return self[f"layers.{layer}.router.weight"]

    @property
    def unembed(self) -> np.ndarray:
        return self["unembed.weight"]

    def replace(self, **updates: np.ndarray) -> "Weights":
        """Copy with some tensors swapped; keyword names use '__' for '.'."""
        tensors = dict(self._tensors)
        for key, value in updates.items():
            tensors[key.replace("__", ".")] = value
        return Weights(self.config, tensors)


def init_weights(config: ModelConfig) -> Weights:
    """Seeded Gaussian init with scale 1/sqrt(d_model); norm scales start at one."""
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / np.sqrt(config.d_model)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".scale"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return Weights(config, tensors)


# ============================================================
# Sublayer math
# ============================================================

def norm_divisor(r: np.ndarray, norm_kind: str) -> np.ndarray:
    """RMS or standard deviation over the last axis (with eps), keepdims."""
    r = np.asarray(r, dtype=np.float64)
    if norm_kind == "rms":
        return np.sqrt(np.mean(r * r, axis=-1, keepdims=True) + NORM_EPS)
    return np.sqrt(np.var(r, axis=-1, keepdims=True) + NORM_EPS)


def apply_norm(r: np.ndarray, scale: np.ndarray, norm_kind: str, divisor: np.ndarray | None = None) -> np.ndarray:
    """Pre-norm in float64. A given `divisor` freezes the denominator (used for DLA)."""
    r = np.asarray(r, dtype=np.float64)
    if divisor is None:
        divisor = norm_divisor(r, norm_kind)
    if norm_kind == "layernorm":
        r = r - r.mean(axis=-1, keepdims=True)
    return r / divisor * scale.astype(np.float64)


def swish(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def expert_forward(x: np.ndarray, expert: ExpertWeights) -> tuple[np.ndarray, np.ndarray]:
    """h = Swish(W_gate·x) ⊙ (W_up·x), out = W_down·h. Accepts (d,) or (T, d)."""
    x = np.asarray(x, dtype=np.float32)
    d_ff, d = expert.w_gate.shape
    if x.shape[-1] != d or expert.w_up.shape != (d_ff, d) or expert.w_down.shape != (d, d_ff):
        raise ConfigurationError(
            f"expert shapes gate={expert.w_gate.shape} up={expert.w_up.shape} "
            f"down={expert.w_down.shape} do not fit input {x.shape}"
        )
    h = swish(x @ expert.w_gate.T) * (x @ expert.w_up.T)
    out = h @ expert.w_down.T
    return h, out


class Routing(NamedTuple):
    scores: np.ndarray    # (..., N) float32
    selected: np.ndarray  # (..., N_A) int, ascending expert index
    gates: np.ndarray     # (..., N) float64, zero where unselected


def route(x: np.ndarray, router: np.ndarray, n_active: int, n_shared: int = 0) -> Routing:
    """Top-N_A routing with softmax over the selected scores only.

    Shared experts (last `n_shared` rows) never compete and get gate 1.0.
    Ties go to the lowest expert index.
    """
    x = np.asarray(x, dtype=np.float32)
    scores = x @ router.T
    n_experts = router.shape[0]
    n_routed = n_experts - n_shared
    order = np.argsort(-scores[..., :n_routed], axis=-1, kind="stable")
    selected = np.sort(order[..., :n_active], axis=-1)
    picked = np.take_along_axis(scores, selected, axis=-1).astype(np.float64)
    gates = np.zeros(scores.shape, dtype=np.float64)
    np.put_along_axis(gates, selected, softmax(picked, axis=-1), axis=-1)
    if n_shared:
        gates[..., n_routed:] = 1.0
    return Routing(scores, selected, gates)


def causal_attention(x: np.ndarray, weights: Weights, layer: int) -> np.ndarray:
    """Standard causal multi-head self-attention on a normalized float32 input."""
    config = weights.config
    p = f"layers.{layer}.attn"
    n_tok = x.shape[0]
    h, dh = config.n_heads, config.d_head

    def heads(w):
        return (x @ weights[f"{p}.{w}"]).reshape(n_tok, h, dh).transpose(1, 0, 2)

    q, k, v = heads("w_q"), heads("w_k"), heads("w_v")
    att = (q @ k.transpose(0, 2, 1)) / np.float32(np.sqrt(dh))
    mask = np.triu(np.ones((n_tok, n_tok), dtype=bool), k=1)
    att = np.where(mask, np.float32(-np.inf), att)
    att = softmax(att, axis=-1).astype(np.float32)
    out = (att @ v).transpose(1, 0, 2).reshape(n_tok, config.d_model)
    return out @ weights[f"{p}.w_o"]


# ============================================================
# Trace
# ============================================================

@dataclass(frozen=True)
class LayerTrace:
    """Everything one layer did, per position.

    Only active experts are materialized: `active[t]` lists the experts that
    ran at position t (Top-N_A then shared), aligned with `hidden` / `outputs`.
    """
    kind: str
    residual_in: np.ndarray   # (T, d) float64
    attn_update: np.ndarray   # (T, d) float64
    ffn_input: np.ndarray     # (T, d) float32, normalized input seen by router/experts
    ffn_update: np.ndarray    # (T, d) float64
    scores: np.ndarray        # (T, N) float32; zeros for dense layers
    gates: np.ndarray         # (T, N) float64
    active: np.ndarray        # (T, slots) int
    hidden: np.ndarray        # (T, slots, d_ff) float32
    outputs: np.ndarray       # (T, slots, d) float32

    @property
    def n_experts(self) -> int:
        return self.gates.shape[1]

    def routed(self, expert: int) -> np.ndarray:
        return self.gates[:, expert] > 0

    def expert_hidden(self, expert: int) -> np.ndarray:
        """h for one expert at every position (zeros where it did not run)."""
        return self._gather(self.hidden, expert)

    def expert_output(self, expert: int) -> np.ndarray:
        """E_i(x) at every position (zeros where it did not run)."""
        return self._gather(self.outputs, expert)

    def expert_update(self, expert: int) -> np.ndarray:
        """g_i · E_i(x), float64, (T, d)."""
        return self.gates[:, expert:expert + 1] * self.expert_output(expert).astype(np.float64)

    def _gather(self, stacked: np.ndarray, expert: int) -> np.ndarray:
        out = np.zeros((stacked.shape[0], stacked.shape[2]), dtype=stacked.dtype)
        pos, slot = np.nonzero(self.active == expert)
        out[pos] = stacked[pos, slot]
        return out


@dataclass(frozen=True)
class ForwardTrace:
    tokens: np.ndarray          # (T,) int64
    embedding: np.ndarray       # (T, d) float64, r^(0)
    layers: tuple[LayerTrace, ...]
    final_residual: np.ndarray  # (T, d) float64
    final_divisor: np.ndarray   # (T, 1) float64, final-norm denominator
    logits: np.ndarray          # (T, |V|) float64

    def __len__(self) -> int:
        return len(self.tokens)

    def updates(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every additive term of the final residual, in stream order."""
        yield "embed", self.embedding
        for l, lt in enumerate(self.layers):
            yield f"L{l}.attn", lt.attn_update
            yield f"L{l}.ffn", lt.ffn_update

    def reconstruct_final(self) -> np.ndarray:
        total = np.zeros_like(self.embedding)
        for _, update in self.updates():
            total = total + update
        return total


# ============================================================
# Model
# ============================================================

class Model:
    """Immutable config + weights; `forward` owns its trace, so instances are thread-safe."""

    def __init__(self, weights: Weights):
        self.weights = weights
        self.config = weights.config

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size == 0:
            raise InputError("empty token sequence")
        if tokens.size > MAX_SEQ_LEN:
            raise InputError(f"sequence length {tokens.size} exceeds {MAX_SEQ_LEN}")
        bad = np.nonzero((tokens < 0) | (tokens >= self.config.vocab_size))[0]
        if bad.size:
            pos = int(bad[0])
            raise InputError(f"token id {int(tokens[pos])} at position {pos} is outside vocab_size={self.config.vocab_size}")
        return tokens

    def forward(self, tokens, dense_mixture: bool = False) -> tuple[np.ndarray, ForwardTrace]:
        """Run the model and record a full trace.

        `dense_mixture=True` replaces Top-N_A routing by the full-softmax convex
        combination of all experts (the dense reference path).
        """
        tokens = self.check_tokens(tokens)
        cfg, w = self.config, self.weights
        r = w["embed.weight"][tokens].astype(np.float64)
        embedding = r.copy()
        layers = []
        for l in range(cfg.n_layers):
            residual_in = r
            x_attn = apply_norm(r, w[f"layers.{l}.attn_norm.scale"], cfg.norm_kind).astype(np.float32)
            attn_update = causal_attention(x_attn, w, l).astype(np.float64)
            r = r + attn_update
            x = apply_norm(r, w[f"layers.{l}.ffn_norm.scale"], cfg.norm_kind).astype(np.float32)
            lt = self._ffn(l, x, residual_in, attn_update, dense_mixture)
            r = r + lt.ffn_update
            layers.append(lt)
        divisor = norm_divisor(r, cfg.norm_kind)
        normed = apply_norm(r, w["final_norm.scale"], cfg.norm_kind, divisor=divisor)
        logits = normed @ w.unembed.astype(np.float64)
        trace = ForwardTrace(
            tokens=tokens,
            embedding=embedding,
            layers=tuple(layers),
            final_residual=r,
            final_divisor=divisor,
            logits=logits,
        )
        return logits, trace

    def _ffn(self, layer, x, residual_in, attn_update, dense_mixture) -> LayerTrace:
        cfg, w = self.config, self.weights
        n_tok = x.shape[0]
        if not cfg.is_moe(layer):
            h, out = expert_forward(x, w.expert(layer, 0))
            return LayerTrace(
                kind="dense",
                residual_in=residual_in,
                attn_update=attn_update,
                ffn_input=x,
                ffn_update=out.astype(np.float64),
                scores=np.zeros((n_tok, 1), dtype=np.float32),
                gates=np.ones((n_tok, 1), dtype=np.float64),
                active=np.zeros((n_tok, 1), dtype=np.int64),
                hidden=h[:, None, :],
                outputs=out[:, None, :],
            )

        router = w.router(layer)
        if dense_mixture:
            scores = x @ router.T
            gates = softmax(scores.astype(np.float64), axis=-1)
            active = np.broadcast_to(np.arange(cfg.n_experts), (n_tok, cfg.n_experts))
        else:
            scores, selected, gates = route(x, router, cfg.n_active, cfg.n_shared)
            shared = np.broadcast_to(np.arange(cfg.n_routed, cfg.n_experts), (n_tok, cfg.n_shared))
            active = np.concatenate([selected, shared], axis=1)
        active = np.ascontiguousarray(active, dtype=np.int64)

        slots = active.shape[1]
        hidden = np.zeros((n_tok, slots, cfg.d_ff), dtype=np.float32)
        outputs = np.zeros((n_tok, slots, cfg.d_model), dtype=np.float32)
        for e in np.unique(active):
            pos, slot = np.nonzero(active == e)
            h, out = expert_forward(x[pos], w.expert(layer, int(e)))
            hidden[pos, slot] = h
            outputs[pos, slot] = out
        slot_gates = np.take_along_axis(gates, active, axis=1)
        ffn_update = np.sum(slot_gates[:, :, None] * outputs.astype(np.float64), axis=1)
        return LayerTrace(
            kind="moe",
            residual_in=residual_in,
            attn_update=attn_update,
            ffn_input=x,
            ffn_update=ffn_update,
            scores=scores,
            gates=gates,
            active=active,
            hidden=hidden,
            outputs=outputs,
        )


def trace_corpus(model: Model, documents: list, workers: int = 1, progress: bool = False) -> list[ForwardTrace]:
    """Forward every document; result order follows `documents`."""
    def run(tokens):
        return model.forward(tokens)[1]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        traces = list(tqdm(pool.map(run, documents), total=len(documents), desc="trace", disable=not progress))
    logger.info(f"[trace] {len(traces)} documents, {sum(len(t) for t in traces)} tokens")
    return traces
