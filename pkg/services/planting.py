"""
Planted Weights
Ground-truth models with a known monosemantic expert, used as oracles by every analysis.

Layout of the residual stream:
- the last few axes are reserved (one trigger axis and one co-route axis per plant,
  plus a shared bias axis every embedding carries)
- attention outputs, unplanted FFN outputs and W_U never touch reserved axes, so the
  reserved coordinates of the residual equal the token embedding's at every layer
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import ortho_group

from schemas.model import ModelConfig, PlantSpec
from .errors import ConfigurationError
from .model_core import Weights, expected_shapes

logger = logging.getLogger(__name__)

BIAS_VALUE = 1.0        # every embedding, on the bias axis
TRIGGER_VALUE = 2.0     # trigger embeddings, on their plant's trigger axis
CO_ROUTE_VALUE = 3.0    # co-routed embeddings, on their plant's co-route axis
BIAS_PENALTY = 1.0      # router weight on the bias axis (negative)

CONTROL_TRIGGER_VALUE = 1.0
DISTRACTOR_SCALE = 1.0


@dataclass(frozen=True)
class ReservedAxes:
    trigger: tuple[int, ...]
    co_route: tuple[int, ...]
    bias: int
    extra: tuple[int, ...] = ()

    @property
    def all(self) -> list[int]:
        return [*self.trigger, *self.co_route, self.bias, *self.extra]


def _reserve(d_model: int, n_plants: int, n_extra: int = 0) -> ReservedAxes:
    needed = 2 * n_plants + 1 + n_extra
    if needed > d_model - 2:
        raise ConfigurationError(f"d_model={d_model} too small to reserve {needed} axes")
    start = d_model - needed
    trig = tuple(range(start, start + n_plants))
    co = tuple(range(start + n_plants, start + 2 * n_plants))
    bias = start + 2 * n_plants
    extra = tuple(range(bias + 1, bias + 1 + n_extra))
    return ReservedAxes(trig, co, bias, extra)


def _noise_tensors(config: ModelConfig, rng: np.random.Generator, noise_scale: float) -> dict[str, np.ndarray]:
    """Every tensor as small seeded noise; embeddings and W_U are filled in by the caller."""
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".scale"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.standard_normal(shape) * noise_scale
    return tensors


def _base_vocab(config: ModelConfig, rng: np.random.Generator, reserved: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Random embeddings and unit-column W_U, both zero on reserved axes."""
    d, vocab = config.d_model, config.vocab_size
    embed = rng.standard_normal((vocab, d)) / np.sqrt(d)
    embed[:, reserved] = 0.0
    unembed = rng.standard_normal((d, vocab))
    unembed[reserved, :] = 0.0
    unembed /= np.linalg.norm(unembed, axis=0, keepdims=True)
    return embed, unembed


def _clear_reserved(tensors: dict, config: ModelConfig, reserved: list[int]) -> None:
    """Keep attention and every FFN off the reserved axes (planted neurons are written afterwards)."""
    for l in range(config.n_layers):
        tensors[f"layers.{l}.attn.w_o"][:, reserved] = 0.0
        if config.is_moe(l):
            tensors[f"layers.{l}.router.weight"][:, reserved] = 0.0
        for i in range(config.experts_in_layer(l)):
            p = f"layers.{l}.experts.{i}"
            tensors[f"{p}.w_gate"][:, reserved] = 0.0
            tensors[f"{p}.w_up"][:, reserved] = 0.0
            tensors[f"{p}.w_down"][reserved, :] = 0.0


def _check_token(config: ModelConfig, token: int, what: str) -> None:
    if not 0 <= token < config.vocab_size:
        raise ConfigurationError(f"{what} {token} outside vocab_size={config.vocab_size}")


def _validate(config: ModelConfig, specs: list[PlantSpec]) -> None:
    seen = set()
    per_layer: dict[int, int] = {}
    for spec in specs:
        where = f"plant (layer={spec.layer}, expert={spec.expert})"
        if spec.layer >= config.n_layers or not config.is_moe(spec.layer):
            raise ConfigurationError(f"{where}: layer is not an MoE layer")
        if spec.expert >= config.n_routed:
            raise ConfigurationError(f"{where}: expert must be a routed expert (< {config.n_routed})")
        if spec.neuron >= config.d_ff:
            raise ConfigurationError(f"{where}: neuron {spec.neuron} >= d_ff={config.d_ff}")
        if (spec.layer, spec.expert) in seen:
            raise ConfigurationError(f"{where}: planted twice")
        seen.add((spec.layer, spec.expert))
        for t in spec.trigger_tokens + spec.co_routed_tokens:
            _check_token(config, t, f"{where}: token")
        _check_token(config, spec.promoted_token, f"{where}: promoted token")
        if set(spec.trigger_tokens) & set(spec.co_routed_tokens):
            raise ConfigurationError(f"{where}: trigger and co-routed tokens overlap")
        per_layer[spec.layer] = per_layer.get(spec.layer, 0) + 1
    for layer, count in per_layer.items():
        if config.n_routed - count < config.n_active:
            raise ConfigurationError(
                f"layer {layer}: {count} planted experts leave fewer than n_active={config.n_active} others to route to"
            )


def plant_expert(config: ModelConfig, specs: list[PlantSpec] | PlantSpec, noise_scale: float = 0.02, seed: int | None = None) -> Weights:
    """Build weights in which each spec's expert is monosemantic for its trigger tokens.

    Per spec the planted expert
    (a) gets the top router score exactly on trigger tokens (and a positive, lower one on co-routed tokens),
    (b) fires only `neuron` there, with every other neuron exactly zero,
    (c) writes through a W_down column aligned with W_U[:, promoted_token].
    """
    if isinstance(specs, PlantSpec):
        specs = [specs]
    _validate(config, specs)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    axes = _reserve(config.d_model, len(specs))
    reserved = axes.all

    tensors = _noise_tensors(config, rng, noise_scale)
    _clear_reserved(tensors, config, reserved)
    embed, unembed = _base_vocab(config, rng, reserved)
    embed[:, axes.bias] = BIAS_VALUE
    base_norm_sq = float(np.mean(np.sum(embed ** 2, axis=1)))

    for p, spec in enumerate(specs):
        u, w = axes.trigger[p], axes.co_route[p]
        embed[list(spec.trigger_tokens), u] += TRIGGER_VALUE
        embed[list(spec.co_routed_tokens), w] += CO_ROUTE_VALUE

        router = tensors[f"layers.{spec.layer}.router.weight"]
        router[spec.expert, :] = 0.0
        router[spec.expert, u] = spec.router_scale
        router[spec.expert, w] = 0.5 * spec.router_scale
        router[spec.expert, axes.bias] = -BIAS_PENALTY * spec.router_scale

        prefix = f"layers.{spec.layer}.experts.{spec.expert}"
        gate, up, down = tensors[f"{prefix}.w_gate"], tensors[f"{prefix}.w_up"], tensors[f"{prefix}.w_down"]
        gate[:] = 0.0
        up[:] = 0.0
        down[:] = 0.0
        gate[spec.neuron, u] = spec.activation_scale
        up[spec.neuron, u] = spec.activation_scale
        # normalized trigger coordinate on an unperturbed residual
        z0 = TRIGGER_VALUE * np.sqrt(config.d_model / (base_norm_sq + TRIGGER_VALUE ** 2))
        down[:, spec.neuron] = unembed[:, spec.promoted_token] / (spec.activation_scale ** 2 * z0 ** 2)

    tensors["embed.weight"] = embed
    tensors["unembed.weight"] = unembed
    logger.info(f"[plant] {len(specs)} planted expert(s), {len(reserved)} reserved axes, noise={noise_scale}")
    return Weights(config, tensors)


def plant_dense_control(config: ModelConfig, spec: PlantSpec, n_smear: int = 8, noise_scale: float = 0.02, seed: int | None = None) -> Weights:
    """Dense reference model carrying the same trigger signal, smeared over `n_smear` neurons.

    The smear neurons read the trigger axis together with `n_smear - 1` distractor axes
    (per-token Gaussian values) through a random rotation whose first column is
    uniform, so each single neuron carries only 1/sqrt(n_smear) of the signal.
    Neurons `spec.neuron .. spec.neuron + n_smear - 1` are used; `spec.expert` must be 0.
    """
    if spec.layer >= config.n_layers or config.is_moe(spec.layer):
        raise ConfigurationError(f"dense control needs a dense layer {spec.layer}")
    if spec.expert != 0:
        raise ConfigurationError("dense control has a single FFN (expert 0)")
    if n_smear < 2 or spec.neuron + n_smear > config.d_ff:
        raise ConfigurationError(f"cannot smear over {n_smear} neurons from {spec.neuron} with d_ff={config.d_ff}")
    for t in spec.trigger_tokens:
        _check_token(config, t, "trigger token")
    _check_token(config, spec.promoted_token, "promoted token")

    rng = np.random.default_rng(config.seed if seed is None else seed)
    axes = _reserve(config.d_model, 1, n_extra=n_smear - 2)
    reserved = axes.all
    # signal axis first, then distractors
    signal_axes = [axes.trigger[0], axes.co_route[0], *axes.extra]

    tensors = _noise_tensors(config, rng, noise_scale)
    _clear_reserved(tensors, config, reserved)
    embed, unembed = _base_vocab(config, rng, reserved)
    embed[:, axes.bias] = BIAS_VALUE
    embed[:, signal_axes[1:]] = rng.standard_normal((config.vocab_size, n_smear - 1)) * DISTRACTOR_SCALE
    embed[list(spec.trigger_tokens), signal_axes[0]] = CONTROL_TRIGGER_VALUE

    basis = ortho_group.rvs(n_smear, random_state=int(rng.integers(2 ** 31)))
    basis[:, 0] = 1.0
    rotation, _ = np.linalg.qr(basis)

    prefix = f"layers.{spec.layer}.experts.0"
    gate, up, down = tensors[f"{prefix}.w_gate"], tensors[f"{prefix}.w_up"], tensors[f"{prefix}.w_down"]
    for i in range(n_smear):
        row = spec.neuron + i
        gate[row, :] = 0.0
        up[row, :] = 0.0
        gate[row, axes.bias] = 1.0
        up[row, signal_axes] = rotation[i, :]
        down[:, row] = unembed[:, spec.promoted_token] * rotation[i, 0]

    tensors["embed.weight"] = embed
    tensors["unembed.weight"] = unembed
    logger.info(f"[plant] dense control smeared over {n_smear} neurons")
    return Weights(config, tensors)
