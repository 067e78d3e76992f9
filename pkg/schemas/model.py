"""
Model Schemas
Toy MoE architecture config and planted-behavior specs
"""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

FfnKind = Literal["dense", "moe"]
NormKind = Literal["rms", "layernorm"]


# ============================================================
# Architecture
# ============================================================

class ModelConfig(BaseModel):
    """Hyperparameters of the toy decoder-only MoE transformer.

    `ffn_kind` is per layer; a single string is broadcast to every layer.
    Shared experts occupy the highest expert indices of an MoE layer.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = Field(gt=0)
    n_layers: int = Field(gt=0)
    n_heads: int = Field(gt=0)
    d_ff: int = Field(gt=0)
    vocab_size: int = Field(gt=0)
    n_experts: int = Field(ge=1)
    n_active: int = Field(ge=1)
    n_shared: int = Field(default=0, ge=0)
    ffn_kind: tuple[FfnKind, ...]
    norm_kind: NormKind = "rms"
    seed: int = Field(default=0, ge=0)

    @field_validator("ffn_kind", mode="before")
    @classmethod
    def broadcast_ffn_kind(cls, value, info):
        if isinstance(value, str):
            return (value,) * info.data.get("n_layers", 1)
        return value

    @model_validator(mode="after")
    def check_consistency(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if len(self.ffn_kind) != self.n_layers:
            raise ValueError(f"ffn_kind has {len(self.ffn_kind)} entries for {self.n_layers} layers")
        if self.n_active > self.n_experts:
            raise ValueError("n_active must not exceed n_experts")
        if self.n_active + self.n_shared > self.n_experts:
            raise ValueError("n_active + n_shared must not exceed n_experts")
        if "moe" not in self.ffn_kind and (self.n_experts != 1 or self.n_active != 1 or self.n_shared):
            raise ValueError("a dense model has n_experts = n_active = 1 and no shared experts")
        return self

    def routing_sparsity(self) -> float:
        """N_A / N"""
        return self.n_active / self.n_experts

    @property
    def n_routed(self) -> int:
        """Experts that compete in Top-N_A (shared ones excluded)."""
        return self.n_experts - self.n_shared

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def is_moe(self, layer: int) -> bool:
        return self.ffn_kind[layer] == "moe"

    def experts_in_layer(self, layer: int) -> int:
        return self.n_experts if self.is_moe(layer) else 1

    def moe_layers(self) -> list[int]:
        return [l for l, kind in enumerate(self.ffn_kind) if kind == "moe"]


# ============================================================
# Planted behaviors
# ============================================================

class PlantSpec(BaseModel):
    """One planted monosemantic expert.

    The expert at (layer, expert) wins routing on `trigger_tokens`, fires only
    `neuron` there, and writes along the unembedding column of `promoted_token`.
    `co_routed_tokens` are also routed to it but leave the neuron silent.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    layer: int = Field(ge=0)
    expert: int = Field(ge=0)
    trigger_tokens: tuple[int, ...] = Field(min_length=1)
    neuron: int = Field(ge=0)
    promoted_token: int = Field(ge=0)
    co_routed_tokens: tuple[int, ...] = ()
    router_scale: float = Field(default=6.0, gt=0)
    activation_scale: float = Field(default=4.0, gt=0)


class PlantFile(BaseModel):
    """JSON document accepted by `model plant`."""
    model_config = ConfigDict(extra="forbid")

    specs: list[PlantSpec] = Field(min_length=1)
    noise_scale: float = Field(default=0.02, ge=0)
    seed: int | None = None
