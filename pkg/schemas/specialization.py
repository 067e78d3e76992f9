"""
Specialization Schemas
Per-layer expert specialization reports
"""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

DistributionKind = Literal["routing", "functional"]

CLUSTER_PRESET = (10, 50, 100, 1000, 5000)


class ExpertScore(BaseModel):
    expert: int
    raw: float | None = None
    baseline: float | None = None
    baseline_stderr: float | None = None
    adjusted: float | None = None
    n_tokens: int
    distribution: list[float] | None = None  # None when the expert is never routed
    flagged: str | None = None


class SpecializationReport(BaseModel):
    """S_i = JSD(P_i ‖ Q_L) against the layer base rate, minus the multinomial baseline Ŝ_i."""
    layer: int
    k: int
    kind: DistributionKind
    n_top: int | None = None
    mc_samples: int
    weighted_base_rate: bool = False
    base_rate: list[float] = Field(default_factory=list)
    experts: list[ExpertScore] = Field(default_factory=list)
    empty: bool = False

    @property
    def mean_adjusted(self) -> float | None:
        values = [e.adjusted for e in self.experts if e.adjusted is not None]
        return sum(values) / len(values) if values else None


class SpecializationConfig(BaseModel):
    """JSON accepted by `specialize --config`."""
    model_config = ConfigDict(extra="forbid")

    layers: list[int] | None = None
    k_values: tuple[int, ...] | None = None
    kinds: tuple[DistributionKind, ...] = ("routing", "functional")
    n_top: int = Field(default=3, ge=1)
    mc_samples: int = Field(default=100, ge=1)
    seed: int = 0
    token_budget: int = Field(default=1_000_000, ge=1)
    weighted_base_rate: bool = False
    workers: int | None = Field(default=None, ge=1)
