"""
Attribution Schemas
Logit-lens / DLA records and trigger–target cases and reports
"""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

CaseCategory = Literal["top1", "top8", "other", "not_routed", "error"]
PredictionRule = Literal["before_target", "final_token"]


class LensEntry(BaseModel):
    token_id: int
    token: str
    logit: float


class LensReport(BaseModel):
    """Top promoted tokens for one recorded update at one position."""
    component: str
    position: int
    normalized: bool = False
    top: list[LensEntry]


class DlaRecord(BaseModel):
    """Per-expert direct logit attribution toward one target at one position."""
    layer: int
    position: int
    target: int
    contributions: list[float]
    ranking: list[int]


# ============================================================
# Trigger–target experiment
# ============================================================

class TriggerTargetCase(BaseModel):
    """One curated prompt: `trigger` should route to the expert, `target` is the word it should promote."""
    model_config = ConfigDict(extra="forbid")

    text: str
    trigger: str = Field(min_length=1)
    target: str = Field(min_length=1)


class CaseSet(BaseModel):
    """Cases written for one expert."""
    model_config = ConfigDict(extra="forbid")

    layer: int = Field(ge=0)
    expert: int = Field(ge=0)
    cases: list[TriggerTargetCase] = Field(min_length=1)


class CaseFile(BaseModel):
    """JSON accepted by `attribute trigger-target --cases`."""
    model_config = ConfigDict(extra="forbid")

    sets: list[CaseSet] = Field(min_length=1)


class CaseRecord(BaseModel):
    layer: int
    expert: int
    case_owner: int
    matched: bool
    text: str
    trigger: str
    target: str
    trigger_token: int | None = None
    trigger_position: int | None = None
    target_token: int | None = None
    prediction_position: int | None = None
    prediction_rule: PredictionRule | None = None
    routed: bool = False
    gate: float = 0.0
    contribution: float = 0.0
    rank: int | None = None
    top1: bool = False
    top8: bool = False
    category: CaseCategory = "error"
    error: str | None = None


class CaseAggregate(BaseModel):
    n_cases: int
    n_errors: int
    percentages: dict[str, float]
    fraction_unrouted: float
    rank_histogram: dict[int, int]


class TriggerTargetReport(BaseModel):
    records: list[CaseRecord]
    matched: CaseAggregate
    control: CaseAggregate
    metadata: dict = Field(default_factory=dict)
