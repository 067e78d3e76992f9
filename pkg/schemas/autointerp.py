"""
Autointerp Schemas
Mined examples, prompts, LLM endpoint config and label records
"""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .probing import Site

LabelStatus = Literal["ok", "unlabelable", "parse_failed", "endpoint_error"]


# ============================================================
# Mining
# ============================================================

class ActivationItem(BaseModel):
    position: int
    token: str
    score: float
    promoted: list[str]


class MinedExample(BaseModel):
    """One token window scored for one expert."""
    layer: int
    expert: int
    doc: int
    start: int
    tokens: list[int]
    pieces: list[str]
    routed: list[bool]
    scores: list[float]
    sequence_score: float
    top_items: list[ActivationItem]

    @model_validator(mode="after")
    def check_aligned(self):
        n = len(self.tokens)
        if not (len(self.pieces) == len(self.routed) == len(self.scores) == n):
            raise ValueError("tokens, pieces, routed and scores differ in length")
        return self

    @property
    def window_id(self) -> tuple[int, int]:
        return self.doc, self.start


class ExpertPool(BaseModel):
    """Top examples of one expert and their explainer / scorer-positive / held-back partition (indices into `examples`)."""
    layer: int
    expert: int
    examples: list[MinedExample] = Field(default_factory=list)
    explainer: list[int] = Field(default_factory=list)
    positives: list[int] = Field(default_factory=list)
    held_back: list[int] = Field(default_factory=list)
    unlabelable: str | None = None

    def subset(self, indices: list[int]) -> list[MinedExample]:
        return [self.examples[i] for i in indices]


# ============================================================
# Prompts & endpoint
# ============================================================

class PromptDocument(BaseModel):
    template_version: str
    kind: Literal["explainer", "scorer", "case_generation"]
    system: str
    user: str

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.system}, {"role": "user", "content": self.user}]

    def render(self) -> str:
        return f"{self.system}\n\n----\n\n{self.user}\n"


class LlmEndpoint(BaseModel):
    """Chat-completion style endpoint. The token is read from `auth_env` at call time and never stored."""
    model_config = ConfigDict(extra="forbid")

    url: str
    model: str
    auth_env: str | None = "MOE_INTERP_LLM_TOKEN"
    timeout: float = Field(default=60.0, gt=0)
    max_retries: int = Field(default=3, ge=0)
    backoff: float = Field(default=1.0, ge=0)
    temperature: float = 0.0


class AutointerpConfig(BaseModel):
    """JSON accepted by `autointerp --config`."""
    model_config = ConfigDict(extra="forbid")

    experts: list[Site] | None = None
    budget: int = Field(default=2_000_000, ge=1)
    window: int = Field(default=32, ge=1)
    top_n: int = Field(default=40, ge=1)
    n_explainer: int = Field(default=20, ge=1)
    n_positive: int = Field(default=10, ge=1)
    n_negative: int = Field(default=10, ge=1)
    n_items: int = Field(default=5, ge=1)
    n_promoted: int = Field(default=3, ge=1)
    in_flight: int = Field(default=4, ge=1)
    seed: int = 0
    template_version: str = "v1"
    endpoint: LlmEndpoint | None = None

    @model_validator(mode="after")
    def check_partition(self):
        if self.n_explainer + self.n_positive + self.n_negative != self.top_n:
            raise ValueError("explainer + positive + negative counts must add up to top_n")
        return self


class LabelRecord(BaseModel):
    layer: int
    expert: int
    status: LabelStatus
    hypothesis: str | None = None
    explainer_examples: list[tuple[int, int]] = Field(default_factory=list)
    scorer_positives: list[tuple[int, int]] = Field(default_factory=list)
    scorer_negatives: list[tuple[int, int]] = Field(default_factory=list)
    answer_key: list[int] = Field(default_factory=list)
    verdicts: list[int] = Field(default_factory=list)
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    endpoint_model: str | None = None
    transcript_tags: list[str] = Field(default_factory=list)
    note: str | None = None
