"""
Probing Schemas
k-sparse probe sweep config and results
"""
from pydantic import BaseModel, ConfigDict, Field

from .corpus import ProbeSkip

K_VALUES = (1, 2, 4, 8, 16, 32, 64)


class Site(BaseModel):
    """A probing site: a dense FFN (expert None) or one expert of an MoE layer."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    layer: int = Field(ge=0)
    expert: int | None = Field(default=None, ge=0)

    @property
    def label(self) -> str:
        return f"L{self.layer}" if self.expert is None else f"L{self.layer}/E{self.expert}"

    @property
    def sort_key(self) -> tuple[int, int]:
        return self.layer, -1 if self.expert is None else self.expert


class SweepConfig(BaseModel):
    """JSON accepted by `probe --config`. `sites=None` probes every site of the model."""
    model_config = ConfigDict(extra="forbid")

    concepts: list[str] | None = None
    k_values: tuple[int, ...] = K_VALUES
    sites: list[Site] | None = None
    lam: float | None = Field(default=None, gt=0)
    seed: int = 0
    n_samples: int = Field(default=5000, ge=2)
    max_iter: int = Field(default=500, ge=1)
    tol: float = Field(default=1e-8, gt=0)
    workers: int | None = Field(default=None, ge=1)


class ProbeResult(BaseModel):
    concept: str
    layer: int
    expert: int | None
    k: int
    selected: list[int]
    weights: list[float]
    bias: float
    lam: float
    train_loss: float
    converged: bool
    n_iter: int
    test_f1: float
    n_train: int
    n_test: int
    positive_ratio: float

    @property
    def site(self) -> Site:
        return Site(layer=self.layer, expert=self.expert)


class BestSite(BaseModel):
    concept: str
    k: int
    layer: int
    expert: int | None
    test_f1: float


class SweepResult(BaseModel):
    grid: list[ProbeResult] = Field(default_factory=list)
    best: list[BestSite] = Field(default_factory=list)
    skips: list[ProbeSkip] = Field(default_factory=list)
    metadata: dict = Field(default_factory=dict)

    def best_for(self, concept: str, k: int) -> BestSite | None:
        return next((b for b in self.best if b.concept == concept and b.k == k), None)
