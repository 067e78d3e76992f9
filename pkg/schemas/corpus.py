"""
Corpus Schemas
Tokenized corpora, regex concept specs and balanced probing datasets
"""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

ConceptCategory = Literal["pos", "latex", "code", "text"]


class Provenance(BaseModel):
    source: str
    sha256: str


class TokenizedCorpus(BaseModel):
    model_config = ConfigDict(frozen=True)

    documents: list[list[int]]
    texts: list[str]
    tokenizer_id: str
    provenance: Provenance

    @model_validator(mode="after")
    def check_aligned(self):
        if len(self.documents) != len(self.texts):
            raise ValueError("documents and texts differ in length")
        return self

    @property
    def n_tokens(self) -> int:
        return sum(len(d) for d in self.documents)


class ConceptSpec(BaseModel):
    """Binary token concept defined by a regex over the detokenized text.

    The first capture group that participates in a match marks the positive
    span; a rule without groups marks the whole match.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    category: ConceptCategory
    rule: str
    description: str = ""
    positives: list[str] = Field(default_factory=list)
    negatives: list[str] = Field(default_factory=list)


class ConceptRegistry(BaseModel):
    """One JSON document per category under data/concepts/."""
    model_config = ConfigDict(extra="forbid")

    category: ConceptCategory
    version: str
    concepts: list[ConceptSpec]


class ConceptDataset(BaseModel):
    """Column-oriented token samples; sample i is (docs[i], positions[i], labels[i])."""
    concept: str
    docs: list[int]
    positions: list[int]
    labels: list[int]
    train: list[int]
    test: list[int]
    seed: int
    filtered_for: tuple[int, int] | None = None
    metadata: dict = Field(default_factory=dict)

    @property
    def n_total(self) -> int:
        return len(self.labels)

    @property
    def n_positive(self) -> int:
        return sum(self.labels)

    @property
    def n_negative(self) -> int:
        return self.n_total - self.n_positive


class ProbeSkip(BaseModel):
    """Marker for a (concept, site) that cannot be probed."""
    concept: str
    layer: int
    expert: int | None
    reason: str
    n_positive: int = 0
    n_negative: int = 0
