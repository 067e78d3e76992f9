"""
Run Manifest Schema
One manifest.json per artifact directory
"""
from pydantic import BaseModel, Field


class RunManifest(BaseModel):
    command: str
    config: dict
    config_hash: str
    seeds: dict[str, int] = Field(default_factory=dict)
    toolkit_version: str
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    started_at: str
    finished_at: str | None = None
    timings: dict[str, float] = Field(default_factory=dict)
    reproduction: bool = False
    notes: dict = Field(default_factory=dict)
