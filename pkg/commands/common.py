"""
Shared CLI helpers
Config merging, model directories and site parsing
"""
import json
import os
from pathlib import Path
from typing import TypeVar

from pydantic import BaseModel, ValidationError

from schemas.probing import Site
from services.errors import ConfigurationError, InputError
from services.model_core import Model, Weights
from services.weights_io import load_model, save_model

WEIGHTS_NAME = "weights.bin"
CONFIG_NAME = "config.json"

C = TypeVar("C", bound=BaseModel)


def default_workers() -> int:
    raw = os.getenv("MOE_INTERP_WORKERS", "4")
    try:
        workers = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"MOE_INTERP_WORKERS={raw!r} is not an integer") from e
    if workers < 1:
        raise ConfigurationError("MOE_INTERP_WORKERS must be at least 1")
    return workers


def read_json(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from e


def validate(schema: type[C], data, source: str = "config") -> C:
    try:
        return schema.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid {source}: {e}") from e


def merge_config(schema: type[C], path: str | Path | None, **overrides) -> C:
    """CLI flag > config file > built-in default. `None` overrides are ignored."""
    data = read_json(path) if path else {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must contain a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return validate(schema, data, source=str(path or "config"))


def parse_sites(text: str | None) -> list[Site] | None:
    """'0/1,2' → [L0/E1, L2 (dense)]"""
    if not text:
        return None
    sites = []
    for part in text.split(","):
        layer, _, expert = part.strip().partition("/")
        try:
            sites.append(Site(layer=int(layer), expert=int(expert) if expert else None))
        except ValueError as e:
            raise ConfigurationError(f"cannot parse site {part!r}, expected LAYER or LAYER/EXPERT") from e
    return sites


def parse_ints(text: str | None) -> list[int] | None:
    if not text:
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as e:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from e


def add_model_arg(parser) -> None:
    parser.add_argument("--model", required=True, help=f"model directory holding {WEIGHTS_NAME} and {CONFIG_NAME}")


def load_model_dir(model_dir: str | Path) -> Model:
    model_dir = Path(model_dir)
    return Model(load_model(model_dir / WEIGHTS_NAME, model_dir / CONFIG_NAME))


def save_model_dir(weights: Weights, model_dir: str | Path) -> list[Path]:
    model_dir = Path(model_dir)
    save_model(weights, model_dir / WEIGHTS_NAME, model_dir / CONFIG_NAME)
    return [model_dir / WEIGHTS_NAME, model_dir / CONFIG_NAME]


def model_inputs(model_dir: str | Path) -> list[Path]:
    return [Path(model_dir) / WEIGHTS_NAME, Path(model_dir) / CONFIG_NAME]
