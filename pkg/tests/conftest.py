"""
Shared fixtures: tiny models, planted models, corpora and the in-process mock LLM
"""
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from routers.mock_llm import MockLlmState, create_mock_app
from schemas.corpus import Provenance, TokenizedCorpus
from schemas.model import ModelConfig, PlantSpec
from services.model_core import Model, init_weights, load_config
from services.planting import plant_expert
from services.tokenizer import load_tokenizer

ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = ROOT / "data" / "configs"

Q, J, V = 81, 74, 86
Z, X, K = 90, 88, 75
WORDS = ["the", "net", "boat", "harbor", "rope", "and", "fish", "sails", "at", "dawn", "tide", "crew"]


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    monkeypatch.delenv("MOE_INTERP_LLM_TOKEN", raising=False)
    monkeypatch.setenv("MOE_INTERP_WORKERS", "2")


@pytest.fixture(scope="session")
def tokenizer():
    return load_tokenizer()


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return load_config((CONFIG_DIR / "tiny_moe.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def tiny_model(tiny_config) -> Model:
    return Model(init_weights(tiny_config))


@pytest.fixture(scope="session")
def planted_model(tiny_config) -> Model:
    """Three planted experts in layer 0: Q → Z, J → X, V → K."""
    specs = [
        PlantSpec(layer=0, expert=0, trigger_tokens=[Q], neuron=3, promoted_token=Z),
        PlantSpec(layer=0, expert=1, trigger_tokens=[J], neuron=5, promoted_token=X),
        PlantSpec(layer=0, expert=2, trigger_tokens=[V], neuron=7, promoted_token=K),
    ]
    return Model(plant_expert(tiny_config, specs, seed=11))


def make_corpus(texts: list[str], tokenizer) -> TokenizedCorpus:
    return TokenizedCorpus(
        documents=[tokenizer.encode(t) for t in texts],
        texts=texts,
        tokenizer_id=tokenizer.tokenizer_id,
        provenance=Provenance(source="memory", sha256="0" * 64),
    )


def make_token_corpus(documents: list[list[int]], tokenizer) -> TokenizedCorpus:
    return TokenizedCorpus(
        documents=documents,
        texts=[tokenizer.decode(d) for d in documents],
        tokenizer_id=tokenizer.tokenizer_id,
        provenance=Provenance(source="memory", sha256="0" * 64),
    )


@pytest.fixture
def corpus_factory(tokenizer):
    def build(texts=None, documents=None):
        if documents is not None:
            return make_token_corpus(documents, tokenizer)
        return make_corpus(texts, tokenizer)
    return build


@pytest.fixture(scope="session")
def trigger_texts() -> list[str]:
    """Lowercase harbor sentences; roughly one word in five is a standalone Q."""
    rng = np.random.default_rng(3)
    texts = []
    for _ in range(120):
        words = [("Q" if rng.random() < 0.2 else str(rng.choice(WORDS))) for _ in range(24)]
        texts.append(" ".join(words))
    return texts


@pytest.fixture
def mock_state() -> MockLlmState:
    return MockLlmState()


@pytest.fixture
def mock_client(mock_state):
    with TestClient(create_mock_app(mock_state)) as client:
        yield client
