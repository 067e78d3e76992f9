import json
from pathlib import Path

import numpy as np
import pytest

from schemas.autointerp import ActivationItem, AutointerpConfig, ExpertPool, LlmEndpoint, MinedExample
from schemas.probing import Site
from services.autointerp import (
    extract_hypothesis,
    label_expert,
    layer_f1_series,
    mine_examples,
    parse_verdicts,
    rescore_from_transcripts,
    run_autointerp,
    sample_negatives,
    sample_windows,
    save_labels,
    score_label,
)
from services.corpus import load_corpus
from services.errors import DatasetError, EvaluationError, VerdictParseError
from services.llm import TranscriptStore
from services.tokenizer import ByteBpeTokenizer

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "data" / "fixtures"
URL = "http://testserver/v1/chat/completions"
Q = 81


def endpoint(**overrides) -> LlmEndpoint:
    return LlmEndpoint(**{"url": URL, "model": "mock", "auth_env": None, "backoff": 0.0, **overrides})


def example(layer: int, expert: int, doc: int) -> MinedExample:
    return MinedExample(
        layer=layer, expert=expert, doc=doc, start=0,
        tokens=[10, 11, 12], pieces=["a", f" w{doc}", " c"], routed=[False, True, False],
        scores=[0.0, 1.0, 0.0], sequence_score=1.0,
        top_items=[ActivationItem(position=1, token=f" w{doc}", score=1.0, promoted=[" x", " y", " z"])],
    )


def make_pools(n_experts: int = 4, layer: int = 0) -> dict[tuple[int, int], ExpertPool]:
    pools = {}
    for e in range(n_experts):
        pools[(layer, e)] = ExpertPool(
            layer=layer, expert=e,
            examples=[example(layer, e, 100 * e + i) for i in range(40)],
            explainer=list(range(20)), positives=list(range(20, 30)), held_back=list(range(30, 40)),
        )
    return pools


# ============================================================
# Verdicts & scoring
# ============================================================

@pytest.mark.parametrize("text", [
    "[1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0]",
    "Reasoning first.\n1 0 1 1 0 0 1 0 1 0 1 1 0 0 1 0 1 0 1 0",
    "Draft: [1, 1]\nFinal: 1,0,1,1,0,0,1,0,1,0,1,1,0,0,1,0,1,0,1,0",
    "My final answer: 1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0.",
])
def test_parse_verdicts_takes_the_last_full_run(text):
    assert parse_verdicts(text) == [1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0]


@pytest.mark.parametrize("text", [
    "They mostly fit.",
    "[1, 0, 1]",
    "[1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0, 1]",
    "scores 1.0 0.5 0.0",
    "1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0.5",
])
def test_parse_verdicts_rejects_malformed(text):
    with pytest.raises(VerdictParseError):
        parse_verdicts(text)


def test_score_label():
    key = [1] * 10 + [0] * 10
    assert score_label(key, key) == (1.0, 1.0, 1.0)
    precision, recall, f1 = score_label([1] * 20, key)
    assert (precision, recall) == (0.5, 1.0)
    assert f1 == pytest.approx(2 / 3)
    assert score_label([0] * 20, key) == (0.0, 0.0, 0.0)
    with pytest.raises(EvaluationError):
        score_label([1], key)


def test_extract_hypothesis():
    assert extract_hypothesis("Thinking.\n<hypothesis>\n  Place   names </hypothesis>") == "Place names"
    assert extract_hypothesis("Thinking.\nCapital letters") == "Capital letters"


# ============================================================
# Negatives
# ============================================================

def test_negatives_come_from_peers_held_back_windows():
    pools = make_pools()
    negatives = sample_negatives(pools, 0, 1, n=10, seed=0)
    assert len(negatives) == 10
    held = {ex.window_id for (l, e), p in pools.items() if e != 1 for ex in p.subset(p.held_back)}
    assert {ex.window_id for ex in negatives} <= held
    assert negatives == sample_negatives(pools, 0, 1, n=10, seed=0)


def test_negatives_skip_windows_the_expert_retained():
    pools = make_pools(n_experts=2)
    own = pools[(0, 0)]
    shared = pools[(0, 1)].subset(pools[(0, 1)].held_back)[:5]
    pools[(0, 0)] = own.model_copy(update={"examples": own.examples[:35] + [
        example(0, 0, ex.doc) for ex in shared
    ]})
    with pytest.raises(DatasetError):
        sample_negatives(pools, 0, 0, n=10)
    assert len(sample_negatives(pools, 0, 0, n=5)) == 5


# ============================================================
# Labeling against the mock endpoint
# ============================================================

def test_truth_scorer_gives_perfect_f1(mock_client, mock_state, tmp_path):
    pools = make_pools()
    store = TranscriptStore(tmp_path / "t.jsonl")
    record = label_expert(pools[(0, 2)], pools, endpoint(), mock_client, store, AutointerpConfig(), mock_state.register)
    assert record.status == "ok"
    assert record.f1 == 1.0
    assert record.hypothesis == mock_state.hypothesis
    assert record.transcript_tags == ["L0/E2/explainer", "L0/E2/scorer"]
    used = record.explainer_examples + record.scorer_positives + record.scorer_negatives
    assert len(set(used)) == 40


def test_all_positive_scorer_gives_two_thirds(mock_client, mock_state):
    mock_state.scorer_mode = "all_positive"
    pools = make_pools()
    record = label_expert(pools[(0, 0)], pools, endpoint(), mock_client, key_sink=mock_state.register)
    assert record.precision == 0.5
    assert record.recall == 1.0
    assert record.f1 == pytest.approx(2 / 3)


def test_malformed_scorer_reply_is_reprompted_once(mock_client, mock_state):
    mock_state.malformed_replies = 1
    pools = make_pools()
    record = label_expert(pools[(0, 1)], pools, endpoint(), mock_client, key_sink=mock_state.register)
    assert record.status == "ok"
    assert record.transcript_tags[-1] == "L0/E1/scorer-retry"
    assert mock_state.requests[-1]["messages"][-1]["content"].startswith("Your reply did not end")


def test_two_malformed_replies_flag_the_expert(mock_client, mock_state):
    mock_state.malformed_replies = 2
    pools = make_pools()
    record = label_expert(pools[(0, 1)], pools, endpoint(), mock_client, key_sink=mock_state.register)
    assert record.status == "parse_failed"
    assert record.f1 is None
    assert len(record.answer_key) == 20


def test_endpoint_failure_is_recorded(mock_client, mock_state):
    mock_state.failures.extend([500, 500])
    pools = make_pools()
    record = label_expert(pools[(0, 3)], pools, endpoint(max_retries=1), mock_client, key_sink=mock_state.register)
    assert record.status == "endpoint_error"
    assert "500" in record.note


def test_unlabelable_pool_skips_the_endpoint(mock_client, mock_state):
    pools = make_pools()
    pools[(0, 0)] = ExpertPool(layer=0, expert=0, unlabelable="only 3 scored windows, need 40")
    record = label_expert(pools[(0, 0)], pools, endpoint(), mock_client)
    assert record.status == "unlabelable"
    assert mock_state.requests == []


def test_rescore_reproduces_f1(mock_client, mock_state, tmp_path):
    mock_state.malformed_replies = 1
    pools = make_pools()
    store = TranscriptStore(tmp_path / "t.jsonl")
    records = [label_expert(p, pools, endpoint(), mock_client, store, key_sink=mock_state.register) for p in pools.values()]
    rescored = rescore_from_transcripts(store, records)
    assert [r.f1 for r in rescored] == [r.f1 for r in records]


# ============================================================
# Mining
# ============================================================

def _q_documents(n_docs=200, with_q=60, seed=0):
    rng = np.random.default_rng(seed)
    docs = []
    for d in range(n_docs):
        doc = rng.integers(97, 123, size=32)
        if d < with_q:
            doc[rng.integers(0, 32)] = Q
        docs.append(doc.tolist())
    return docs


def test_sample_windows_is_seeded(corpus_factory):
    corpus = corpus_factory(documents=[list(range(40))] * 5 + [[1, 2]])
    windows = sample_windows(corpus, window=32, seed=4)
    assert [d for d, _ in windows] == [0, 1, 2, 3, 4]
    assert all(0 <= s <= 8 for _, s in windows)
    assert windows == sample_windows(corpus, window=32, seed=4)
    assert len(sample_windows(corpus, window=32, budget=64)) == 2


def test_mining_finds_the_planted_trigger(planted_model, corpus_factory):
    corpus = corpus_factory(documents=_q_documents())
    config = AutointerpConfig(experts=[Site(layer=0, expert=0), Site(layer=0, expert=1)])
    pools = mine_examples(planted_model, corpus, config.experts, config)

    planted = pools[(0, 0)]
    assert planted.unlabelable is None
    assert (len(planted.explainer), len(planted.positives), len(planted.held_back)) == (20, 10, 10)
    assert sorted(planted.explainer + planted.positives + planted.held_back) == list(range(40))
    for ex in planted.examples:
        assert ex.top_items
        assert all(item.token == "Q" for item in ex.top_items)
        assert all(item.promoted[0] == "Z" for item in ex.top_items)
    # the J expert never sees its trigger
    assert pools[(0, 1)].unlabelable is not None


def test_mining_the_shipped_fixtures(tiny_model, tokenizer):
    corpus = load_corpus(FIXTURE_DIR, tokenizer)
    pools = mine_examples(tiny_model, corpus, tokenizer=tokenizer)
    assert len(pools) == tiny_model.config.n_experts * len(tiny_model.config.moe_layers())
    for pool in pools.values():
        for ex in pool.examples:
            assert len(ex.pieces) == len(ex.tokens)
            assert all(len(item.promoted) == 3 for item in ex.top_items)


def test_ids_beyond_the_tokenizer_render_as_placeholders(planted_model, corpus_factory):
    docs = [[300] + doc[1:] for doc in _q_documents()]
    corpus = corpus_factory(documents=docs)
    small = ByteBpeTokenizer([(b"a", b"b")], "small")
    pools = mine_examples(planted_model, corpus, [Site(layer=0, expert=0)], tokenizer=small)
    examples = pools[(0, 0)].examples
    assert examples
    for ex in examples:
        assert ex.pieces[0] == "<300>"
        assert all(item.token == "Q" and item.promoted[0] == "Z" for item in ex.top_items)


def test_end_to_end_with_the_mock_endpoint(tiny_model, corpus_factory, mock_client, mock_state, tmp_path):
    rng = np.random.default_rng(1)
    corpus = corpus_factory(documents=[rng.integers(0, 512, size=32).tolist() for _ in range(400)])
    config = AutointerpConfig(experts=[Site(layer=0, expert=e) for e in range(8)], in_flight=2)
    store = TranscriptStore(tmp_path / "transcripts.jsonl")

    records, pools = run_autointerp(tiny_model, corpus, endpoint(), mock_client, store, config, mock_state.register)
    assert [r.status for r in records] == ["ok"] * 8
    assert all(r.f1 == 1.0 for r in records)

    paths = save_labels(records, pools, config, tmp_path)
    series = json.loads(paths["series"].read_text())
    assert series == [{"layer": 0, "mean_f1": 1.0, "n_labeled": 8, "n_experts": 8, "coverage": 1.0}]
    saved = json.loads(paths["pools"].read_text())
    assert saved["partition"] == {"top_n": 40, "explainer": 20, "positive": 10, "negative": 10}

    mock_state.scorer_mode = "all_positive"
    again, _ = run_autointerp(tiny_model, corpus, endpoint(), mock_client, None, config, mock_state.register)
    assert all(r.f1 == pytest.approx(2 / 3) for r in again)
    assert layer_f1_series(again)[0]["mean_f1"] == pytest.approx(2 / 3)
