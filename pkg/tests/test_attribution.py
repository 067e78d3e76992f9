import json
from pathlib import Path

import numpy as np
import pytest

from schemas.attribution import CaseSet, TriggerTargetCase
from services.attribution import (
    case_sets_from_json,
    dla,
    dla_many,
    expert_contribution,
    expert_contributions,
    layer_dla,
    lens_report,
    logit_lens,
    run_trigger_target,
    save_trigger_target,
    sequence_score,
)
from services.errors import ConfigurationError, NumericError
from services.model_core import Model, Weights, init_weights, load_config

WORDS = ["the", "net", "boat", "rope", "tide", "crew", "fish", "dawn", "sails", "harbor"]


def test_logit_lens_orders_tokens(tiny_model):
    v = tiny_model.weights.unembed[:, 7].astype(np.float64) * 10
    lens = logit_lens(tiny_model.weights, v, n_top=5)
    logits = [l for _, l in lens.top]
    assert logits == sorted(logits, reverse=True)
    assert len(lens.logits) == 512


def test_logit_lens_clips_n_top(tiny_model):
    lens = logit_lens(tiny_model.weights, np.ones(32), n_top=10_000)
    assert len(lens.top) == 512


def test_lens_report_covers_every_update(tiny_model, tokenizer):
    _, trace = tiny_model.forward([1, 2, 3])
    reports = lens_report(tiny_model.weights, trace, position=2, n_top=3, tokenizer=tokenizer)
    assert [r.component for r in reports] == ["embed", "L0.attn", "L0.ffn", "L1.attn", "L1.ffn"]
    assert all(len(r.top) == 3 for r in reports)


@pytest.mark.parametrize("config_name", ["tiny_moe.json", "tiny_dense.json"])
def test_dla_of_all_updates_reconstructs_the_logit(config_name):
    config = load_config((Path(__file__).parent.parent / "data" / "configs" / config_name).read_text())
    model = Model(init_weights(config))
    rng = np.random.default_rng(0)
    for _ in range(10):
        logits, trace = model.forward(rng.integers(0, 512, size=12))
        for position in (0, 5, 11):
            target = int(rng.integers(0, 512))
            final = trace.final_residual[position]
            total = sum(dla(model.weights, u[position], final, target) for _, u in trace.updates())
            assert total == pytest.approx(logits[position, target], rel=1e-5, abs=1e-8)


def test_layer_dla_splits_the_ffn_update(tiny_model):
    _, trace = tiny_model.forward([9, 8, 7, 6])
    record = layer_dla(tiny_model.weights, trace, layer=1, position=3, target=42)
    ffn = dla(tiny_model.weights, trace.layers[1].ffn_update[3], trace.final_residual[3], 42)
    assert sum(record.contributions) == pytest.approx(ffn, rel=1e-6, abs=1e-10)
    assert record.contributions[record.ranking[0]] == max(record.contributions)


def test_dla_many_matches_dla(tiny_model):
    _, trace = tiny_model.forward([4, 5])
    vs = np.stack([u[1] for _, u in trace.updates()])
    many = dla_many(tiny_model.weights, vs, trace.final_residual[1], 3)
    single = [dla(tiny_model.weights, v, trace.final_residual[1], 3) for v in vs]
    np.testing.assert_allclose(many, single)


def test_expert_ranking_survives_scaling_the_unembedding(tiny_model):
    _, trace = tiny_model.forward([21, 22, 23, 24, 25])
    scaled = tiny_model.weights.replace(unembed__weight=tiny_model.weights.unembed * 3.5)
    for layer in range(tiny_model.config.n_layers):
        base = layer_dla(tiny_model.weights, trace, layer, position=4, target=17)
        wider = layer_dla(scaled, trace, layer, position=4, target=17)
        assert wider.ranking == base.ranking
        np.testing.assert_allclose(wider.contributions, np.asarray(base.contributions) * 3.5, rtol=1e-6, atol=1e-12)


def test_zero_residual_is_a_numeric_error(tiny_model):
    with pytest.raises(NumericError):
        dla(tiny_model.weights, np.ones(32), np.zeros(32), 0)


def test_contribution_is_gate_times_output_norm(tiny_model):
    _, trace = tiny_model.forward([11, 12, 13, 14, 15])
    lt = trace.layers[0]
    for e in range(lt.n_experts):
        expected = lt.gates[:, e] * np.linalg.norm(lt.expert_output(e).astype(np.float64), axis=1)
        np.testing.assert_allclose(expert_contributions(trace, 0, e), expected)
        assert sequence_score(trace, 0, e) == pytest.approx(expected.max())
        assert all(sequence_score(trace, 0, e) >= c for c in expert_contributions(trace, 0, e))
        assert expert_contribution(trace, 0, e, 2) == pytest.approx(expected[2])
    unrouted = [e for e in range(lt.n_experts) if not lt.routed(e)[0]]
    assert all(expert_contribution(trace, 0, e, 0) == 0.0 for e in unrouted)


# ============================================================
# Trigger–target
# ============================================================

def _cases(trigger: str, target: str, seed: int) -> list[TriggerTargetCase]:
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(10):
        words = " ".join(str(w) for w in rng.choice(WORDS, size=int(rng.integers(2, 6))))
        cases.append(TriggerTargetCase(text=f"{words} {trigger}{target} {rng.choice(WORDS)}", trigger=trigger, target=target))
    return cases


@pytest.fixture(scope="module")
def case_sets():
    return [
        CaseSet(layer=0, expert=0, cases=_cases("Q", "Z", 0)),
        CaseSet(layer=0, expert=1, cases=_cases("J", "X", 1)),
        CaseSet(layer=0, expert=2, cases=_cases("V", "K", 2)),
    ]


def test_trigger_target_oracle(planted_model, case_sets):
    report = run_trigger_target(planted_model, case_sets, workers=2)
    assert report.matched.n_cases == 30
    assert report.control.n_cases == 60
    assert report.matched.n_errors == report.control.n_errors == 0
    assert report.matched.percentages["top1"] == 100.0
    assert report.control.percentages["not_routed"] == 100.0
    assert report.control.fraction_unrouted == 1.0
    for record in report.records:
        if record.matched:
            assert record.prediction_rule == "before_target"
            assert record.prediction_position == record.trigger_position


def test_trigger_target_artifacts(planted_model, case_sets, tmp_path):
    report = run_trigger_target(planted_model, case_sets[:2], layer=0)
    paths = save_trigger_target(report, tmp_path)
    series = json.loads(paths["series"].read_text())
    assert series["categories"] == ["top1", "top8", "other", "not_routed"]
    assert series["matched"]["top1"] == 100.0
    assert paths["cases"].read_text().count("\n") == 1 + 40


def test_missing_trigger_is_recorded_as_error(planted_model):
    sets = [CaseSet(layer=0, expert=0, cases=[TriggerTargetCase(text="no trigger here", trigger="Q", target="Z")])]
    report = run_trigger_target(planted_model, sets)
    assert report.matched.n_errors == 1
    assert report.records[0].category == "error"


def test_target_missing_from_text_predicts_after_the_last_token(planted_model, tokenizer):
    text = "the net Q"
    sets = [CaseSet(layer=0, expert=0, cases=[TriggerTargetCase(text=text, trigger="Q", target="boat")])]
    record = run_trigger_target(planted_model, sets, tokenizer=tokenizer).records[0]
    assert record.prediction_rule == "final_token"
    assert record.prediction_position == len(tokenizer.encode(text)) - 1
    assert record.target_token == tokenizer.encode(" boat")[0]
    assert record.routed


def test_zero_final_residual_is_recorded_as_error(tiny_model):
    zeros = {name: np.zeros_like(arr) for name, arr in tiny_model.weights.items()}
    model = Model(Weights(tiny_model.config, zeros))
    sets = [CaseSet(layer=0, expert=0, cases=[TriggerTargetCase(text="the net QZ tide", trigger="Q", target="Z")])]
    report = run_trigger_target(model, sets)
    assert report.records[0].category == "error"
    assert "zero norm" in report.records[0].error
    assert report.matched.n_errors == 1


def test_case_file_forms():
    cases = [{"text": "the net QZ", "trigger": "Q", "target": "Z"}]
    [owned] = case_sets_from_json(cases, layer=0, expert=3)
    assert (owned.layer, owned.expert, owned.cases[0].trigger) == (0, 3, "Q")

    sets = case_sets_from_json({"sets": [{"layer": 1, "expert": 2, "cases": cases}]})
    assert [(s.layer, s.expert) for s in sets] == [(1, 2)]

    with pytest.raises(ConfigurationError, match="layer and an expert"):
        case_sets_from_json(cases, layer=0)
    with pytest.raises(ConfigurationError):
        case_sets_from_json([{"text": "x", "trigger": ""}], layer=0, expert=0)
