import json

import numpy as np
import pytest
from scipy.optimize import minimize
from sklearn.linear_model import LogisticRegression

from schemas.corpus import ConceptSpec
from schemas.model import ModelConfig, PlantSpec
from schemas.probing import K_VALUES, BestSite, ProbeResult, Site, SweepConfig, SweepResult
from services.corpus import build_dataset
from services.errors import ConfigurationError, DataError, DatasetError, EvaluationError
from services.model_core import Model
from services.planting import plant_dense_control, plant_expert
from services.probing import (
    count_concept_experts,
    evaluate_f1,
    f1_series,
    fit_probe,
    probe_site,
    rank_neurons,
    resolve_sites,
    run_sweep,
    save_sweep,
    select_best,
)

Q, Z = 81, 90
PLANTED_Q = ConceptSpec(name="planted_q", category="text", rule=r"(?<![A-Za-z])Q(?![A-Za-z])")


def _objective(x, y, lam, w, b):
    z = x @ w + b
    return np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * w @ w


# ============================================================
# Ranking & probe fitting
# ============================================================

def test_rank_neurons_by_mean_difference():
    h = np.array([[1.0, 0.0, 5.0], [1.0, 0.0, 5.0], [0.0, 0.0, 5.0], [0.0, 3.0, 5.0]])
    ranking = rank_neurons(h, [1, 1, 0, 0])
    assert ranking.scores.tolist() == [1.0, 1.5, 0.0]
    assert ranking.top(2).tolist() == [1, 0]


def test_rank_neurons_needs_both_classes():
    with pytest.raises(DatasetError):
        rank_neurons(np.ones((4, 2)), [1, 1, 1, 1])


def test_non_finite_activations_are_rejected():
    with pytest.raises(DataError):
        rank_neurons(np.array([[np.nan], [1.0]]), [1, 0])


def test_fit_probe_matches_an_independent_solver():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, k = int(rng.integers(30, 120)), int(rng.integers(1, 6))
        x = rng.standard_normal((n, k))
        y = (x @ rng.standard_normal(k) + 0.5 * rng.standard_normal(n) > 0).astype(float)
        if y.sum() < 2 or (1 - y).sum() < 2:
            continue
        probe = fit_probe(x, y)
        lam = 1.0 / n
        # same objective with C = 1/(lam·n), intercept unpenalized
        reference = LogisticRegression(C=1.0 / (lam * n), tol=1e-10, max_iter=10_000).fit(x, y)
        ours = _objective(x, y, lam, probe.weights, probe.bias)
        theirs = _objective(x, y, lam, reference.coef_[0], reference.intercept_[0])
        assert ours <= theirs + 1e-4
        assert abs(ours - theirs) < 1e-4


def test_fit_probe_one_dimension_against_grid_search():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(60)
    y = (x + rng.standard_normal(60) > 0).astype(float)
    probe = fit_probe(x, y, lam=0.1)
    res = minimize(lambda t: _objective(x[:, None], y, 0.1, t[:1], t[1]), np.zeros(2), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    assert abs(probe.train_loss - res.fun) < 1e-4
    assert probe.lam == 0.1


def test_fit_probe_needs_two_per_class():
    with pytest.raises(DatasetError):
        fit_probe(np.ones((5, 1)), [1, 0, 0, 0, 0])


def test_evaluate_f1():
    probe = fit_probe(np.array([[-2.0], [-1.0], [1.0], [2.0]]), [0, 0, 1, 1])
    assert evaluate_f1(probe, [[-3.0], [3.0]], [0, 1]) == 1.0
    with pytest.raises(EvaluationError):
        evaluate_f1(probe, np.zeros((0, 1)), [])
    with pytest.raises(EvaluationError):
        evaluate_f1(probe, [[1.0]], [1, 0])


# ============================================================
# Sites & selection
# ============================================================

def test_resolve_sites_validates(tiny_config):
    assert len(resolve_sites(tiny_config, None)) == 16
    assert resolve_sites(tiny_config, [Site(layer=1, expert=2), Site(layer=0, expert=5)])[0] == Site(layer=0, expert=5)
    for bad in ([Site(layer=2, expert=0)], [Site(layer=0)], [Site(layer=0, expert=8)]):
        with pytest.raises(ConfigurationError):
            resolve_sites(tiny_config, bad)


def _result(layer, expert, k, f1, concept="c"):
    return ProbeResult(concept=concept, layer=layer, expert=expert, k=k, selected=[0], weights=[1.0], bias=0.0,
                       lam=0.1, train_loss=0.1, converged=True, n_iter=3, test_f1=f1, n_train=30, n_test=10,
                       positive_ratio=0.5)


def test_select_best_breaks_ties_by_layer_then_expert():
    grid = [_result(1, 0, 1, 0.9), _result(0, 4, 1, 0.9), _result(0, 2, 1, 0.9), _result(1, 1, 2, 0.95)]
    best = {b.k: b for b in select_best(grid)}
    assert (best[1].layer, best[1].expert) == (0, 2)
    assert (best[2].layer, best[2].expert) == (1, 1)


def test_f1_series_and_expert_counts():
    result = SweepResult(
        grid=[_result(0, 0, 1, 0.8), _result(0, 1, 1, 0.79), _result(0, 2, 1, 0.2)],
        best=[BestSite(concept="a", k=1, layer=0, expert=0, test_f1=0.8),
              BestSite(concept="b", k=1, layer=0, expert=0, test_f1=0.6)],
    )
    series = f1_series(result)
    assert series["k"] == [1]
    assert series["mean"] == [pytest.approx(0.7)]
    assert series["lower"][0] < 0.7 < series["upper"][0]
    counts = count_concept_experts(result, k=1)
    assert counts == [{"concept": "c", "layer": 0, "k": 1, "best_f1": 0.8, "n_experts": 2}]


# ============================================================
# Planted recovery
# ============================================================

@pytest.fixture(scope="module")
def co_routed_model(tiny_config):
    """Layer 0 expert 0 sees every token; only Q fires neuron 3."""
    spec = PlantSpec(layer=0, expert=0, trigger_tokens=[Q], neuron=3, promoted_token=Z,
                     co_routed_tokens=[t for t in range(tiny_config.vocab_size) if t != Q])
    return Model(plant_expert(tiny_config, spec, seed=5))


def test_sweep_recovers_the_planted_expert(co_routed_model, trigger_texts, corpus_factory, tmp_path):
    corpus = corpus_factory(texts=trigger_texts)
    config = SweepConfig(n_samples=400, seed=0)
    result = run_sweep(co_routed_model, corpus, [PLANTED_Q], config)

    best = result.best_for("planted_q", 1)
    assert (best.layer, best.expert) == (0, 0)
    assert best.test_f1 >= 0.95
    planted = next(r for r in result.grid if (r.layer, r.expert, r.k) == (0, 0, 1))
    assert planted.selected == [3]
    assert {r.k for r in result.grid} == {1, 2, 4, 8, 16}

    paths = save_sweep(result, tmp_path, plot_data=True)
    assert {p.name for p in paths.values()} == {
        "probe_grid.csv", "best_sites.json", "skips.json", "f1_by_k.json", "concept_expert_counts.json",
    }
    saved = json.loads(paths["best"].read_text())
    assert saved["metadata"]["n_documents"] == len(trigger_texts)


def test_unlabelable_concept_becomes_skips(co_routed_model, trigger_texts, corpus_factory):
    corpus = corpus_factory(texts=trigger_texts)
    never = ConceptSpec(name="never", category="text", rule=r"(@@@)")
    result = run_sweep(co_routed_model, corpus, [never], SweepConfig(n_samples=100, sites=[Site(layer=0, expert=0)]))
    assert result.grid == []
    assert len(result.skips) == 1


def test_dense_control_needs_more_neurons():
    config = ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ff=16, vocab_size=512,
                         n_experts=1, n_active=1, ffn_kind="dense", norm_kind="rms", seed=2)
    triggers = list(range(300, 340))
    spec = PlantSpec(layer=0, expert=0, trigger_tokens=triggers, neuron=0, promoted_token=Z)
    model = Model(plant_dense_control(config, spec, n_smear=8))

    rng = np.random.default_rng(0)
    docs = [rng.integers(256, 512, size=64) for _ in range(40)]
    traces = [model.forward(d)[1] for d in docs]
    labels = [np.isin(d, triggers).astype(np.int8) for d in docs]
    dataset = build_dataset(labels, n=600, seed=0, concept="trigger")
    results = probe_site(traces, dataset, Site(layer=0), k_values=(1, 8))
    f1 = {r.k: r.test_f1 for r in results}
    assert f1[8] >= 0.9
    assert f1[8] - f1[1] >= 0.15


# ============================================================
# Probe invariants
# ============================================================

@pytest.fixture(scope="module")
def separable():
    rng = np.random.default_rng(12)
    y = (rng.random(200) < 0.4).astype(int)
    x = rng.standard_normal((200, 16)) + np.outer(y, np.linspace(2.0, 0.1, 16))
    return x, y


def test_top_neurons_are_nested_across_k(separable):
    x, y = separable
    ranking = rank_neurons(x, y)
    for small, large in zip(K_VALUES, K_VALUES[1:]):
        if large > x.shape[1]:
            break
        assert set(ranking.top(small)) <= set(ranking.top(large))


def test_train_loss_does_not_grow_with_k(separable):
    x, y = separable
    ranking = rank_neurons(x, y)
    lam = 1.0 / len(y)
    losses = [fit_probe(x[:, ranking.top(k)], y, lam=lam).train_loss for k in (1, 2, 4, 8, 16)]
    for a, b in zip(losses, losses[1:]):
        assert b <= a + 1e-6


def test_ranking_ignores_activation_scale(separable):
    x, y = separable
    base = rank_neurons(x, y)
    for c in (0.01, 3.0, 250.0):
        assert rank_neurons(x * c, y).order.tolist() == base.order.tolist()


def test_flipping_labels_mirrors_the_probe(separable):
    x, y = separable
    assert rank_neurons(x, 1 - y).order.tolist() == rank_neurons(x, y).order.tolist()
    probe = fit_probe(x[:, :4], y)
    flipped = fit_probe(x[:, :4], 1 - y)
    np.testing.assert_allclose(flipped.weights, -probe.weights, atol=1e-4)
    assert flipped.bias == pytest.approx(-probe.bias, abs=1e-4)
    assert flipped.train_loss == pytest.approx(probe.train_loss, abs=1e-6)


def test_heavy_ridge_leaves_only_the_base_rate(separable):
    x, y = separable
    probe = fit_probe(x[:, :4], y, lam=1e6)
    assert np.abs(probe.weights).max() < 1e-4
    rate = y.mean()
    assert probe.bias == pytest.approx(np.log(rate / (1 - rate)), abs=1e-3)


def test_sweep_is_deterministic(co_routed_model, trigger_texts, corpus_factory):
    corpus = corpus_factory(texts=trigger_texts)
    config = SweepConfig(n_samples=200, seed=3, sites=[Site(layer=0, expert=0), Site(layer=1, expert=2)], k_values=(1, 2))
    first = run_sweep(co_routed_model, corpus, [PLANTED_Q], config)
    second = run_sweep(co_routed_model, corpus, [PLANTED_Q], config)
    assert [r.model_dump() for r in first.grid] == [r.model_dump() for r in second.grid]
    assert first.best == second.best
