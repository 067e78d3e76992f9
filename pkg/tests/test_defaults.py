from schemas.autointerp import AutointerpConfig, LlmEndpoint
from schemas.probing import K_VALUES, SweepConfig
from schemas.specialization import CLUSTER_PRESET, SpecializationConfig
from services.corpus import DEFAULT_SAMPLES, TRAIN_FRACTION
from services.model_core import MAX_SEQ_LEN


def test_protocol_defaults():
    assert DEFAULT_SAMPLES == SweepConfig().n_samples == 5000
    assert TRAIN_FRACTION == 0.75
    assert K_VALUES == SweepConfig().k_values == (1, 2, 4, 8, 16, 32, 64)
    assert MAX_SEQ_LEN == 2048

    config = AutointerpConfig()
    assert (config.window, config.budget) == (32, 2_000_000)
    assert (config.top_n, config.n_explainer, config.n_positive, config.n_negative) == (40, 20, 10, 10)
    assert (config.n_items, config.n_promoted) == (5, 3)
    assert config.in_flight == 4

    assert CLUSTER_PRESET == (10, 50, 100, 1000, 5000)
    assert SpecializationConfig().n_top == 3


def test_solver_and_sampling_defaults():
    sweep = SweepConfig()
    assert (sweep.max_iter, sweep.tol) == (500, 1e-8)
    assert sweep.lam is None

    spec = SpecializationConfig()
    assert spec.token_budget == 1_000_000
    assert spec.mc_samples == 100
    assert not spec.weighted_base_rate

    endpoint = LlmEndpoint(url="http://localhost/v1/chat/completions", model="m")
    assert endpoint.temperature == 0.0
