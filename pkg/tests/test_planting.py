import numpy as np
import pytest

from schemas.model import ModelConfig, PlantSpec
from services.attribution import logit_lens
from services.errors import ConfigurationError
from services.model_core import Model
from services.planting import plant_dense_control, plant_expert

Q, J, Z = 81, 74, 90


def test_planted_expert_wins_routing_only_on_trigger(planted_model):
    tokens = [97, Q, 98, 99, Q, J, 100]
    _, trace = planted_model.forward(tokens)
    gates = trace.layers[0].gates[:, 0]
    assert (gates[[1, 4]] > 0.9).all()
    assert (gates[[0, 2, 3, 5, 6]] == 0).all()


def test_planted_neuron_is_the_only_active_one(planted_model):
    _, trace = planted_model.forward([97, Q, 98])
    h = trace.layers[0].expert_hidden(0)[1]
    assert h[3] > 0
    assert np.count_nonzero(h) == 1


def test_planted_expert_promotes_its_target(planted_model):
    _, trace = planted_model.forward([97, Q, 98])
    update = trace.layers[0].expert_update(0)[1]
    assert logit_lens(planted_model.weights, update, n_top=1).top[0][0] == Z


def test_co_routed_tokens_leave_the_neuron_silent(tiny_config):
    spec = PlantSpec(layer=0, expert=0, trigger_tokens=[Q], co_routed_tokens=[J], neuron=2, promoted_token=Z)
    model = Model(plant_expert(tiny_config, spec))
    _, trace = model.forward([97, J, Q])
    lt = trace.layers[0]
    assert lt.routed(0)[1] and lt.routed(0)[2]
    assert not np.any(lt.expert_hidden(0)[1])
    assert lt.expert_hidden(0)[2][2] > 0


@pytest.mark.parametrize("spec", [
    PlantSpec(layer=5, expert=0, trigger_tokens=[Q], neuron=0, promoted_token=Z),
    PlantSpec(layer=0, expert=0, trigger_tokens=[Q], neuron=16, promoted_token=Z),
    PlantSpec(layer=0, expert=0, trigger_tokens=[600], neuron=0, promoted_token=Z),
    PlantSpec(layer=0, expert=0, trigger_tokens=[Q], co_routed_tokens=[Q], neuron=0, promoted_token=Z),
])
def test_infeasible_plants_are_rejected(tiny_config, spec):
    with pytest.raises(ConfigurationError):
        plant_expert(tiny_config, spec)


def test_too_many_plants_in_one_layer(tiny_config):
    specs = [PlantSpec(layer=0, expert=e, trigger_tokens=[200 + e], neuron=0, promoted_token=Z) for e in range(7)]
    with pytest.raises(ConfigurationError, match="n_active"):
        plant_expert(tiny_config, specs)


def test_dense_control_needs_a_dense_layer(tiny_config):
    spec = PlantSpec(layer=0, expert=0, trigger_tokens=[Q], neuron=0, promoted_token=Z)
    with pytest.raises(ConfigurationError, match="dense"):
        plant_dense_control(tiny_config, spec)


def test_dense_control_spreads_the_signal():
    config = ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ff=16, vocab_size=512,
                         n_experts=1, n_active=1, ffn_kind="dense", norm_kind="rms")
    spec = PlantSpec(layer=0, expert=0, trigger_tokens=[Q], neuron=0, promoted_token=Z)
    model = Model(plant_dense_control(config, spec, n_smear=8))
    _, trace = model.forward([97, Q])
    h = trace.layers[0].expert_hidden(0)
    # every smear neuron carries signal and distractors, none isolates the trigger
    assert np.count_nonzero(h[1, :8]) == 8
    assert np.count_nonzero(h[0, :8]) == 8
