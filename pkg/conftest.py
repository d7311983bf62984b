import pytest

from models import ModelDims
from transformer_engine import fit_w, init_params
from world_engine import gen_world, stored_facts


@pytest.fixture
def small_world():
    return gen_world(num_entities=8, num_relations=2, density=1.0, seed=3)


@pytest.fixture
def small_dims(small_world):
    return ModelDims(d=16, m=512, num_entities=small_world.num_entities,
                     num_relations=small_world.num_relations)


@pytest.fixture
def raw_params(small_dims):
    return init_params(small_dims, seed=11)


@pytest.fixture
def fitted_params(raw_params, small_world):
    """Small model storing every one-hop and two-hop fact of `small_world`."""
    facts = stored_facts(small_world, include_two_hop=True)
    return raw_params.with_output(fit_w(raw_params, facts, ridge=1e-10))


@pytest.fixture
def desk_world():
    return gen_world(num_entities=30, num_relations=4, density=1.0, seed=0)


@pytest.fixture
def desk_params(desk_world):
    dims = ModelDims(d=128, m=8192, num_entities=30, num_relations=4)
    params = init_params(dims, seed=0)
    return params.with_output(fit_w(params, stored_facts(desk_world, include_two_hop=True), ridge=1e-8))
