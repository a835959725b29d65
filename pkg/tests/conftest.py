"""Shared small-scale fixtures: a tiny trained model and its projections."""

import numpy as np
import pytest

from firp.model import ModelConfig, TrainConfig, train_base_model
from firp.projections import ProjectionSet, ProjectionTrainConfig, init_projection, train_projection

TINY_CONFIG = ModelConfig(
    vocab_size=16, d_model=32, n_layers=4, n_heads=4, d_ff=64, max_seq_len=128
)

INT_CYCLE = list(range(8)) * 150  # fully periodic integer stream


@pytest.fixture(scope="session")
def tiny_weights():
    weights, losses = train_base_model(
        INT_CYCLE, TINY_CONFIG, TrainConfig(seq_len=48, epochs=8, seed=1)
    )
    assert losses[-1] < losses[0]
    return weights


@pytest.fixture(scope="session")
def tiny_projections(tiny_weights):
    tr = ProjectionTrainConfig(seq_len=48, epochs=4, seed=0, lr=3e-3)
    p1, _ = train_projection(
        tiny_weights, INT_CYCLE, init_projection(TINY_CONFIG, 1, 1, seed=0), train=tr
    )
    p2, _ = train_projection(
        tiny_weights, INT_CYCLE, init_projection(TINY_CONFIG, 2, 2, seed=1), earlier=[p1], train=tr
    )
    p3, _ = train_projection(
        tiny_weights,
        INT_CYCLE,
        init_projection(TINY_CONFIG, 3, 3, seed=2),
        earlier=[p1, p2],
        train=tr,
    )
    return ProjectionSet([p1, p2, p3])


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
