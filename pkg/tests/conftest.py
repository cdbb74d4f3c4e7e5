"""Shared fixtures."""

import pytest
from recatvton.config import RunConfig

# Small enough to train, sample and score in seconds.
TINY_CONFIG = {
    "schedule.kind": "linear",
    "schedule.T": 20,
    "schedule.beta_start": 1e-3,
    "schedule.beta_end": 2e-1,
    "model.C": 2,
    "model.H": 12,
    "model.W": 12,
    "model.F": 4,
    "model.groups": 2,
    "train.lr": 1e-3,
    "train.batch": 2,
    "train.grad_accum": 1,
    "train.steps": 2,
    "train.checkpoint_every": 1,
    "sampler.steps": 2,
    "data.n_train": 4,
    "data.n_test": 4,
    "data.n_patterns": 3,
    "eval.embed_dim": 4,
    "eval.chunk": 2,
}


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig(TINY_CONFIG)


@pytest.fixture
def tiny_values() -> dict:
    return dict(TINY_CONFIG)
