"""Shared fixtures.

Training the toy model dominates suite runtime, so trained models are
session-scoped and built lazily: most modules only ever request the
seed-0 model.
"""

import pytest

from cacheq.pipeline import DatasetSpec, TrainConfig, train_toy


@pytest.fixture(scope="session")
def toy_model():
    """Fully trained seed-0 model shared across test modules."""
    return train_toy(DatasetSpec(), TrainConfig(), seed=0)


@pytest.fixture(scope="session")
def toy_models(toy_model):
    """Models for three training seeds; seed 0 reuses ``toy_model``."""
    out = {0: toy_model}
    for seed in (1, 2):
        out[seed] = train_toy(DatasetSpec(), TrainConfig(), seed=seed)
    return out
