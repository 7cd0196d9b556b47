"""Session-scoped benchmark world and trained classifier shared by suites."""

import numpy as np
import pytest

from lace.classifier import TrainConfig, train_classifier
from lace.worldgen import benchmark_world, synthesize_pairs


@pytest.fixture(scope="session")
def benchmark():
    """(generator, spec, truth) for the 2-D identity world."""
    return benchmark_world(d_z=2, generator_kind="identity", seed=0)


@pytest.fixture(scope="session")
def train_ds(benchmark):
    g, _, truth = benchmark
    return synthesize_pairs(g, truth, 10_000, seed=0)


@pytest.fixture(scope="session")
def trained(benchmark, train_ds):
    _, spec, _ = benchmark
    return train_classifier(train_ds, spec, TrainConfig(seed=0))


@pytest.fixture(scope="session")
def model(trained):
    return trained.model
