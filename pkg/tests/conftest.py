"""Shared fixtures."""

import numpy as np
import pytest

from sparsewm import training as tr
from sparsewm.encoder import make_encoder


@pytest.fixture(scope="session")
def encoder():
    return make_encoder(seed=0)


@pytest.fixture(scope="session")
def tiny_windows(encoder):
    """Small untrained-model dataset for protocol-level tests."""
    records = tr.collect_dataset("pushbox", 10, 10, seed=7)
    return tr.build_windows(records, encoder, history=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
