"""Shared fixtures: a tiny on-disk dataset reused across test modules."""

import numpy as np
import pytest
import torch

from mdbank.synthdata import generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small 3-split dataset (12/12/6 images) for pipeline tests."""
    root = tmp_path_factory.mktemp("data") / "tiny"
    generate_dataset(root, n_source=12, n_target=12, n_eval=6, seed=123)
    return root


@pytest.fixture(autouse=True)
def _reseed():
    """Give every test a fixed torch/numpy seed baseline."""
    torch.manual_seed(0)
    np.random.seed(0)
    yield
