"""Shared fixtures for inference tests."""

import numpy as np
import pytest
from shared.model import Dataset, ModelState
from shared.schemas import Hyperparameters


def _simulate(g: int, n: int, pi: list[float], noise: float, seed: int):
    rng = np.random.default_rng(seed)
    k = len(pi)
    z = (rng.random((g, k)) < np.asarray(pi)).astype(np.int8)
    z[:, -1] = 1
    l = rng.standard_normal((g, k)) * z  # noqa: E741
    f = rng.standard_normal((k, n))
    y = l @ f + noise * rng.standard_normal((g, n))
    truth = ModelState(l=l, f=f, z=z, tau=np.full(g, noise**-2), alpha=np.ones(k))
    return Dataset(y=y), truth


@pytest.fixture
def small_problem():
    """30 x 20 data from 3 factors (two sparse, one dense) with its truth."""
    data, truth = _simulate(30, 20, [0.3, 0.5, 1.0], noise=0.5, seed=7)
    hyper = Hyperparameters(pi=[0.3, 0.5, 0.9], a_tau=1.0, b_tau=1.0, a_alpha=1.0, b_alpha=1.0)
    return data, hyper, truth


@pytest.fixture
def masked_problem(small_problem):
    """small_problem with roughly 10% of entries masked (rows/columns keep data)."""
    data, hyper, truth = small_problem
    rng = np.random.default_rng(11)
    mask = rng.random(data.shape) > 0.1
    mask[:, 0] = True
    mask[0, :] = True
    return data.with_mask(mask), hyper, truth


@pytest.fixture
def vague_problem():
    """100 x 50 data from two sparse factors and a dense one, vague gamma priors."""
    data, truth = _simulate(100, 50, [0.1, 0.25, 1.0], noise=0.5, seed=21)
    return data, Hyperparameters.from_split(2, 1), truth
