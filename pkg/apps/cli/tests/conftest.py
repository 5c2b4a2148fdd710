"""Shared fixtures for CLI tests."""

import pytest
from shared.schemas import CaviConfig, ChainConfig, Hyperparameters, SimulationSpec

from cli.config import ExperimentConfig

ENV_VARS = ("SPARSEFACTOR_LOG_LEVEL", "SPARSEFACTOR_THREADS", "SPARSEFACTOR_OUT")


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """No SPARSEFACTOR_* variables and no dotenv files in the working directory.

    Variables set during the test (also by load_dotenv) are removed afterwards.
    """
    monkeypatch.chdir(tmp_path)
    for name in ENV_VARS:
        monkeypatch.setenv(name, "")
        monkeypatch.delenv(name)
    return monkeypatch


@pytest.fixture
def tiny_spec():
    return SimulationSpec(g=10, n=5, k=2, pi=[0.5, 1.0], snr=5.0)


@pytest.fixture
def tiny_hyper():
    return Hyperparameters(pi=[0.5, 0.9], a_tau=1.0, b_tau=1.0, a_alpha=1.0, b_alpha=1.0)


@pytest.fixture
def tiny_config(tmp_path, tiny_spec, tiny_hyper):
    """Seconds-long simulated run with both back-ends."""
    return ExperimentConfig(
        simulation=tiny_spec,
        hyper=tiny_hyper,
        gibbs=ChainConfig(iterations=60, burn_in=10, thin=5),
        cavi=CaviConfig(max_sweeps=20),
        out=tmp_path / "run",
    )
