"""Pydantic schemas for the sparse factor model toolkit.

Validated configuration objects: prior hyperparameters, the simulation
design, and the run configurations of both inference back-ends. Array
valued objects (datasets, parameter states) live in shared.model as
dataclasses; everything here is plain JSON-serialisable data.
"""

from enum import Enum
from typing import Annotated

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# =============================================================================
# Constants
# =============================================================================

# Gamma shape/rate used for every vague prior
VAGUE_GAMMA: float = 1e-3

# Sparsity hyperparameters for sparse and dense factors when fitting
SPARSE_PI: float = 0.1
DENSE_PI: float = 0.9

# Connectivity design of the reference simulation (5 sparse + 1 dense factor)
REFERENCE_PI: tuple[float, ...] = (0.075, 0.15, 0.25, 0.375, 0.5, 1.0)
REFERENCE_SNR_LEVELS: tuple[float, ...] = (1.0, 5.0, 25.0)

SEED_MAX: int = 2**64 - 1

Seed = Annotated[int, Field(ge=0, le=SEED_MAX)]


# =============================================================================
# Enums
# =============================================================================


class ChainInit(str, Enum):
    """How a Gibbs chain picks its starting state."""

    PRIOR_DRAW = "prior-draw"
    SUPPLIED = "supplied-state"


class CaviInit(str, Enum):
    """How a CAVI run picks its starting variational state."""

    RANDOM = "random"
    SUPPLIED = "supplied"


class Method(str, Enum):
    """Inference back-end(s) used by an experiment."""

    GIBBS = "gibbs"
    CAVI = "cavi"
    BOTH = "both"

    @property
    def runs_gibbs(self) -> bool:
        return self in (Method.GIBBS, Method.BOTH)

    @property
    def runs_cavi(self) -> bool:
        return self in (Method.CAVI, Method.BOTH)


class SummarySource(str, Enum):
    """Which back-end produced a posterior summary."""

    GIBBS = "gibbs"
    CAVI = "cavi"


class TraceFormat(str, Enum):
    """On-disk format for parameter traces."""

    TSV = "tsv"
    NPZ = "npz"


# =============================================================================
# Hyperparameters
# =============================================================================


class Hyperparameters(BaseModel):
    """Prior hyperparameters: per-factor sparsity and gamma shape/rate pairs.

    pi_k = 1 is allowed and marks a dense factor.
    """

    model_config = ConfigDict(frozen=True)

    pi: list[float] = Field(min_length=1)
    a_tau: float = Field(default=VAGUE_GAMMA, gt=0)
    b_tau: float = Field(default=VAGUE_GAMMA, gt=0)
    a_alpha: float = Field(default=VAGUE_GAMMA, gt=0)
    b_alpha: float = Field(default=VAGUE_GAMMA, gt=0)

    @field_validator("pi")
    @classmethod
    def _check_pi(cls, value: list[float]) -> list[float]:
        for k, p in enumerate(value):
            if not 0.0 < p <= 1.0:
                raise ValueError(f"pi[{k}] = {p} must lie in (0, 1]")
        return value

    @property
    def k(self) -> int:
        """Number of factors."""
        return len(self.pi)

    def pi_array(self) -> np.ndarray:
        return np.asarray(self.pi, dtype=float)

    @classmethod
    def from_split(
        cls,
        n_sparse: int,
        n_dense: int,
        sparse_pi: float = SPARSE_PI,
        dense_pi: float = DENSE_PI,
        gamma: float = VAGUE_GAMMA,
    ) -> "Hyperparameters":
        """Sparse factors first, then dense ones, all with vague gamma priors."""
        if n_sparse < 0 or n_dense < 0 or n_sparse + n_dense == 0:
            raise ValueError("need at least one factor and no negative counts")
        return cls(
            pi=[sparse_pi] * n_sparse + [dense_pi] * n_dense,
            a_tau=gamma,
            b_tau=gamma,
            a_alpha=gamma,
            b_alpha=gamma,
        )


# =============================================================================
# Simulation design
# =============================================================================


class SimulationSpec(BaseModel):
    """Design of a synthetic dataset with a known ground truth."""

    model_config = ConfigDict(frozen=True)

    g: int = Field(gt=0)
    n: int = Field(ge=2)  # sample variance needs two columns
    k: int = Field(gt=0)
    pi: list[float]
    snr: float = Field(gt=0)
    seed: Seed = 0

    @model_validator(mode="after")
    def _check_pi(self) -> "SimulationSpec":
        if len(self.pi) != self.k:
            raise ValueError(f"pi has {len(self.pi)} entries, expected k={self.k}")
        for k, p in enumerate(self.pi):
            if not 0.0 < p <= 1.0:
                raise ValueError(f"pi[{k}] = {p} must lie in (0, 1]")
        return self

    @classmethod
    def reference_preset(cls, snr: float = 5.0, seed: int = 0) -> "SimulationSpec":
        """G=800, N=100, K=6 with five sparse factors and one dense factor."""
        return cls(g=800, n=100, k=6, pi=list(REFERENCE_PI), snr=snr, seed=seed)


# =============================================================================
# Inference configurations
# =============================================================================


class ChainConfig(BaseModel):
    """Run configuration of a single collapsed Gibbs chain.

    Burn-in is applied before thinning; the last state of every
    thin-length window after burn-in is kept.
    """

    model_config = ConfigDict(frozen=True)

    iterations: int = Field(gt=0)
    burn_in: int = Field(default=0, ge=0)
    thin: int = Field(default=1, ge=1)
    seed: Seed = 0
    init: ChainInit = ChainInit.PRIOR_DRAW

    @model_validator(mode="after")
    def _check_burn_in(self) -> "ChainConfig":
        if self.burn_in > self.iterations:
            raise ValueError(
                f"burn_in ({self.burn_in}) exceeds iterations ({self.iterations})"
            )
        return self

    @property
    def kept_count(self) -> int:
        """Number of samples a completed chain stores."""
        return (self.iterations - self.burn_in) // self.thin


class CaviConfig(BaseModel):
    """Run configuration of a single CAVI trial."""

    model_config = ConfigDict(frozen=True)

    max_sweeps: int = Field(default=10_000, ge=0)
    abs_tol: float = Field(default=1e-10, ge=0)
    rel_tol: float = Field(default=1e-14, ge=0)
    elbo_every: int = Field(default=1, ge=1)
    seed: Seed = 0
    init: CaviInit = CaviInit.RANDOM

    @model_validator(mode="after")
    def _check_tolerances(self) -> "CaviConfig":
        if self.abs_tol <= 0 and self.rel_tol <= 0:
            raise ValueError("at least one of abs_tol, rel_tol must be positive")
        return self
