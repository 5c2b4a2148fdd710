"""Shared types, schemas and persistence for the sparse factor toolkit."""

from shared.errors import (
    ConfigurationError,
    DataValidationError,
    DimensionError,
    NumericalError,
    ParameterError,
    RelabelError,
    SamplerError,
    SimulationError,
    SparseFactorError,
    SpikeConstraintError,
    StageError,
    VariationalError,
)
from shared.model import (
    Dataset,
    ModelState,
    draw_from_prior,
    log_joint,
    log_likelihood,
    log_prior,
    log_prior_terms,
)
from shared.schemas import (
    DENSE_PI,
    REFERENCE_PI,
    REFERENCE_SNR_LEVELS,
    SPARSE_PI,
    VAGUE_GAMMA,
    CaviConfig,
    CaviInit,
    ChainConfig,
    ChainInit,
    Hyperparameters,
    Method,
    SimulationSpec,
    SummarySource,
    TraceFormat,
)

__all__ = [
    "DENSE_PI",
    "REFERENCE_PI",
    "REFERENCE_SNR_LEVELS",
    "SPARSE_PI",
    "VAGUE_GAMMA",
    "CaviConfig",
    "CaviInit",
    "ChainConfig",
    "ChainInit",
    "ConfigurationError",
    "DataValidationError",
    "Dataset",
    "DimensionError",
    "Hyperparameters",
    "Method",
    "ModelState",
    "NumericalError",
    "ParameterError",
    "RelabelError",
    "SamplerError",
    "SimulationError",
    "SimulationSpec",
    "SparseFactorError",
    "SpikeConstraintError",
    "StageError",
    "SummarySource",
    "TraceFormat",
    "VariationalError",
    "draw_from_prior",
    "log_joint",
    "log_likelihood",
    "log_prior",
    "log_prior_terms",
]
