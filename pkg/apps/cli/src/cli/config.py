"""Experiment configuration for the `run` pipeline.

An ExperimentConfig is a JSON document validated by pydantic; command-line
flags override individual fields. The master seed drives every random
stream of the run (simulation, fill-in split, chains, trials), so the
seeds inside `simulation`, `gibbs` and `cavi` are replaced at run time.
"""

import hashlib
import json
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from shared.schemas import (
    DENSE_PI,
    SPARSE_PI,
    CaviConfig,
    ChainConfig,
    Hyperparameters,
    Method,
    Seed,
    SimulationSpec,
    TraceFormat,
)

from cli.settings import LOG_LEVELS

# Fields that only affect where and how fast a run happens
NON_SEMANTIC_FIELDS = frozenset({"out", "threads", "log_level"})


class ExperimentConfig(BaseModel):
    """Everything needed to reproduce one run.

    Exactly one data source: `data` (a delimited matrix, optional `mask`)
    or `simulation`. When `hyper` is omitted for a simulated run, factors
    simulated with pi = 1 get the dense prior and the rest the sparse one.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    data: Path | None = None
    mask: Path | None = None
    simulation: SimulationSpec | None = None
    hyper: Hyperparameters | None = None

    method: Method = Method.BOTH
    gibbs: ChainConfig = ChainConfig(iterations=1000, burn_in=100)
    cavi: CaviConfig = CaviConfig()
    chains: int = Field(default=1, gt=0)
    trials: int = Field(default=1, gt=0)
    early_stop_sweeps: int | None = Field(default=None, ge=0)
    fill_in: float | None = Field(default=None, gt=0, lt=1)
    relabel: bool = True
    normalize: bool = False
    snapshot_every: int | None = Field(default=None, gt=0)
    trace_format: TraceFormat = TraceFormat.TSV
    seed: Seed = 0

    out: Path = Path("runs/latest")
    threads: int = Field(default=1, gt=0)
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def _check_log_level(cls, value: str) -> str:
        value = value.upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {', '.join(LOG_LEVELS)}")
        return value

    @model_validator(mode="after")
    def _check_sources(self) -> "ExperimentConfig":
        if (self.data is None) == (self.simulation is None):
            raise ValueError("exactly one of 'data' and 'simulation' must be given")
        if self.mask is not None and self.data is None:
            raise ValueError("'mask' requires 'data'")
        for path in (self.data, self.mask):
            if path is not None and not path.exists():
                raise ValueError(f"file not found: {path}")
        if self.hyper is None and self.simulation is None:
            raise ValueError("'hyper' is required when data comes from a file")
        if self.hyper is not None and self.simulation is not None:
            if self.hyper.k != self.simulation.k:
                raise ValueError(
                    f"hyper has K={self.hyper.k} but the simulation has K={self.simulation.k}"
                )
        return self

    def prior(self) -> Hyperparameters:
        """Hyperparameters used for fitting."""
        if self.hyper is not None:
            return self.hyper
        pi = [DENSE_PI if p >= 1.0 else SPARSE_PI for p in self.simulation.pi]
        return Hyperparameters(pi=pi)

    def config_hash(self) -> str:
        """SHA-256 of every field that can change numeric results."""
        payload = self.model_dump(mode="json", exclude=set(NON_SEMANTIC_FIELDS))
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Validated copy with the non-None overrides applied."""
        values = self.model_dump()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.model_validate(values)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        return cls.model_validate_json(path.read_text())

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ExperimentConfig":
        """Named protocol presets; overrides are applied on top."""
        if name not in PRESETS:
            raise ValueError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
        values = PRESETS[name]()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.model_validate(values)


def _simulation_preset() -> dict[str, Any]:
    # 5 chains of 20,000 kept samples; 10 trials to tight tolerances
    return {
        "simulation": SimulationSpec.reference_preset(snr=5.0),
        "hyper": Hyperparameters.from_split(n_sparse=5, n_dense=1),
        "gibbs": ChainConfig(iterations=200_100, burn_in=100, thin=10),
        "cavi": CaviConfig(abs_tol=1e-10, rel_tol=1e-14),
        "chains": 5,
        "trials": 10,
    }


def _fill_in_preset() -> dict[str, Any]:
    # Large expression matrices: 26 sparse factors, 10% held out
    return {
        "hyper": Hyperparameters.from_split(n_sparse=26, n_dense=0),
        "gibbs": ChainConfig(iterations=18_000, burn_in=2_000, thin=10),
        "cavi": CaviConfig(abs_tol=1e-3, rel_tol=0.0),
        "chains": 5,
        "trials": 10,
        "fill_in": 0.1,
    }


PRESETS = {
    "simulation": _simulation_preset,
    "fill-in": _fill_in_preset,
}
