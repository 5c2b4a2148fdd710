"""Sample chains and their on-disk trace format.

A chain directory holds one trace file per parameter block (one kept
sample per row, flattened row-major) plus `manifest.json` with the run
configuration, dimensions, per-sample log joint and wall-clock times.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field
from shared.errors import DimensionError
from shared.model import ModelState
from shared.schemas import ChainConfig, TraceFormat
from shared.storage import read_matrix, read_model, write_matrix, write_model

logger = logging.getLogger("sparsefactor.chain")

BLOCKS: tuple[str, ...] = ("l", "f", "z", "tau", "alpha")


@dataclass
class SampleChain:
    """Ordered, thinned store of kept Gibbs states.

    log_joint[t] and elapsed[t] belong to samples[t]; elapsed is wall-clock
    seconds since the chain started.
    """

    samples: list[ModelState]
    config: ChainConfig
    log_joint: list[float] = field(default_factory=list)
    elapsed: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.log_joint) != len(self.samples):
            raise DimensionError(
                f"{len(self.log_joint)} log_joint values for {len(self.samples)} samples"
            )
        if self.elapsed and len(self.elapsed) != len(self.samples):
            raise DimensionError(
                f"{len(self.elapsed)} timestamps for {len(self.samples)} samples"
            )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def shape(self) -> tuple[int, int, int] | None:
        """(G, N, K) of the stored states, or None for an empty chain."""
        if not self.samples:
            return None
        first = self.samples[0]
        return first.g, first.n, first.k

    def stack(self, block: str) -> np.ndarray:
        """Stack one parameter block over samples: shape (T, ...)."""
        if block not in BLOCKS:
            raise KeyError(f"unknown block '{block}', expected one of {BLOCKS}")
        return np.stack([getattr(s, block) for s in self.samples])


class ChainManifest(BaseModel):
    """Sidecar describing a persisted chain."""

    config: ChainConfig
    g: int
    n: int
    k: int
    kept: int
    log_joint: list[float] = Field(default_factory=list)
    elapsed: list[float] = Field(default_factory=list)
    format: TraceFormat = TraceFormat.TSV


def save_chain(
    directory: str | Path,
    chain: SampleChain,
    dims: tuple[int, int, int],
    fmt: TraceFormat = TraceFormat.TSV,
) -> Path:
    """Persist a chain. dims = (G, N, K), needed for empty chains."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    g, n, k = dims
    shapes = {"l": (g, k), "f": (k, n), "z": (g, k), "tau": (g,), "alpha": (k,)}

    traces = {}
    for block, shape in shapes.items():
        width = int(np.prod(shape))
        if len(chain):
            traces[block] = chain.stack(block).reshape(len(chain), width)
        else:
            traces[block] = np.empty((0, width))

    if fmt == TraceFormat.NPZ:
        np.savez_compressed(directory / "traces.npz", **traces)
    elif len(chain):
        for block, trace in traces.items():
            write_matrix(directory / f"{block}.tsv", trace)

    write_model(
        directory / "manifest.json",
        ChainManifest(
            config=chain.config,
            g=g,
            n=n,
            k=k,
            kept=len(chain),
            log_joint=list(chain.log_joint),
            elapsed=list(chain.elapsed),
            format=fmt,
        ),
    )
    logger.info(f"Saved chain with {len(chain)} samples to {directory}")
    return directory


def load_chain(directory: str | Path) -> SampleChain:
    """Read a chain written by save_chain."""
    directory = Path(directory)
    manifest = read_model(directory / "manifest.json", ChainManifest)
    g, n, k, t = manifest.g, manifest.n, manifest.k, manifest.kept
    shapes = {"l": (g, k), "f": (k, n), "z": (g, k), "tau": (g,), "alpha": (k,)}

    samples: list[ModelState] = []
    if t:
        if manifest.format == TraceFormat.NPZ:
            with np.load(directory / "traces.npz") as archive:
                traces = {block: archive[block] for block in BLOCKS}
        else:
            traces = {block: read_matrix(directory / f"{block}.tsv")[0] for block in BLOCKS}
        for block, trace in traces.items():
            if trace.shape[0] != t:
                raise DimensionError(
                    f"{block} trace has {trace.shape[0]} rows, manifest says {t}"
                )
        for s in range(t):
            parts = {b: traces[b][s].reshape(shapes[b]) for b in BLOCKS}
            parts["z"] = parts["z"].astype(np.int8)
            samples.append(ModelState(**parts))

    return SampleChain(
        samples=samples,
        config=manifest.config,
        log_joint=list(manifest.log_joint),
        elapsed=list(manifest.elapsed),
    )
