"""Delimited-text persistence for matrices, datasets, metrics and manifests.

Everything numeric is written tab-delimited with `%.17g`, which round-trips
doubles exactly: reading a file back and writing it again is bit-identical.
Input files may be comma- or tab-delimited, with an optional header row and
optional row labels; the token "NA" marks a missing (masked) entry.
"""

import logging
from pathlib import Path
from typing import TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel

from shared.errors import DataValidationError, DimensionError
from shared.model import Dataset, ModelState

logger = logging.getLogger("sparsefactor.storage")

NA_TOKEN = "NA"
FLOAT_FORMAT = "%.17g"

ModelT = TypeVar("ModelT", bound=BaseModel)


# =============================================================================
# Reading
# =============================================================================


def _sniff_separator(path: Path) -> str:
    with open(path) as f:
        first = f.readline()
    return "\t" if "\t" in first else ","


def _is_numeric(token: str) -> bool:
    if token == NA_TOKEN:
        return True
    try:
        float(token)
    except ValueError:
        return False
    return True


def read_matrix(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a delimited numeric matrix.

    Returns:
        (values, observed) where observed is False exactly at "NA" tokens.

    Raises:
        FileNotFoundError: If the file doesn't exist.
        DataValidationError: If the file is empty or has non-numeric cells.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Matrix file not found: {path}")

    frame = pd.read_csv(
        path,
        sep=_sniff_separator(path),
        header=None,
        dtype=str,
        keep_default_na=False,
        na_filter=False,
    )
    if frame.empty:
        raise DataValidationError(f"Empty matrix file: {path}")

    # Header row: any non-numeric token in the first line
    if not all(_is_numeric(t.strip()) for t in frame.iloc[0]):
        frame = frame.iloc[1:]
    # Row labels: a first column that is entirely non-numeric
    if frame.shape[1] > 1 and not any(_is_numeric(t.strip()) for t in frame.iloc[:, 0]):
        frame = frame.iloc[:, 1:]
    if frame.empty:
        raise DataValidationError(f"No numeric rows in {path}")

    tokens = frame.apply(lambda col: col.str.strip())
    observed = (tokens != NA_TOKEN).to_numpy()
    try:
        values = tokens.replace(NA_TOKEN, "nan").astype(float).to_numpy()
    except ValueError as e:
        raise DataValidationError(f"Non-numeric entry in {path}: {e}") from e
    return values, observed


def load_dataset(path: str | Path, mask_path: str | Path | None = None) -> Dataset:
    """Load Y and its observation mask.

    The mask comes from a same-shaped 0/1 file when given; "NA" tokens in
    the data file are always treated as unobserved.
    """
    values, observed = read_matrix(path)
    if mask_path is not None:
        mask_values, _ = read_matrix(mask_path)
        if mask_values.shape != values.shape:
            raise DimensionError(
                f"mask file shape {mask_values.shape} != data shape {values.shape}"
            )
        if not np.isin(mask_values, (0.0, 1.0)).all():
            raise DataValidationError("mask file must contain only 0 and 1")
        observed = observed & (mask_values == 1.0)
    data = Dataset(y=values, mask=observed)
    logger.info(
        f"Loaded {data.g}x{data.n} dataset from {path} "
        f"({data.n_observed} observed entries)"
    )
    return data


def read_vector(path: str | Path) -> np.ndarray:
    values, _ = read_matrix(path)
    return values.reshape(-1)


# =============================================================================
# Writing
# =============================================================================


def write_matrix(path: str | Path, array: np.ndarray) -> Path:
    """Write a 1-D or 2-D array tab-delimited, one row per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    if array.ndim == 1:
        array = array[None, :]
    pd.DataFrame(array).to_csv(
        path,
        sep="\t",
        header=False,
        index=False,
        float_format=FLOAT_FORMAT,
        na_rep=NA_TOKEN,
    )
    return path


def write_dataset(directory: str | Path, data: Dataset, name: str = "y") -> None:
    """Write `<name>.tsv` (masked entries as NA) and `<name>_mask.tsv`."""
    directory = Path(directory)
    write_matrix(directory / f"{name}.tsv", np.where(data.mask, data.y, np.nan))
    write_matrix(directory / f"{name}_mask.tsv", data.mask.astype(np.int8))


STATE_BLOCKS: tuple[str, ...] = ("l", "f", "z", "tau", "alpha")


def write_state(directory: str | Path, state: ModelState) -> Path:
    """One file per block: l.tsv, f.tsv, z.tsv, tau.tsv, alpha.tsv."""
    directory = Path(directory)
    for block in STATE_BLOCKS:
        write_matrix(directory / f"{block}.tsv", getattr(state, block))
    return directory


def read_state(directory: str | Path) -> ModelState:
    directory = Path(directory)
    blocks = {block: read_matrix(directory / f"{block}.tsv")[0] for block in STATE_BLOCKS}
    return ModelState(
        l=blocks["l"],
        f=blocks["f"],
        z=blocks["z"].astype(np.int8),
        tau=blocks["tau"].reshape(-1),
        alpha=blocks["alpha"].reshape(-1),
    )


def write_metrics(path: str | Path, metrics: dict[str, float | int | str]) -> Path:
    """Flat key<TAB>value file, one metric per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for key, value in metrics.items():
            if isinstance(value, float):
                value = FLOAT_FORMAT % value
            f.write(f"{key}\t{value}\n")
    return path


def write_table(path: str | Path, frame: pd.DataFrame) -> Path:
    """Tab-delimited table with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep="\t", index=False, float_format=FLOAT_FORMAT, na_rep=NA_TOKEN)
    return path


def read_metrics(path: str | Path) -> dict[str, float | str]:
    metrics: dict[str, float | str] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            key, _, value = line.rstrip("\n").partition("\t")
            try:
                metrics[key] = float(value)
            except ValueError:
                metrics[key] = value
    return metrics


# =============================================================================
# JSON manifests
# =============================================================================


def write_model(path: str | Path, model: BaseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2))
    return path


def read_model(path: str | Path, model_cls: type[ModelT]) -> ModelT:
    """Load and validate a JSON manifest.

    Raises:
        FileNotFoundError: If the file doesn't exist.
        pydantic.ValidationError: If it fails schema validation.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    return model_cls.model_validate_json(path.read_text())
