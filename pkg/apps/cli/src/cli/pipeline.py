"""End-to-end experiment pipeline: data -> split -> infer -> relabel -> evaluate.

Every stage persists its artifacts under the run directory as it goes, so
a failing stage leaves the earlier ones on disk. The manifest records the
config, its hash, the derived seeds and package versions, and which stage
failed if any.

Layout of a run directory:

    manifest.json
    data/        y.tsv, y_mask.tsv, simulation.json, train*.tsv, heldout.tsv
    truth/       l.tsv f.tsv z.tsv tau.tsv alpha.tsv        (simulated runs)
    baseline_metrics.tsv                                    (simulated runs)
    gibbs/       chain_<c>/, aligned/chain_<c>/, chains.tsv, relabel_risk.tsv,
                 snapshots.tsv, metrics.tsv, residuals.tsv
    cavi/        best_state/, trial_<t>_elbo.tsv, trials.tsv,
                 snapshots.tsv, metrics.tsv, residuals.tsv
"""

import logging
import platform
import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from evaluation.evaluate import (
    PosteriorSummary,
    baseline_metrics,
    make_fill_in_split,
    residual_table,
    select_best_chain,
    summarize,
)
from evaluation.simulate import simulate
from inference.cavi import MultiTrialResult, run_multi_trial, save_variational_state
from inference.chain import SampleChain, save_chain
from inference.gibbs import run_chains
from inference.relabel import relabel_chains
from pydantic import BaseModel, Field
from shared.errors import StageError
from shared.model import Dataset, ModelState
from shared.schemas import Hyperparameters
from shared.seeds import stream_seed
from shared.storage import (
    load_dataset,
    write_dataset,
    write_matrix,
    write_metrics,
    write_model,
    write_state,
    write_table,
)

from cli.config import ExperimentConfig
from cli.snapshots import Scorer, snapshot_metrics, stack_snapshots

logger = logging.getLogger("sparsefactor.pipeline")

STREAMS = ("simulate", "split", "gibbs", "cavi")
VERSIONED_PACKAGES = (
    "numpy", "scipy", "pandas", "joblib", "pydantic",
    "shared", "inference", "evaluation", "cli",
)


class RunManifest(BaseModel):
    """Provenance of one run directory."""

    config: dict[str, Any]
    config_hash: str
    seeds: dict[str, int]
    versions: dict[str, str]
    status: str = "running"
    completed_stages: list[str] = Field(default_factory=list)
    failed_stage: str | None = None
    error: str | None = None


@dataclass
class ExperimentResult:
    """Run directory plus the headline metrics of each method."""

    out: Path
    manifest: RunManifest
    metrics: dict[str, dict[str, float | str]] = field(default_factory=dict)


def package_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@contextmanager
def _stage(name: str, manifest: RunManifest) -> Iterator[None]:
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {type(e).__name__}: {e}")
        raise StageError(name, f"{type(e).__name__}: {e}") from e
    manifest.completed_stages.append(name)


# =============================================================================
# Stages
# =============================================================================


def _load_data(
    config: ExperimentConfig, seed: int, out: Path
) -> tuple[Dataset, ModelState | None]:
    if config.simulation is not None:
        spec = config.simulation.model_copy(update={"seed": seed})
        data, truth = simulate(spec)
        write_model(out / "data" / "simulation.json", spec)
        write_state(out / "truth", truth)
    else:
        data, truth = load_dataset(config.data, config.mask), None
    write_dataset(out / "data", data)
    return data, truth


def _headline(
    summary: PosteriorSummary,
    scorer: Scorer,
    data: Dataset,
    selected: int | str,
    seconds: float,
    out: Path,
) -> dict[str, float | str]:
    """Shared metric keys for every method, plus residuals on disk."""
    metrics: dict[str, float | str] = {"selected": str(selected)}
    metrics.update(scorer.score(summary))
    metrics["elapsed_seconds"] = seconds
    write_metrics(out / "metrics.tsv", metrics)
    if scorer.heldout is not None:
        table = residual_table(summary, scorer.full_data, scorer.heldout)
    else:
        table = residual_table(summary, data)
    write_table(out / "residuals.tsv", table)
    return metrics


def _chain_table(chains: list[SampleChain], scorer: Scorer) -> pd.DataFrame:
    rows = []
    for c, chain in enumerate(chains):
        row: dict[str, Any] = {
            "chain": c,
            "seed": str(chain.seed),
            "kept": len(chain),
            "final_log_joint": chain.log_joint[-1] if len(chain) else np.nan,
            "elapsed": chain.elapsed[-1] if chain.elapsed else np.nan,
        }
        if len(chain):
            row.update(scorer.score(summarize(chain)))
        rows.append(row)
    return pd.DataFrame(rows)


def _run_gibbs(
    config: ExperimentConfig,
    train: Dataset,
    hyper: Hyperparameters,
    seed: int,
    scorer: Scorer,
    out: Path,
    manifest: RunManifest,
) -> dict[str, float | str]:
    with _stage("gibbs", manifest):
        start = time.perf_counter()
        chain_config = config.gibbs.model_copy(update={"seed": seed})
        chains = run_chains(train, hyper, chain_config, config.chains, n_jobs=config.threads)
        seconds = time.perf_counter() - start
        dims = (train.g, train.n, hyper.k)
        for c, chain in enumerate(chains):
            save_chain(out / f"chain_{c}", chain, dims, config.trace_format)

    aligned = chains
    if config.relabel:
        with _stage("relabel", manifest):
            result = relabel_chains(chains, normalize=config.normalize, n_jobs=config.threads)
            aligned = result.chains
            for c, chain in enumerate(aligned):
                save_chain(out / "aligned" / f"chain_{c}", chain, dims, config.trace_format)
            write_table(out / "relabel_risk.tsv", pd.DataFrame({"risk": result.risk_trace}))

    with _stage("evaluate-gibbs", manifest):
        write_table(out / "chains.tsv", _chain_table(aligned, scorer))
        if config.snapshot_every is not None:
            frames = [snapshot_metrics(c, config.snapshot_every, scorer) for c in aligned]
            write_table(out / "snapshots.tsv", stack_snapshots(frames, "chain"))
        if scorer.truth is not None:
            selected: int | str = select_best_chain(aligned, scorer.truth)
            summary = summarize(aligned[selected])
        else:
            selected, summary = "pooled", summarize(aligned)
        return _headline(summary, scorer, train, selected, seconds, out)


def _trial_table(multi: MultiTrialResult, scorer: Scorer) -> pd.DataFrame:
    rows = []
    for t, trial in enumerate(multi.trials):
        rows.append(
            {
                "trial": t,
                "seed": str(trial.seed),
                "elbo": trial.elbo,
                "converged": trial.converged,
                "sweeps": trial.sweeps,
                "elapsed": trial.elapsed[-1] if trial.elapsed else np.nan,
                **scorer.score(summarize(trial.state)),
            }
        )
    return pd.DataFrame(rows)


def _run_cavi(
    config: ExperimentConfig,
    train: Dataset,
    hyper: Hyperparameters,
    seed: int,
    scorer: Scorer,
    out: Path,
    manifest: RunManifest,
) -> dict[str, float | str]:
    with _stage("cavi", manifest):
        start = time.perf_counter()
        monitor = scorer.score_state if config.snapshot_every is not None else None
        multi = run_multi_trial(
            train,
            hyper,
            config.cavi.model_copy(update={"seed": seed}),
            config.trials,
            n_jobs=config.threads,
            early_stop_sweeps=config.early_stop_sweeps,
            monitor=monitor,
            monitor_every=config.snapshot_every or 1,
        )
        seconds = time.perf_counter() - start
        save_variational_state(out / "best_state", multi.best.state)
        for t, trial in enumerate(multi.trials):
            trace = pd.DataFrame({"elbo": trial.elbo_trace, "elapsed": trial.elapsed})
            write_table(out / f"trial_{t}_elbo.tsv", trace)

    with _stage("evaluate-cavi", manifest):
        write_table(out / "trials.tsv", _trial_table(multi, scorer))
        if config.snapshot_every is not None:
            frames = [snapshot_metrics(trial) for trial in multi.trials]
            write_table(out / "snapshots.tsv", stack_snapshots(frames, "trial"))
        summary = summarize(multi.best)
        return _headline(summary, scorer, train, multi.best_index, seconds, out)


# =============================================================================
# Entry point
# =============================================================================


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the configured pipeline and persist every artifact under config.out.

    Raises:
        StageError: naming the stage that failed; artifacts written before
            the failure stay on disk and the manifest records the failure.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = {stream: stream_seed(config.seed, stream) for stream in STREAMS}
    manifest = RunManifest(
        config=config.model_dump(mode="json"),
        config_hash=config.config_hash(),
        seeds=seeds,
        versions=package_versions(),
    )
    write_model(out / "manifest.json", manifest)
    logger.info(f"Run {manifest.config_hash[:12]} writing to {out}")

    result = ExperimentResult(out=out, manifest=manifest)
    try:
        hyper = config.prior()
        with _stage("data", manifest):
            data, truth = _load_data(config, seeds["simulate"], out)
            if truth is not None:
                write_metrics(out / "baseline_metrics.tsv", baseline_metrics(truth, hyper))

        train, heldout = data, None
        if config.fill_in is not None:
            with _stage("split", manifest):
                train, heldout = make_fill_in_split(data, config.fill_in, seeds["split"])
                write_dataset(out / "data", train, name="train")
                write_matrix(out / "data" / "heldout.tsv", heldout)

        scorer = Scorer(
            truth=truth,
            full_data=data if heldout is not None else None,
            heldout=heldout,
        )
        if config.method.runs_gibbs:
            result.metrics["gibbs"] = _run_gibbs(
                config, train, hyper, seeds["gibbs"], scorer, out / "gibbs", manifest
            )
        if config.method.runs_cavi:
            result.metrics["cavi"] = _run_cavi(
                config, train, hyper, seeds["cavi"], scorer, out / "cavi", manifest
            )
    except StageError as e:
        manifest.status = "failed"
        manifest.failed_stage = e.stage
        manifest.error = str(e)
        write_model(out / "manifest.json", manifest)
        raise

    manifest.status = "completed"
    write_model(out / "manifest.json", manifest)
    logger.info(f"Run finished: {', '.join(manifest.completed_stages)}")
    return result
