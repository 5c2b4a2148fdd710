"""Accuracy-over-time snapshots.

Gibbs snapshots are running posterior means over the kept samples of a
chain, stamped with the chain's own wall-clock time of the newest sample.
CAVI snapshots are recorded live by run_cavi through a monitor callback
and only need reshaping here.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from evaluation.evaluate import (
    PosteriorSummary,
    fill_in_rrmse,
    summarize,
    truth_metrics,
)
from inference.cavi import CaviResult, VariationalState
from inference.chain import SampleChain
from shared.model import Dataset, ModelState
from shared.schemas import SummarySource

logger = logging.getLogger("sparsefactor.snapshots")


@dataclass(frozen=True, eq=False)
class Scorer:
    """Metric values of a posterior summary against what is known.

    Truth metrics when the ground truth is available, held-out RRMSE when
    a fill-in split was made; an empty dict when neither is.
    """

    truth: ModelState | None = None
    full_data: Dataset | None = None
    heldout: np.ndarray | None = None

    def score(self, summary: PosteriorSummary) -> dict[str, float]:
        metrics: dict[str, float] = {}
        if self.truth is not None:
            metrics.update(truth_metrics(summary, self.truth))
        if self.heldout is not None and self.full_data is not None:
            metrics["fill_in_rrmse"] = fill_in_rrmse(summary, self.full_data, self.heldout)
        return metrics

    def score_state(self, vstate: VariationalState) -> dict[str, float]:
        return self.score(summarize(vstate))


class RunningMean:
    """Running posterior means of L, Z, F and LF over chain samples."""

    def __init__(self):
        self.count = 0
        self._sums: dict[str, np.ndarray] = {}

    def add(self, state: ModelState) -> None:
        blocks = {"l": state.l, "z": state.z, "f": state.f, "lf": state.l @ state.f}
        for name, value in blocks.items():
            if name in self._sums:
                self._sums[name] += value
            else:
                self._sums[name] = value.astype(float)
        self.count += 1

    def summary(self) -> PosteriorSummary:
        if not self.count:
            raise ValueError("no samples added yet")
        means = {name: total / self.count for name, total in self._sums.items()}
        return PosteriorSummary(
            mean_l=means["l"],
            mean_z=means["z"],
            mean_f=means["f"],
            mean_lf=means["lf"],
            source=SummarySource.GIBBS,
        )


def _chain_rows(chain: SampleChain, every: int, scorer: Scorer) -> list[dict[str, float]]:
    running = RunningMean()
    last = len(chain) - 1
    rows = []
    for t, state in enumerate(chain.samples):
        running.add(state)
        if (t + 1) % every and t != last:
            continue
        try:
            values = scorer.score(running.summary())
        except Exception as e:  # snapshots never abort a run
            logger.warning(f"sample {t + 1}: snapshot failed ({type(e).__name__}: {e})")
            continue
        elapsed = chain.elapsed[t] if chain.elapsed else float("nan")
        rows.append({"sample": float(t + 1), "elapsed": elapsed, **values})
    return rows


def snapshot_metrics(
    fitted: SampleChain | CaviResult, every: int = 1, scorer: Scorer | None = None
) -> pd.DataFrame:
    """Timestamped metric rows of one chain or one CAVI trial.

    A chain gets a row every `every` kept samples plus a final row. A CAVI
    trial returns the rows its monitor recorded (`every` and `scorer` were
    fixed when the trial ran).
    """
    if every < 1:
        raise ValueError("every must be positive")
    if isinstance(fitted, CaviResult):
        return pd.DataFrame(fitted.snapshots)
    return pd.DataFrame(_chain_rows(fitted, every, scorer or Scorer()))


def stack_snapshots(frames: list[pd.DataFrame], key: str) -> pd.DataFrame:
    """One table with a leading `key` column (chain or trial index)."""
    tagged = [frame.assign(**{key: index}) for index, frame in enumerate(frames) if len(frame)]
    if not tagged:
        return pd.DataFrame(columns=[key])
    table = pd.concat(tagged, ignore_index=True)
    return table[[key] + [c for c in table.columns if c != key]]
