"""Posterior summaries, accuracy metrics and the fill-in protocol."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
from inference.cavi import CaviResult, VariationalState
from inference.chain import SampleChain
from inference.relabel import Action, Relabelling, assign_sample
from shared.errors import DataValidationError, DimensionError
from shared.model import Dataset, ModelState
from shared.schemas import Hyperparameters, SummarySource

logger = logging.getLogger("sparsefactor.evaluate")

Fitted = SampleChain | Sequence[SampleChain] | VariationalState | CaviResult


# =============================================================================
# Posterior summaries
# =============================================================================


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Posterior means of L, Z, F and LF from one back-end."""

    mean_l: np.ndarray
    mean_z: np.ndarray
    mean_f: np.ndarray
    mean_lf: np.ndarray
    source: SummarySource

    def __post_init__(self):
        g, k = self.mean_l.shape
        if self.mean_z.shape != (g, k):
            raise DimensionError(f"mean_z shape {self.mean_z.shape} != {(g, k)}")
        if self.mean_f.shape[0] != k:
            raise DimensionError(f"mean_f has {self.mean_f.shape[0]} rows, expected {k}")
        if self.mean_lf.shape != (g, self.mean_f.shape[1]):
            raise DimensionError(f"mean_lf shape {self.mean_lf.shape} is not G x N")
        if ((self.mean_z < 0) | (self.mean_z > 1)).any():
            raise DataValidationError("mean_z entries must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.mean_l.shape[1]

    def relabel(self, r: Relabelling) -> "PosteriorSummary":
        """Apply a factor relabelling to every factor-indexed block."""
        signs = r.nu[r.sigma]
        return PosteriorSummary(
            mean_l=self.mean_l[:, r.sigma] * signs[None, :],
            mean_z=self.mean_z[:, r.sigma],
            mean_f=self.mean_f[r.sigma] * signs[:, None],
            mean_lf=self.mean_lf,
            source=self.source,
        )


def _summarize_samples(samples: list[ModelState]) -> PosteriorSummary:
    if not samples:
        raise DataValidationError("cannot summarise an empty chain")
    return PosteriorSummary(
        mean_l=np.mean([s.l for s in samples], axis=0),
        mean_z=np.mean([s.z for s in samples], axis=0),
        mean_f=np.mean([s.f for s in samples], axis=0),
        mean_lf=np.mean([s.l @ s.f for s in samples], axis=0),
        source=SummarySource.GIBBS,
    )


def summarize(fitted: Fitted) -> PosteriorSummary:
    """Posterior means from a chain, several chains (pooled) or a CAVI fit.

    Gibbs: sample averages, with E[LF] averaged over per-sample products.
    CAVI: E[L] = eta * mu_l, E[Z] = eta, E[LF] = E[L] E[F].
    """
    if isinstance(fitted, CaviResult):
        fitted = fitted.state
    if isinstance(fitted, VariationalState):
        mean_l = fitted.mean_l
        return PosteriorSummary(
            mean_l=mean_l,
            mean_z=fitted.eta.copy(),
            mean_f=fitted.mu_f.copy(),
            mean_lf=mean_l @ fitted.mu_f,
            source=SummarySource.CAVI,
        )
    if isinstance(fitted, SampleChain):
        return _summarize_samples(fitted.samples)
    return _summarize_samples([s for chain in fitted for s in chain.samples])


# =============================================================================
# Alignment and metrics
# =============================================================================


def truth_alignment(summary: PosteriorSummary, truth: ModelState) -> Relabelling:
    """Relabelling of the summary that best matches the true F (unit variances)."""
    if summary.k != truth.k:
        raise DimensionError(f"summary has K={summary.k}, truth has K={truth.k}")
    if summary.mean_f.shape != truth.f.shape:
        raise DimensionError(f"mean_f {summary.mean_f.shape} vs truth f {truth.f.shape}")
    action = Action(m=truth.f, s2=np.ones_like(truth.f))
    return assign_sample(action, summary.mean_f)


def align_to_truth(summary: PosteriorSummary, truth: ModelState) -> PosteriorSummary:
    """Permute and sign-flip factors to match the truth; no rescaling."""
    return summary.relabel(truth_alignment(summary, truth))


def z_accuracy(mean_z: np.ndarray, true_z: np.ndarray) -> float:
    """Fraction of entries where round(mean_z) equals true_z; 0.5 rounds up."""
    mean_z = np.asarray(mean_z, dtype=float)
    true_z = np.asarray(true_z)
    if mean_z.shape != true_z.shape:
        raise DimensionError(f"mean_z shape {mean_z.shape} != true_z shape {true_z.shape}")
    return float(((mean_z >= 0.5).astype(int) == true_z).mean())


def rrmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """sqrt(sum (estimate - truth)^2 / sum truth^2)."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise DimensionError(f"estimate shape {estimate.shape} != truth shape {truth.shape}")
    denominator = (truth**2).sum()
    if denominator == 0:
        raise DataValidationError("rrmse is undefined for an all-zero truth")
    return float(np.sqrt(((estimate - truth) ** 2).sum() / denominator))


def truth_metrics(summary: PosteriorSummary, truth: ModelState) -> dict[str, float]:
    """Align to the truth, then report Z accuracy and RRMSE of L, F and LF."""
    aligned = align_to_truth(summary, truth)
    return {
        "z_accuracy": z_accuracy(aligned.mean_z, truth.z),
        "rrmse_l": rrmse(aligned.mean_l, truth.l),
        "rrmse_f": rrmse(aligned.mean_f, truth.f),
        "rrmse_lf": rrmse(aligned.mean_lf, truth.l @ truth.f),
    }


def baseline_metrics(truth: ModelState, hyper: Hyperparameters) -> dict[str, float]:
    """Metrics of the prior-mean estimator (zero L, F and LF; Z = round(pi))."""
    prior_z = np.broadcast_to(hyper.pi_array() >= 0.5, truth.z.shape).astype(float)
    return {
        "z_accuracy": z_accuracy(prior_z, truth.z),
        "rrmse_l": 1.0,
        "rrmse_f": 1.0,
        "rrmse_lf": 1.0,
    }


def select_best_chain(chains: Sequence[SampleChain], truth: ModelState) -> int:
    """Index of the chain whose aligned summary has the highest Z accuracy."""
    scores = []
    for chain in chains:
        if not len(chain):
            scores.append(-np.inf)
            continue
        aligned = align_to_truth(summarize(chain), truth)
        scores.append(z_accuracy(aligned.mean_z, truth.z))
    if not scores:
        raise ValueError("no chains to choose from")
    return int(np.argmax(scores))


# =============================================================================
# Fill-in protocol
# =============================================================================


def make_fill_in_split(
    data: Dataset, fraction: float, seed: int
) -> tuple[Dataset, np.ndarray]:
    """Hold out round(fraction * observed) entries uniformly at random.

    Candidates whose removal would leave a row or column without observed
    entries are skipped. Returns the masked dataset and an (H, 2) array of
    held-out (row, col) indices in row-major order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    count = int(round(fraction * data.n_observed))
    if count == 0:
        raise ValueError(f"fraction {fraction} holds out no entries")

    rng = np.random.default_rng(seed)
    candidates = np.argwhere(data.mask)
    candidates = candidates[rng.permutation(len(candidates))]
    rows_left = data.row_counts.copy()
    cols_left = data.col_counts.copy()

    chosen = []
    for i, j in candidates:
        if rows_left[i] > 1 and cols_left[j] > 1:
            chosen.append((i, j))
            rows_left[i] -= 1
            cols_left[j] -= 1
            if len(chosen) == count:
                break
    if len(chosen) < count:
        raise DataValidationError(
            f"cannot hold out {count} entries while keeping every row and column "
            f"observed (managed {len(chosen)})"
        )

    heldout = np.array(sorted(chosen), dtype=int).reshape(-1, 2)
    mask = data.mask.copy()
    mask[heldout[:, 0], heldout[:, 1]] = False
    logger.info(f"Held out {count} of {data.n_observed} observed entries")
    return data.with_mask(mask), heldout


def _check_heldout(heldout: np.ndarray, data: Dataset) -> np.ndarray:
    heldout = np.asarray(heldout, dtype=int).reshape(-1, 2)
    if not len(heldout):
        raise DataValidationError("held-out index list is empty")
    if not data.mask[heldout[:, 0], heldout[:, 1]].all():
        raise DataValidationError("held-out entries must be observed in the full data")
    return heldout


def fill_in_rrmse(summary: PosteriorSummary, full_data: Dataset, heldout: np.ndarray) -> float:
    """RRMSE of the posterior mean of LF on the held-out entries."""
    heldout = _check_heldout(heldout, full_data)
    rows, cols = heldout[:, 0], heldout[:, 1]
    return rrmse(summary.mean_lf[rows, cols], full_data.y[rows, cols])


def residual_table(
    summary: PosteriorSummary, data: Dataset, heldout: np.ndarray | None = None
) -> pd.DataFrame:
    """Per-entry observed, predicted and residual values.

    Covers the held-out entries when given, otherwise every observed entry.
    """
    if heldout is None:
        index = np.argwhere(data.mask)
    else:
        index = _check_heldout(heldout, data)
    rows, cols = index[:, 0], index[:, 1]
    observed = data.y[rows, cols]
    predicted = summary.mean_lf[rows, cols]
    return pd.DataFrame(
        {
            "row": rows,
            "col": cols,
            "observed": observed,
            "predicted": predicted,
            "residual": observed - predicted,
        }
    )
