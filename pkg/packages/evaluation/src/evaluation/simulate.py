"""Synthetic datasets with a known ground truth.

z_ik ~ Bernoulli(pi_k); active loadings and every f_kj are standard
normal; row i of the noise has precision tau_i = snr / V_i, where V_i is
the sample variance (N - 1 denominator) of row i of L F.
"""

import logging

import numpy as np
from shared.errors import SimulationError
from shared.model import Dataset, ModelState
from shared.schemas import SimulationSpec

logger = logging.getLogger("sparsefactor.simulate")

# Redraws of a zero-variance row before giving up
MAX_ROW_RETRIES: int = 100


def _draw_structure(
    spec: SimulationSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pi = np.asarray(spec.pi, dtype=float)
    z = (rng.random((spec.g, spec.k)) < pi).astype(np.int8)
    l = rng.standard_normal((spec.g, spec.k)) * z  # noqa: E741
    f = rng.standard_normal((spec.k, spec.n))

    variance = (l @ f).var(axis=1, ddof=1)
    bad = np.flatnonzero(variance <= 0)
    if bad.size:
        logger.warning(f"Regenerating {bad.size} row(s) with zero signal variance")
    for i in bad:
        for _ in range(MAX_ROW_RETRIES):
            z[i] = rng.random(spec.k) < pi
            l[i] = rng.standard_normal(spec.k) * z[i]
            if (l[i] @ f).var(ddof=1) > 0:
                break
        else:
            raise SimulationError(
                f"row {i} still has zero signal variance after {MAX_ROW_RETRIES} redraws"
            )
    return z, l, f


def simulate_snr_series(
    spec: SimulationSpec, snrs: list[float] | tuple[float, ...]
) -> list[tuple[Dataset, ModelState]]:
    """Datasets at several snr levels sharing one Z, L and F.

    Noise is independent across levels. spec.snr is ignored.
    """
    if not snrs:
        raise ValueError("need at least one snr level")
    if any(s <= 0 for s in snrs):
        raise ValueError(f"snr levels must be positive, got {list(snrs)}")

    structure_seq, *noise_seqs = np.random.SeedSequence(spec.seed).spawn(1 + len(snrs))
    z, l, f = _draw_structure(spec, np.random.default_rng(structure_seq))  # noqa: E741
    signal = l @ f
    variance = signal.var(axis=1, ddof=1)

    series = []
    for snr, seq in zip(snrs, noise_seqs):
        rng = np.random.default_rng(seq)
        tau = snr / variance
        y = signal + rng.standard_normal(signal.shape) / np.sqrt(tau)[:, None]
        truth = ModelState(l=l, f=f, z=z, tau=tau, alpha=np.ones(spec.k))
        series.append((Dataset(y=y), truth))
        logger.info(
            f"Simulated {spec.g}x{spec.n} dataset with K={spec.k} at snr={snr} "
            f"({int(z.sum())} active loadings)"
        )
    return series


def simulate(spec: SimulationSpec) -> tuple[Dataset, ModelState]:
    """One dataset at spec.snr. Deterministic given spec.seed."""
    return simulate_snr_series(spec, [spec.snr])[0]
