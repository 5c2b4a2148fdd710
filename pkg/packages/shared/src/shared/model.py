"""Sparse factor model: data and parameter types plus exact log densities.

    Y = L F + E,   e_ij ~ N(0, 1/tau_i)
    l_ik | z_ik, alpha_k ~ z_ik N(0, 1/alpha_k) + (1 - z_ik) delta_0
    z_ik ~ Bernoulli(pi_k),  alpha_k ~ Gamma(a_alpha, b_alpha)
    f_.j ~ N(0, I),          tau_i ~ Gamma(a_tau, b_tau)

Gamma distributions use the shape-rate parametrisation. Log densities
leave out the log delta_0(0) terms of inactive loadings; the ELBO uses the
same convention, so the omitted terms cancel everywhere.

Masked entries of Y never enter a likelihood sum. Dataset keeps a copy of
Y with masked entries zeroed (`y_obs`) so vectorised sums can multiply by
the mask or simply ignore those cells.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import xlog1py, xlogy

from shared.errors import (
    DataValidationError,
    DimensionError,
    ParameterError,
    SpikeConstraintError,
)
from shared.schemas import Hyperparameters

logger = logging.getLogger("sparsefactor.model")

LOG_2PI: float = float(np.log(2.0 * np.pi))


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# =============================================================================
# Dataset
# =============================================================================


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observation matrix Y (G features x N samples) with an observation mask.

    mask[i, j] is True when y[i, j] is observed. Every row and every column
    needs at least one observed entry.
    """

    y: np.ndarray
    mask: np.ndarray | None = None
    y_obs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 1:
            raise DataValidationError(f"y must be a non-empty 2-D matrix, got {y.shape}")

        if self.mask is None:
            mask = np.ones(y.shape, dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool)
        if mask.shape != y.shape:
            raise DimensionError(f"mask shape {mask.shape} != data shape {y.shape}")

        empty_rows = np.flatnonzero(~mask.any(axis=1))
        if empty_rows.size:
            raise DataValidationError(
                f"rows without observed entries: {empty_rows[:10].tolist()}"
            )
        empty_cols = np.flatnonzero(~mask.any(axis=0))
        if empty_cols.size:
            raise DataValidationError(
                f"columns without observed entries: {empty_cols[:10].tolist()}"
            )
        if not np.isfinite(y[mask]).all():
            raise DataValidationError("observed entries of y must be finite")

        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "y_obs", _frozen(np.where(mask, y, 0.0)))

    @property
    def g(self) -> int:
        return self.y.shape[0]

    @property
    def n(self) -> int:
        return self.y.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.y.shape

    @property
    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    @property
    def row_counts(self) -> np.ndarray:
        """Observed entries per row (N_i)."""
        return self.mask.sum(axis=1)

    @property
    def col_counts(self) -> np.ndarray:
        """Observed entries per column."""
        return self.mask.sum(axis=0)

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def with_mask(self, mask: np.ndarray) -> "Dataset":
        """Same values, new observation mask."""
        return Dataset(y=self.y, mask=mask)


# =============================================================================
# Parameter state
# =============================================================================


@dataclass(frozen=True, eq=False)
class ModelState:
    """One joint configuration (L, F, Z, tau, alpha).

    L and Z are stored feature-major (G x K), F factor-major (K x N).
    """

    l: np.ndarray  # noqa: E741
    f: np.ndarray
    z: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        l = np.array(self.l, dtype=float)  # noqa: E741
        f = np.array(self.f, dtype=float)
        z = np.array(self.z)
        tau = np.array(self.tau, dtype=float).reshape(-1)
        alpha = np.array(self.alpha, dtype=float).reshape(-1)

        if l.ndim != 2 or f.ndim != 2:
            raise DimensionError("l and f must be 2-D")
        g, k = l.shape
        if z.shape != (g, k):
            raise DimensionError(f"z shape {z.shape} != l shape {(g, k)}")
        if f.shape[0] != k:
            raise DimensionError(f"f has {f.shape[0]} rows, expected K={k}")
        if tau.shape != (g,):
            raise DimensionError(f"tau has length {tau.size}, expected G={g}")
        if alpha.shape != (k,):
            raise DimensionError(f"alpha has length {alpha.size}, expected K={k}")
        if not np.isin(z, (0, 1)).all():
            raise DataValidationError("z must be binary")

        object.__setattr__(self, "l", _frozen(l))
        object.__setattr__(self, "f", _frozen(f))
        object.__setattr__(self, "z", _frozen(z.astype(np.int8)))
        object.__setattr__(self, "tau", _frozen(tau))
        object.__setattr__(self, "alpha", _frozen(alpha))

    @property
    def g(self) -> int:
        return self.l.shape[0]

    @property
    def k(self) -> int:
        return self.l.shape[1]

    @property
    def n(self) -> int:
        return self.f.shape[1]

    def replace(self, **changes) -> "ModelState":
        return replace(self, **changes)

    def check(self) -> None:
        """Raise if the spike constraint or a positivity constraint fails."""
        check_positive(self)
        violations = np.argwhere((self.z == 0) & (self.l != 0))
        if violations.size:
            i, k = violations[0]
            raise SpikeConstraintError(
                f"l[{i}, {k}] = {self.l[i, k]} is nonzero while z[{i}, {k}] = 0"
                f" ({len(violations)} violation(s))"
            )


def check_positive(state: ModelState) -> None:
    if not (state.tau > 0).all():
        raise ParameterError("tau must be strictly positive")
    if not (state.alpha > 0).all():
        raise ParameterError("alpha must be strictly positive")


def check_dimensions(state: ModelState, data: Dataset) -> None:
    if state.g != data.g or state.n != data.n:
        raise DimensionError(
            f"state is {state.g}x{state.n} (GxN) but data is {data.g}x{data.n}"
        )


def _check_hyper(state: ModelState, hyper: Hyperparameters) -> None:
    if hyper.k != state.k:
        raise DimensionError(f"hyperparameters have K={hyper.k}, state has K={state.k}")


# =============================================================================
# Log densities
# =============================================================================


def log_likelihood(state: ModelState, data: Dataset) -> float:
    """Sum of log N(y_ij | (LF)_ij, 1/tau_i) over observed entries."""
    check_dimensions(state, data)
    if not (state.tau > 0).all():
        raise ParameterError("tau must be strictly positive")

    resid = data.y_obs - state.l @ state.f
    tau = state.tau[:, None]
    cell = 0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * resid**2
    return float(cell[data.mask].sum())


def log_prior_terms(state: ModelState, hyper: Hyperparameters) -> dict[str, float]:
    """Log prior split by block: loadings, z, alpha, f, tau."""
    _check_hyper(state, hyper)
    pi = hyper.pi_array()
    alpha = state.alpha
    active = state.z == 1

    slab = 0.5 * (np.log(alpha) - LOG_2PI)[None, :] - 0.5 * alpha[None, :] * state.l**2
    z = state.z.astype(float)

    return {
        "loadings": float(slab[active].sum()),
        "z": float((xlogy(z, pi[None, :]) + xlog1py(1.0 - z, -pi[None, :])).sum()),
        "alpha": float(
            stats.gamma.logpdf(alpha, hyper.a_alpha, scale=1.0 / hyper.b_alpha).sum()
        ),
        "f": float((-0.5 * (state.f**2 + LOG_2PI)).sum()),
        "tau": float(stats.gamma.logpdf(state.tau, hyper.a_tau, scale=1.0 / hyper.b_tau).sum()),
    }


def log_prior(state: ModelState, hyper: Hyperparameters) -> float:
    return float(sum(log_prior_terms(state, hyper).values()))


def log_joint(state: ModelState, data: Dataset, hyper: Hyperparameters) -> float:
    """log p(Y, L, F, Z, tau, alpha) without the Dirac terms of inactive loadings."""
    state.check()
    return log_likelihood(state, data) + log_prior(state, hyper)


# =============================================================================
# Prior draws
# =============================================================================


def draw_from_prior(
    hyper: Hyperparameters,
    g: int,
    n: int,
    rng: np.random.Generator,
    clip: tuple[float, float] | None = None,
) -> ModelState:
    """Draw every parameter from its prior.

    clip bounds the gamma draws of tau and alpha; vague gamma priors put
    most of their mass so close to zero that draws underflow.
    """
    k = hyper.k
    pi = hyper.pi_array()
    z = (rng.random((g, k)) < pi[None, :]).astype(np.int8)
    alpha = rng.gamma(hyper.a_alpha, 1.0 / hyper.b_alpha, size=k)
    tau = rng.gamma(hyper.a_tau, 1.0 / hyper.b_tau, size=g)
    if clip is not None:
        lo, hi = clip
        if (alpha < lo).any() or (alpha > hi).any() or (tau < lo).any() or (tau > hi).any():
            logger.debug(f"Clipping prior gamma draws to [{lo}, {hi}]")
        alpha = np.clip(alpha, lo, hi)
        tau = np.clip(tau, lo, hi)
    l = rng.standard_normal((g, k)) / np.sqrt(alpha)[None, :] * z  # noqa: E741
    f = rng.standard_normal((k, n))
    return ModelState(l=l, f=f, z=z, tau=tau, alpha=alpha)
