"""Collapsed Gibbs sampler for the sparse factor model.

One iteration updates, in order: every z_ik (row-major, with the row of L
marginalised out), every row of L, every column of F, tau, then alpha.
Masked entries are dropped from every sum.

The public single-block operations take and return immutable ModelState
values. run_chain works on mutable copies (_Work) and only freezes the
states it keeps.

Collapsed z step
----------------
For row i with active set A, integrating the slab over l_i. gives

    log m(A) = sum_{k in A} 0.5 log alpha_k - 0.5 log det P_A + 0.5 b_A' P_A^-1 b_A
    P_A = tau_i [F]_A [F]_A' + diag(alpha_A),   b_A = tau_i [F]_A y_i.

so the log-odds of z_ik = 1 is logit(pi_k) + log m(A0 + k) - log m(A0),
A0 = A minus k. Each row keeps one Cholesky factor of P_A while its z
entries are redrawn. An inactive k borders that factor (Schur complement
s); an active k reads s and r from the diagonal of P_A^-1 and the solve
with b_A. A toggle appends a row to the factor or removes one with a
rank-one update. When s is tiny relative to p_kk both marginals are
recomputed from full factorisations.
"""

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.special import expit
from shared.errors import DimensionError, NumericalError, SamplerError, SparseFactorError
from shared.model import (
    Dataset,
    ModelState,
    check_dimensions,
    draw_from_prior,
    log_joint,
)
from shared.schemas import ChainConfig, ChainInit, Hyperparameters
from shared.seeds import instance_seeds

from inference.chain import SampleChain

logger = logging.getLogger("sparsefactor.gibbs")

# Bounds for gamma draws at prior-draw initialisation
PRIOR_DRAW_CLIP: tuple[float, float] = (1e-3, 1e3)

# Relative Schur complement below which the bordered update is recomputed
SCHUR_RTOL: float = 1e-8

# Gamma draws are floored here so tau and alpha stay strictly positive
GAMMA_FLOOR: float = float(np.finfo(float).tiny)

OnSample = Callable[[int, ModelState, float], None]


# =============================================================================
# Mutable working copy
# =============================================================================


@dataclass
class _Work:
    l: np.ndarray  # noqa: E741
    f: np.ndarray
    z: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray

    @classmethod
    def of(cls, state: ModelState) -> "_Work":
        return cls(
            l=state.l.copy(),
            f=state.f.copy(),
            z=state.z.copy(),
            tau=state.tau.copy(),
            alpha=state.alpha.copy(),
        )

    def freeze(self) -> ModelState:
        return ModelState(l=self.l, f=self.f, z=self.z, tau=self.tau, alpha=self.alpha)


def _row_stats(
    f: np.ndarray, data: Dataset, i: int, shared_gram: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Gram matrix [F]_o [F]_o' and [F]_o y_o over the observed columns of row i."""
    fy = f @ data.y_obs[i]
    if shared_gram is not None:
        return shared_gram, fy
    observed = f[:, data.mask[i]]
    return observed @ observed.T, fy


def _shared_gram(f: np.ndarray, data: Dataset) -> np.ndarray | None:
    return f @ f.T if data.fully_observed else None


def _cholesky(matrix: np.ndarray, index: tuple[int, ...]) -> np.ndarray:
    try:
        factor, _ = cho_factor(matrix, lower=True)
    except LinAlgError as e:
        raise NumericalError(f"precision matrix is not positive definite: {e}", index) from e
    return factor


# =============================================================================
# Collapsed z step
# =============================================================================


def _log_marginal(
    gram: np.ndarray,
    fy: np.ndarray,
    tau: float,
    alpha: np.ndarray,
    idx: np.ndarray,
    index: tuple[int, ...],
) -> float:
    """log m(A) for the active index set idx (constant terms dropped)."""
    if idx.size == 0:
        return 0.0
    prec = tau * gram[np.ix_(idx, idx)] + np.diag(alpha[idx])
    b = tau * fy[idx]
    factor = _cholesky(prec, index)
    logdet = 2.0 * np.log(np.diag(factor)).sum()
    quad = b @ cho_solve((factor, True), b)
    return 0.5 * np.log(alpha[idx]).sum() - 0.5 * logdet + 0.5 * quad


def _rank_one_update(factor: np.ndarray, x: np.ndarray) -> None:
    """In place: factor factor' + x x' for a lower Cholesky factor."""
    x = x.copy()
    for j in range(factor.shape[0]):
        r = np.hypot(factor[j, j], x[j])
        c, s = r / factor[j, j], x[j] / factor[j, j]
        factor[j, j] = r
        factor[j + 1 :, j] = (factor[j + 1 :, j] + s * x[j + 1 :]) / c
        x[j + 1 :] = c * x[j + 1 :] - s * factor[j + 1 :, j]


class _ActiveFactor:
    """Cholesky factor of P_A for one row while its z entries are redrawn.

    A is kept in insertion order; m(A) does not depend on the order.
    Toggling z_ik appends a bordered row or drops one with a rank-one
    update.
    """

    def __init__(
        self,
        gram: np.ndarray,
        fy: np.ndarray,
        tau: float,
        alpha: np.ndarray,
        z_row: np.ndarray,
        i: int,
    ):
        self.gram, self.fy, self.tau, self.alpha, self.i = gram, fy, tau, alpha, i
        self.order: list[int] = [int(k) for k in np.flatnonzero(z_row)]
        self.refactor()

    @property
    def idx(self) -> np.ndarray:
        return np.array(self.order, dtype=int)

    def refactor(self) -> None:
        idx = self.idx
        if idx.size == 0:
            self.factor = np.zeros((0, 0))
            return
        prec = self.tau * self.gram[np.ix_(idx, idx)] + np.diag(self.alpha[idx])
        self.factor = _cholesky(prec, (self.i,))

    def _border(self, k: int) -> tuple[float, np.ndarray]:
        """Schur complement of p_kk against A, and the new bottom row."""
        p_kk = self.tau * self.gram[k, k] + self.alpha[k]
        if not self.order:
            return p_kk, np.zeros(0)
        u = solve_triangular(self.factor, self.tau * self.gram[self.idx, k], lower=True)
        return p_kk - u @ u, u

    def log_ratio(self, k: int) -> float:
        """log m(A0 + k) - log m(A0) with A0 = A minus k."""
        tau, alpha = self.tau, self.alpha
        p_kk = tau * self.gram[k, k] + alpha[k]
        b = tau * self.fy[self.idx]
        if k in self.order:
            # s = 1 / (P_A^-1)_kk and r / s is the k-th entry of P_A^-1 b_A
            p = self.order.index(k)
            unit = np.zeros(len(self.order))
            unit[p] = 1.0
            v = solve_triangular(self.factor, unit, lower=True)
            s = 1.0 / (v @ v)
            r = cho_solve((self.factor, True), b)[p] * s
        else:
            s, u = self._border(k)
            w = solve_triangular(self.factor, b, lower=True) if self.order else np.zeros(0)
            r = tau * self.fy[k] - u @ w

        if s > SCHUR_RTOL * p_kk:
            return 0.5 * np.log(alpha[k]) - 0.5 * np.log(s) + 0.5 * r * r / s

        logger.debug(f"Schur complement {s:.3g} too small at ({self.i}, {k}); recomputing")
        idx0 = np.array(sorted(set(self.order) - {k}), dtype=int)
        idx1 = np.sort(np.append(idx0, k))
        return _log_marginal(self.gram, self.fy, tau, alpha, idx1, (self.i, k)) - _log_marginal(
            self.gram, self.fy, tau, alpha, idx0, (self.i, k)
        )

    def add(self, k: int) -> None:
        s, u = self._border(k)
        if s <= SCHUR_RTOL * (self.tau * self.gram[k, k] + self.alpha[k]):
            self.order.append(k)
            self.refactor()
            return
        m = len(self.order)
        factor = np.zeros((m + 1, m + 1))
        factor[:m, :m] = self.factor
        factor[m, :m] = u
        factor[m, m] = np.sqrt(s)
        self.order.append(k)
        self.factor = factor

    def remove(self, k: int) -> None:
        p = self.order.index(k)
        column = self.factor[p + 1 :, p].copy()
        factor = np.delete(np.delete(self.factor, p, axis=0), p, axis=1)
        if column.size:
            _rank_one_update(factor[p:, p:], column)
        self.order.pop(p)
        self.factor = factor


def _z_update(
    work: _Work,
    active: _ActiveFactor,
    pi: np.ndarray,
    i: int,
    k: int,
    rng: np.random.Generator,
) -> None:
    was_on = bool(work.z[i, k])
    if pi[k] >= 1.0:
        on = True
    else:
        log_odds = np.log(pi[k]) - np.log1p(-pi[k]) + active.log_ratio(k)
        on = bool(rng.random() < expit(log_odds))
    if on:
        work.z[i, k] = 1
        if not was_on:
            active.add(k)
    else:
        work.z[i, k] = 0
        work.l[i, k] = 0.0
        if was_on:
            active.remove(k)


def _active_factor(
    work: _Work, data: Dataset, i: int, shared: np.ndarray | None
) -> _ActiveFactor:
    gram, fy = _row_stats(work.f, data, i, shared)
    return _ActiveFactor(gram, fy, work.tau[i], work.alpha, work.z[i], i)


def _z_sweep(
    work: _Work, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> None:
    pi = hyper.pi_array()
    shared = _shared_gram(work.f, data)
    for i in range(data.g):
        active = _active_factor(work, data, i, shared)
        for k in range(work.z.shape[1]):
            _z_update(work, active, pi, i, k, rng)


def z_entry_log_odds(
    state: ModelState, data: Dataset, hyper: Hyperparameters, i: int, k: int
) -> float:
    """log p(z_ik = 1 | ...) - log p(z_ik = 0 | ...), with l_i. marginalised out.

    +inf when pi_k = 1.
    """
    check_dimensions(state, data)
    pi = hyper.pi_array()
    if pi[k] >= 1.0:
        return float("inf")
    work = _Work.of(state)
    active = _active_factor(work, data, i, _shared_gram(work.f, data))
    return float(np.log(pi[k]) - np.log1p(-pi[k]) + active.log_ratio(k))


def sample_z_entry(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparameters,
    i: int,
    k: int,
    rng: np.random.Generator,
) -> ModelState:
    """Redraw z_ik from its collapsed conditional."""
    check_dimensions(state, data)
    work = _Work.of(state)
    active = _active_factor(work, data, i, _shared_gram(work.f, data))
    _z_update(work, active, hyper.pi_array(), i, k, rng)
    return work.freeze()


def sample_z(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> ModelState:
    """One full row-major sweep over z."""
    check_dimensions(state, data)
    work = _Work.of(state)
    _z_sweep(work, data, hyper, rng)
    return work.freeze()


# =============================================================================
# L rows
# =============================================================================


def _l_row_moments(
    work: _Work, gram: np.ndarray, fy: np.ndarray, i: int
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """(active indices, mean, lower Cholesky factor of the precision)."""
    idx = np.flatnonzero(work.z[i])
    if idx.size == 0:
        return idx, None, None
    tau = work.tau[i]
    prec = tau * gram[np.ix_(idx, idx)] + np.diag(work.alpha[idx])
    factor = _cholesky(prec, (i,))
    mean = cho_solve((factor, True), tau * fy[idx])
    return idx, mean, factor


def _l_update(work: _Work, data: Dataset, rng: np.random.Generator) -> None:
    shared = _shared_gram(work.f, data)
    for i in range(data.g):
        gram, fy = _row_stats(work.f, data, i, shared)
        idx, mean, factor = _l_row_moments(work, gram, fy, i)
        work.l[i] = 0.0
        if idx.size:
            noise = rng.standard_normal(idx.size)
            work.l[i, idx] = mean + solve_triangular(factor, noise, lower=True, trans="T")


def l_row_conditional(
    state: ModelState, data: Dataset, i: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Active indices, mean and covariance of the full conditional of row i of L."""
    check_dimensions(state, data)
    work = _Work.of(state)
    gram, fy = _row_stats(work.f, data, i, _shared_gram(work.f, data))
    idx, mean, factor = _l_row_moments(work, gram, fy, i)
    if idx.size == 0:
        return idx, np.zeros(0), np.zeros((0, 0))
    cov = cho_solve((factor, True), np.eye(idx.size))
    return idx, mean, cov


def sample_l_rows(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> ModelState:
    """Draw every row of L from its full conditional; inactive loadings are 0."""
    check_dimensions(state, data)
    work = _Work.of(state)
    _l_update(work, data, rng)
    return work.freeze()


# =============================================================================
# F columns
# =============================================================================


def _f_col_precision(work: _Work, rows: np.ndarray | None) -> np.ndarray:
    l = work.l if rows is None else work.l[rows]  # noqa: E741
    tau = work.tau if rows is None else work.tau[rows]
    return l.T @ (tau[:, None] * l) + np.eye(work.l.shape[1])


def _f_update(work: _Work, data: Dataset, rng: np.random.Generator) -> None:
    k, n = work.f.shape
    rhs = work.l.T @ (work.tau[:, None] * data.y_obs)  # K x N; masked y are 0
    noise = rng.standard_normal((k, n))

    full_cols = data.mask.all(axis=0)
    if full_cols.any():
        factor = _cholesky(_f_col_precision(work, None), ())
        cols = np.flatnonzero(full_cols)
        mean = cho_solve((factor, True), rhs[:, cols])
        work.f[:, cols] = mean + solve_triangular(
            factor, noise[:, cols], lower=True, trans="T"
        )
    for j in np.flatnonzero(~full_cols):
        factor = _cholesky(_f_col_precision(work, data.mask[:, j]), (j,))
        mean = cho_solve((factor, True), rhs[:, j])
        work.f[:, j] = mean + solve_triangular(factor, noise[:, j], lower=True, trans="T")


def f_col_conditional(
    state: ModelState, data: Dataset, j: int
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the full conditional of column j of F."""
    check_dimensions(state, data)
    work = _Work.of(state)
    rows = data.mask[:, j]
    cov = np.linalg.inv(_f_col_precision(work, rows))
    mean = cov @ (work.l[rows].T @ (work.tau[rows] * data.y_obs[rows, j]))
    return mean, cov


def sample_f_cols(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> ModelState:
    """Draw every column of F from its full conditional."""
    check_dimensions(state, data)
    work = _Work.of(state)
    _f_update(work, data, rng)
    return work.freeze()


# =============================================================================
# Precisions
# =============================================================================


def _tau_params(work: _Work, data: Dataset, hyper: Hyperparameters):
    resid = (data.y_obs - work.l @ work.f) * data.mask
    shape = hyper.a_tau + 0.5 * data.row_counts
    rate = hyper.b_tau + 0.5 * (resid**2).sum(axis=1)
    return shape, rate


def _alpha_params(work: _Work, hyper: Hyperparameters):
    shape = hyper.a_alpha + 0.5 * work.z.sum(axis=0)
    rate = hyper.b_alpha + 0.5 * (work.l**2 * work.z).sum(axis=0)
    return shape, rate


def _gamma(rng: np.random.Generator, shape: np.ndarray, rate: np.ndarray) -> np.ndarray:
    return np.maximum(rng.gamma(shape, 1.0 / rate), GAMMA_FLOOR)


def tau_conditional(
    state: ModelState, data: Dataset, hyper: Hyperparameters
) -> tuple[np.ndarray, np.ndarray]:
    """Shape and rate vectors of the gamma full conditionals of tau."""
    check_dimensions(state, data)
    return _tau_params(_Work.of(state), data, hyper)


def alpha_conditional(
    state: ModelState, hyper: Hyperparameters
) -> tuple[np.ndarray, np.ndarray]:
    """Shape and rate vectors of the gamma full conditionals of alpha."""
    return _alpha_params(_Work.of(state), hyper)


def sample_tau(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> ModelState:
    check_dimensions(state, data)
    work = _Work.of(state)
    work.tau = _gamma(rng, *_tau_params(work, data, hyper))
    return work.freeze()


def sample_alpha(
    state: ModelState, hyper: Hyperparameters, rng: np.random.Generator
) -> ModelState:
    work = _Work.of(state)
    work.alpha = _gamma(rng, *_alpha_params(work, hyper))
    return work.freeze()


# =============================================================================
# Chains
# =============================================================================


def _sweep(
    work: _Work, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> None:
    _z_sweep(work, data, hyper, rng)
    _l_update(work, data, rng)
    _f_update(work, data, rng)
    work.tau = _gamma(rng, *_tau_params(work, data, hyper))
    work.alpha = _gamma(rng, *_alpha_params(work, hyper))


def sweep(
    state: ModelState, data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> ModelState:
    """One full iteration: z, L, F, tau, alpha."""
    check_dimensions(state, data)
    work = _Work.of(state)
    _sweep(work, data, hyper, rng)
    return work.freeze()


def initial_state(
    data: Dataset,
    hyper: Hyperparameters,
    config: ChainConfig,
    rng: np.random.Generator,
    init_state: ModelState | None = None,
) -> ModelState:
    """Starting state for a chain, per config.init."""
    if config.init == ChainInit.SUPPLIED:
        if init_state is None:
            raise ValueError("init=supplied-state requires an init_state")
        check_dimensions(init_state, data)
        if init_state.k != hyper.k:
            raise DimensionError(f"init_state has K={init_state.k}, expected {hyper.k}")
        init_state.check()
        return init_state
    return draw_from_prior(hyper, data.g, data.n, rng, clip=PRIOR_DRAW_CLIP)


def run_chain(
    data: Dataset,
    hyper: Hyperparameters,
    config: ChainConfig,
    init_state: ModelState | None = None,
    on_sample: OnSample | None = None,
) -> SampleChain:
    """Run one collapsed Gibbs chain.

    Burn-in iterations are discarded first, then the last state of every
    thin-length window is kept. on_sample(index, state, elapsed) is called
    for each kept state.
    """
    rng = np.random.default_rng(config.seed)
    state = initial_state(data, hyper, config, rng, init_state)
    check_dimensions(state, data)
    work = _Work.of(state)

    samples: list[ModelState] = []
    trace: list[float] = []
    elapsed: list[float] = []
    start = time.perf_counter()
    logger.info(
        f"Gibbs chain seed={config.seed}: {config.iterations} iterations, "
        f"burn-in {config.burn_in}, thin {config.thin}, G={data.g} N={data.n} K={hyper.k}"
    )

    for t in range(1, config.iterations + 1):
        try:
            _sweep(work, data, hyper, rng)
        except SparseFactorError as e:
            raise SamplerError(str(e), t) from e
        except (LinAlgError, FloatingPointError, ValueError) as e:
            raise SamplerError(f"{type(e).__name__}: {e}", t) from e

        if t <= config.burn_in or (t - config.burn_in) % config.thin:
            continue
        kept = work.freeze()
        value = log_joint(kept, data, hyper)
        if not np.isfinite(value):
            raise SamplerError(f"log joint is not finite ({value})", t)
        now = time.perf_counter() - start
        samples.append(kept)
        trace.append(value)
        elapsed.append(now)
        if on_sample is not None:
            on_sample(len(samples) - 1, kept, now)
        logger.debug(f"iteration {t}: log joint {value:.6g}")

    logger.info(
        f"Gibbs chain seed={config.seed} finished: {len(samples)} samples "
        f"in {time.perf_counter() - start:.2f}s"
    )
    return SampleChain(samples=samples, config=config, log_joint=trace, elapsed=elapsed)


def run_chains(
    data: Dataset,
    hyper: Hyperparameters,
    config: ChainConfig,
    n_chains: int,
    n_jobs: int = 1,
    init_states: list[ModelState] | None = None,
) -> list[SampleChain]:
    """Run independent chains with seeds config.seed, config.seed + 1, ...

    Each chain owns its state; results do not depend on n_jobs.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be positive")
    if init_states is not None and len(init_states) != n_chains:
        raise ValueError(f"{len(init_states)} init states for {n_chains} chains")
    configs = [
        config.model_copy(update={"seed": seed})
        for seed in instance_seeds(config.seed, n_chains)
    ]
    inits = init_states or [None] * n_chains
    if n_jobs == 1:
        return [run_chain(data, hyper, c, s) for c, s in zip(configs, inits)]
    return Parallel(n_jobs=n_jobs)(
        delayed(run_chain)(data, hyper, c, s) for c, s in zip(configs, inits)
    )
