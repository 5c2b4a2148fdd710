"""Coordinate-ascent variational inference for the sparse factor model.

Mean-field family:

    q(l_ik, z_ik) = eta_ik N(l_ik | mu_l, var_l) + (1 - eta_ik) delta_0(l_ik)
    q(f_kj) = N(mu_f, var_f)
    q(tau_i) = Gamma(a_tau_hat, b_tau_hat),  q(alpha_k) = Gamma(a_alpha_hat, b_alpha_hat)

A sweep updates every (l, z) pair, then every f_kj, then tau, then alpha.
Within the (l, z) block the loop runs over factors and is vectorised
across rows; rows do not interact given F, tau and alpha, so this visits
the same sequence of conditionals as a row-major sweep. The same holds for
columns in the f block. Sums over j (or i) only run over observed cells.
"""

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy.special import digamma, expit, gammaln, xlog1py, xlogy
from shared.errors import DimensionError, ParameterError, SparseFactorError, VariationalError
from shared.model import LOG_2PI, Dataset
from shared.schemas import CaviConfig, CaviInit, Hyperparameters
from shared.seeds import instance_seeds
from shared.storage import read_matrix, write_matrix

logger = logging.getLogger("sparsefactor.cavi")

Index = int | slice | np.ndarray


# =============================================================================
# Variational state
# =============================================================================


@dataclass(eq=False)
class VariationalState:
    """Parameters of every variational factor.

    Arrays are owned by the state. Public update functions return a new
    state and leave their input untouched.
    """

    eta: np.ndarray
    mu_l: np.ndarray
    var_l: np.ndarray
    mu_f: np.ndarray
    var_f: np.ndarray
    a_tau_hat: np.ndarray
    b_tau_hat: np.ndarray
    a_alpha_hat: np.ndarray
    b_alpha_hat: np.ndarray

    def __post_init__(self):
        for name in ("eta", "mu_l", "var_l", "mu_f", "var_f"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        for name in ("a_tau_hat", "b_tau_hat", "a_alpha_hat", "b_alpha_hat"):
            setattr(self, name, np.array(getattr(self, name), dtype=float).reshape(-1))

        g, k = self.eta.shape
        n = self.mu_f.shape[1] if self.mu_f.ndim == 2 else -1
        if self.mu_l.shape != (g, k) or self.var_l.shape != (g, k):
            raise DimensionError(f"mu_l/var_l must be {(g, k)}")
        if self.mu_f.shape != (k, n) or self.var_f.shape != (k, n):
            raise DimensionError(f"mu_f/var_f must be K x N with K={k}")
        if self.a_tau_hat.shape != (g,) or self.b_tau_hat.shape != (g,):
            raise DimensionError(f"tau factors must have length G={g}")
        if self.a_alpha_hat.shape != (k,) or self.b_alpha_hat.shape != (k,):
            raise DimensionError(f"alpha factors must have length K={k}")

    @property
    def g(self) -> int:
        return self.eta.shape[0]

    @property
    def k(self) -> int:
        return self.eta.shape[1]

    @property
    def n(self) -> int:
        return self.mu_f.shape[1]

    @property
    def e_tau(self) -> np.ndarray:
        return self.a_tau_hat / self.b_tau_hat

    @property
    def e_alpha(self) -> np.ndarray:
        return self.a_alpha_hat / self.b_alpha_hat

    @property
    def mean_l(self) -> np.ndarray:
        """E_q[L] = eta * mu_l."""
        return self.eta * self.mu_l

    @property
    def mean_f(self) -> np.ndarray:
        return self.mu_f

    def copy(self) -> "VariationalState":
        return replace(self)  # __post_init__ copies every array

    def check(self) -> None:
        if not ((self.eta >= 0) & (self.eta <= 1)).all():
            raise ParameterError("eta must lie in [0, 1]")
        for name in ("var_l", "var_f", "a_tau_hat", "b_tau_hat", "a_alpha_hat", "b_alpha_hat"):
            if not (getattr(self, name) > 0).all():
                raise ParameterError(f"{name} must be strictly positive")


def _check(vstate: VariationalState, data: Dataset, hyper: Hyperparameters) -> None:
    if vstate.g != data.g or vstate.n != data.n:
        raise DimensionError(
            f"state is {vstate.g}x{vstate.n} (GxN) but data is {data.g}x{data.n}"
        )
    if vstate.k != hyper.k:
        raise DimensionError(f"hyperparameters have K={hyper.k}, state has K={vstate.k}")


def random_state(
    data: Dataset, hyper: Hyperparameters, rng: np.random.Generator
) -> VariationalState:
    """Random start: eta ~ U(0.25, 0.75), means ~ N(0, 1), unit variances.

    Dense factors (pi_k = 1) start at eta = 1. q(tau) and q(alpha) are then
    fitted once to these random moments, never left at the prior.
    """
    g, n, k = data.g, data.n, hyper.k
    eta = rng.uniform(0.25, 0.75, size=(g, k))
    eta[:, hyper.pi_array() >= 1.0] = 1.0
    v = VariationalState(
        eta=eta,
        mu_l=rng.standard_normal((g, k)),
        var_l=np.ones((g, k)),
        mu_f=rng.standard_normal((k, n)),
        var_f=np.ones((k, n)),
        a_tau_hat=np.full(g, hyper.a_tau),
        b_tau_hat=np.full(g, hyper.b_tau),
        a_alpha_hat=np.full(k, hyper.a_alpha),
        b_alpha_hat=np.full(k, hyper.b_alpha),
    )
    everything = slice(None)
    _update_tau(v, data, hyper, everything)
    _update_alpha(v, hyper, everything)
    return v


# =============================================================================
# In-place coordinate updates
# =============================================================================


def _second_moments(v: VariationalState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(E[L], E[L^2] elementwise, E[F^2] elementwise)."""
    m = v.eta * v.mu_l
    l2 = v.eta * (v.mu_l**2 + v.var_l)
    f2 = v.mu_f**2 + v.var_f
    return m, l2, f2


def _update_lz(
    v: VariationalState, data: Dataset, hyper: Hyperparameters, k: int, rows: Index
) -> None:
    mask = data.mask[rows].astype(float)
    y = data.y_obs[rows]
    e_tau = v.e_tau[rows]
    pi = hyper.pi_array()[k]

    f2 = v.mu_f[k] ** 2 + v.var_f[k]
    var = 1.0 / (e_tau * (mask @ f2) + v.e_alpha[k])

    # sum_j in O_i mu_f[k, j] (y_ij - sum_{k' != k} m_ik' mu_f[k', j])
    m = v.eta[rows] * v.mu_l[rows]
    cross = mask @ (v.mu_f[k][:, None] * v.mu_f.T)
    drive = y @ v.mu_f[k] - (cross * m).sum(axis=-1) + cross[..., k] * m[..., k]
    mu = e_tau * var * drive

    v.var_l[rows, k] = var
    v.mu_l[rows, k] = mu
    if pi >= 1.0:
        v.eta[rows, k] = 1.0
        return
    log_odds = (
        np.log(pi)
        - np.log1p(-pi)
        + 0.5 * (digamma(v.a_alpha_hat[k]) - np.log(v.b_alpha_hat[k]))
        + 0.5 * mu**2 / var
        + 0.5 * np.log(var)
    )
    v.eta[rows, k] = expit(log_odds)


def _update_f(v: VariationalState, data: Dataset, k: int, cols: Index) -> None:
    weight = data.mask[:, cols] * v.e_tau[:, None]
    m, l2, _ = _second_moments(v)
    mu_f = v.mu_f[:, cols]

    var = 1.0 / (weight.T @ l2[:, k] + 1.0)
    # sum_{k' != k} mu_f[k', j] sum_i w_ij m_ik m_ik'
    pair = weight.T @ (m[:, k : k + 1] * m)
    cross = (pair * mu_f.T).sum(axis=-1) - pair[..., k] * mu_f[k]
    drive = (weight * data.y_obs[:, cols]).T @ m[:, k] - cross

    v.var_f[k, cols] = var
    v.mu_f[k, cols] = var * drive


def _expected_sq_error(v: VariationalState, data: Dataset, rows: Index) -> np.ndarray:
    """E_q[(y_ij - l_i. f_.j)^2] over rows, zero at masked cells."""
    m, l2, f2 = _second_moments(v)
    m, l2 = m[rows], l2[rows]
    pred = m @ v.mu_f
    pred_sq = pred**2 - (m**2) @ (v.mu_f**2) + l2 @ f2
    y = data.y_obs[rows]
    return (y**2 - 2.0 * y * pred + pred_sq) * data.mask[rows]


def _update_tau(
    v: VariationalState, data: Dataset, hyper: Hyperparameters, rows: Index
) -> None:
    v.a_tau_hat[rows] = hyper.a_tau + 0.5 * data.row_counts[rows]
    v.b_tau_hat[rows] = hyper.b_tau + 0.5 * _expected_sq_error(v, data, rows).sum(axis=-1)


def _update_alpha(v: VariationalState, hyper: Hyperparameters, cols: Index) -> None:
    _, l2, _ = _second_moments(v)
    v.a_alpha_hat[cols] = hyper.a_alpha + 0.5 * v.eta[:, cols].sum(axis=0)
    v.b_alpha_hat[cols] = hyper.b_alpha + 0.5 * l2[:, cols].sum(axis=0)


def _sweep(v: VariationalState, data: Dataset, hyper: Hyperparameters) -> None:
    everything = slice(None)
    for k in range(v.k):
        _update_lz(v, data, hyper, k, everything)
    for k in range(v.k):
        _update_f(v, data, k, everything)
    _update_tau(v, data, hyper, everything)
    _update_alpha(v, hyper, everything)


# =============================================================================
# Public coordinate updates
# =============================================================================


def update_lz(
    vstate: VariationalState, data: Dataset, hyper: Hyperparameters, i: int, k: int
) -> VariationalState:
    """Optimal q(l_ik, z_ik) given every other factor."""
    _check(vstate, data, hyper)
    out = vstate.copy()
    _update_lz(out, data, hyper, k, np.array([i]))
    return out


def update_f(
    vstate: VariationalState, data: Dataset, hyper: Hyperparameters, k: int, j: int
) -> VariationalState:
    """Optimal q(f_kj) given every other factor."""
    _check(vstate, data, hyper)
    out = vstate.copy()
    _update_f(out, data, k, np.array([j]))
    return out


def update_tau(
    vstate: VariationalState, data: Dataset, hyper: Hyperparameters, i: int
) -> VariationalState:
    _check(vstate, data, hyper)
    out = vstate.copy()
    _update_tau(out, data, hyper, np.array([i]))
    return out


def update_alpha(
    vstate: VariationalState, hyper: Hyperparameters, k: int
) -> VariationalState:
    if vstate.k != hyper.k:
        raise DimensionError(f"hyperparameters have K={hyper.k}, state has K={vstate.k}")
    out = vstate.copy()
    _update_alpha(out, hyper, np.array([k]))
    return out


def sweep(
    vstate: VariationalState, data: Dataset, hyper: Hyperparameters
) -> VariationalState:
    """One full pass in block order: (l, z), f, tau, alpha."""
    _check(vstate, data, hyper)
    out = vstate.copy()
    _sweep(out, data, hyper)
    return out


# =============================================================================
# ELBO
# =============================================================================


def _gamma_cross_entropy(a: float, b: float, a_hat: np.ndarray, b_hat: np.ndarray) -> np.ndarray:
    """E_q[log Gamma(x | a, b)] for q = Gamma(a_hat, b_hat)."""
    return (
        (a - 1.0) * (digamma(a_hat) - np.log(b_hat))
        - a_hat / b_hat * b
        + a * np.log(b)
        - gammaln(a)
    )


def _gamma_entropy(a_hat: np.ndarray, b_hat: np.ndarray) -> np.ndarray:
    return a_hat - np.log(b_hat) + gammaln(a_hat) + (1.0 - a_hat) * digamma(a_hat)


def elbo_terms(
    vstate: VariationalState, data: Dataset, hyper: Hyperparameters
) -> dict[str, float]:
    """ELBO split into expected log densities and entropies.

    The E[(1 - z) log delta_0(l)] terms of the loading prior and of the
    (l, z) entropy cancel and are left out of both.
    """
    _check(vstate, data, hyper)
    v = vstate
    pi = hyper.pi_array()
    eta = v.eta
    log_tau = digamma(v.a_tau_hat) - np.log(v.b_tau_hat)
    log_alpha = digamma(v.a_alpha_hat) - np.log(v.b_alpha_hat)

    sq_error = _expected_sq_error(v, data, slice(None))
    likelihood = 0.5 * (
        data.row_counts * (log_tau - LOG_2PI) - v.e_tau * sq_error.sum(axis=1)
    ).sum()

    loadings = 0.5 * (
        eta * (log_alpha - LOG_2PI - v.e_alpha * (v.mu_l**2 + v.var_l))
    ).sum()
    z_prior = (xlogy(eta, pi) + xlog1py(1.0 - eta, -pi)).sum()
    f_prior = -0.5 * (v.mu_f**2 + v.var_f + LOG_2PI).sum()
    tau_prior = _gamma_cross_entropy(hyper.a_tau, hyper.b_tau, v.a_tau_hat, v.b_tau_hat).sum()
    alpha_prior = _gamma_cross_entropy(
        hyper.a_alpha, hyper.b_alpha, v.a_alpha_hat, v.b_alpha_hat
    ).sum()

    lz_entropy = (
        0.5 * eta * (LOG_2PI + np.log(v.var_l) + 1.0)
        - xlogy(eta, eta)
        - xlogy(1.0 - eta, 1.0 - eta)
    ).sum()
    f_entropy = 0.5 * (LOG_2PI + np.log(v.var_f) + 1.0).sum()

    return {
        "likelihood": float(likelihood),
        "loadings": float(loadings),
        "z": float(z_prior),
        "f": float(f_prior),
        "tau": float(tau_prior),
        "alpha": float(alpha_prior),
        "entropy_lz": float(lz_entropy),
        "entropy_f": float(f_entropy),
        "entropy_tau": float(_gamma_entropy(v.a_tau_hat, v.b_tau_hat).sum()),
        "entropy_alpha": float(_gamma_entropy(v.a_alpha_hat, v.b_alpha_hat).sum()),
    }


def compute_elbo(vstate: VariationalState, data: Dataset, hyper: Hyperparameters) -> float:
    """E_q[log p(Y, theta)] + H[q]."""
    return float(sum(elbo_terms(vstate, data, hyper).values()))


# =============================================================================
# Runs
# =============================================================================

# Called with the live state; returns metric values for one snapshot row
Monitor = Callable[[VariationalState], dict[str, float]]


@dataclass
class CaviResult:
    """Outcome of one CAVI trial.

    snapshots holds one row per monitored sweep: sweep, elapsed seconds
    and whatever the monitor returned.
    """

    state: VariationalState
    elbo_trace: list[float]
    converged: bool
    sweeps: int
    seed: int
    elbo: float
    elapsed: list[float] = field(default_factory=list)
    snapshots: list[dict[str, float]] = field(default_factory=list)


def _snapshot(
    v: VariationalState, monitor: Monitor, sweep_index: int, seconds: float
) -> dict[str, float] | None:
    try:
        values = monitor(v)
    except Exception as e:  # snapshots never abort a run
        logger.warning(f"sweep {sweep_index}: snapshot failed ({type(e).__name__}: {e})")
        return None
    return {"sweep": float(sweep_index), "elapsed": seconds, **values}


def _iterate(
    v: VariationalState,
    data: Dataset,
    hyper: Hyperparameters,
    config: CaviConfig,
    max_sweeps: int,
    previous: float | None = None,
    monitor: Monitor | None = None,
    monitor_every: int = 1,
    snapshots: list[dict[str, float]] | None = None,
) -> tuple[list[float], list[float], bool, int]:
    """Run sweeps in place until convergence or max_sweeps.

    Returns (ELBO trace, elapsed seconds per trace entry, converged, sweeps done).
    Monitor rows are appended to `snapshots` every monitor_every sweeps and
    after the final sweep.
    """
    start = time.perf_counter()
    trace: list[float] = []
    elapsed: list[float] = []
    for s in range(1, max_sweeps + 1):
        try:
            _sweep(v, data, hyper)
        except (SparseFactorError, FloatingPointError, ValueError) as e:
            raise VariationalError(f"{type(e).__name__}: {e}", s) from e

        done = False
        if s % config.elbo_every == 0 or s == max_sweeps:
            value = compute_elbo(v, data, hyper)
            if not np.isfinite(value):
                raise VariationalError(f"ELBO is not finite ({value})", s)
            trace.append(value)
            elapsed.append(time.perf_counter() - start)
            if previous is not None:
                delta = value - previous
                if delta < -1e-8 * abs(value):
                    logger.warning(f"sweep {s}: ELBO decreased by {-delta:.3g}")
                done = abs(delta) < config.abs_tol or abs(delta) < config.rel_tol * abs(value)
            previous = value

        if monitor is not None and (done or s % monitor_every == 0 or s == max_sweeps):
            row = _snapshot(v, monitor, s, time.perf_counter() - start)
            if row is not None and snapshots is not None:
                snapshots.append(row)
        if done:
            logger.debug(f"converged after {s} sweeps, ELBO {previous:.10g}")
            return trace, elapsed, True, s
    return trace, elapsed, False, max_sweeps


def run_cavi(
    data: Dataset,
    hyper: Hyperparameters,
    config: CaviConfig,
    init_state: VariationalState | None = None,
    monitor: Monitor | None = None,
    monitor_every: int = 1,
) -> CaviResult:
    """Run CAVI from a random or supplied start until convergence.

    The ELBO is evaluated every config.elbo_every sweeps and after the
    last one; convergence compares consecutive evaluations.
    """
    if monitor_every < 1:
        raise ValueError("monitor_every must be positive")
    rng = np.random.default_rng(config.seed)
    if config.init == CaviInit.SUPPLIED:
        if init_state is None:
            raise ValueError("init=supplied requires an init_state")
        v = init_state.copy()
    else:
        v = random_state(data, hyper, rng)
    _check(v, data, hyper)
    v.check()
    if (hyper.pi_array() >= 1.0).any():
        logger.debug("dense factors present; their eta is fixed at 1")

    logger.info(
        f"CAVI seed={config.seed}: up to {config.max_sweeps} sweeps, "
        f"G={data.g} N={data.n} K={hyper.k}"
    )
    snapshots: list[dict[str, float]] = []
    trace, elapsed, converged, sweeps = _iterate(
        v, data, hyper, config, config.max_sweeps,
        monitor=monitor, monitor_every=monitor_every, snapshots=snapshots,
    )
    final = trace[-1] if trace else compute_elbo(v, data, hyper)
    logger.info(
        f"CAVI seed={config.seed}: {'converged' if converged else 'stopped'} "
        f"after {sweeps} sweeps, ELBO {final:.10g}"
    )
    return CaviResult(
        state=v,
        elbo_trace=trace,
        converged=converged,
        sweeps=sweeps,
        seed=config.seed,
        elbo=final,
        elapsed=elapsed,
        snapshots=snapshots,
    )


@dataclass
class MultiTrialResult:
    """All trials plus the index of the one with the largest final ELBO."""

    trials: list[CaviResult]
    best_index: int
    early_stop_sweeps: int | None = None

    @property
    def best(self) -> CaviResult:
        return self.trials[self.best_index]

    @property
    def elbos(self) -> list[float]:
        return [t.elbo for t in self.trials]


def _best(results: list[CaviResult]) -> int:
    # argmax keeps the first of tied trials
    return int(np.argmax([r.elbo for r in results]))


def _continue_leader(
    leader: CaviResult,
    data: Dataset,
    hyper: Hyperparameters,
    config: CaviConfig,
    remaining: int,
    monitor: Monitor | None,
    monitor_every: int,
) -> CaviResult:
    v = leader.state.copy()
    previous = leader.elbo_trace[-1] if leader.elbo_trace else None
    offset = max(
        [*leader.elapsed[-1:], *(row["elapsed"] for row in leader.snapshots[-1:])],
        default=0.0,
    )
    more: list[dict[str, float]] = []
    trace, elapsed, converged, sweeps = _iterate(
        v, data, hyper, config, remaining, previous,
        monitor=monitor, monitor_every=monitor_every, snapshots=more,
    )
    shifted = [
        {**row, "sweep": row["sweep"] + leader.sweeps, "elapsed": row["elapsed"] + offset}
        for row in more
    ]
    return CaviResult(
        state=v,
        elbo_trace=leader.elbo_trace + trace,
        converged=converged,
        sweeps=leader.sweeps + sweeps,
        seed=leader.seed,
        elbo=trace[-1] if trace else leader.elbo,
        elapsed=leader.elapsed + [offset + e for e in elapsed],
        snapshots=leader.snapshots + shifted,
    )


def run_multi_trial(
    data: Dataset,
    hyper: Hyperparameters,
    config: CaviConfig,
    trials: int,
    n_jobs: int = 1,
    seeds: list[int] | None = None,
    early_stop_sweeps: int | None = None,
    monitor: Monitor | None = None,
    monitor_every: int = 1,
) -> MultiTrialResult:
    """Run independent CAVI trials and keep the one with the largest ELBO.

    Trial t uses seed config.seed + t unless seeds is given. With
    early_stop_sweeps every trial runs that many sweeps, then only the
    leader continues up to config.max_sweeps; its trace is the
    concatenation of both phases.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    if seeds is None:
        seeds = instance_seeds(config.seed, trials)
    if len(seeds) != trials:
        raise ValueError(f"{len(seeds)} seeds for {trials} trials")

    budget = config.max_sweeps
    if early_stop_sweeps is not None:
        if early_stop_sweeps < 0:
            raise ValueError("early_stop_sweeps must be nonnegative")
        budget = min(early_stop_sweeps, config.max_sweeps)
    configs = [
        config.model_copy(update={"seed": seed, "max_sweeps": budget}) for seed in seeds
    ]

    run = delayed(run_cavi)
    if n_jobs == 1:
        results = [
            run_cavi(data, hyper, c, monitor=monitor, monitor_every=monitor_every)
            for c in configs
        ]
    else:
        results = Parallel(n_jobs=n_jobs)(
            run(data, hyper, c, monitor=monitor, monitor_every=monitor_every) for c in configs
        )
    best = _best(results)

    remaining = config.max_sweeps - budget
    leader = results[best]
    if early_stop_sweeps is not None and remaining > 0 and not leader.converged:
        logger.info(
            f"early stop: continuing trial {best} (seed {leader.seed}) for "
            f"up to {remaining} sweeps"
        )
        results[best] = _continue_leader(
            leader, data, hyper, config, remaining, monitor, monitor_every
        )

    logger.info(
        f"{trials} CAVI trial(s): best is {best} with ELBO {results[best].elbo:.10g}"
    )
    return MultiTrialResult(trials=results, best_index=best, early_stop_sweeps=early_stop_sweeps)


# =============================================================================
# Persistence
# =============================================================================

STATE_BLOCKS: tuple[str, ...] = (
    "eta", "mu_l", "var_l", "mu_f", "var_f",
    "a_tau_hat", "b_tau_hat", "a_alpha_hat", "b_alpha_hat",
)


def save_variational_state(directory: str | Path, vstate: VariationalState) -> Path:
    """One tab-delimited file per variational parameter block."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for block in STATE_BLOCKS:
        write_matrix(directory / f"{block}.tsv", getattr(vstate, block))
    return directory


def load_variational_state(directory: str | Path) -> VariationalState:
    directory = Path(directory)
    blocks = {}
    for block in STATE_BLOCKS:
        values, _ = read_matrix(directory / f"{block}.tsv")
        blocks[block] = values.reshape(-1) if block.endswith("_hat") else values
    return VariationalState(**blocks)
