"""Decision-theoretic relabelling of posterior samples.

Factor models are invariant to permuting factors and to flipping the sign
of a factor's loadings and scores together. Samples pooled from several
chains are aligned by minimising the Monte Carlo risk

    sum_t loss(a, r_t; F_t),
    loss(a, (sigma, nu); F) = -sum_kj log N(nu_sigma(k) F_sigma(k)j | m_kj, s2_kj)

alternately over the action a = (m, s2) (closed form: per-cell mean and
biased variance of the relabelled samples) and over each sample's
relabelling (a linear assignment problem on a K x K cost matrix).

Convention: applying (sigma, nu) maps row k of the output to row sigma(k)
of the input, multiplied by nu[sigma(k)]. nu is indexed by source factor.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import linear_sum_assignment
from shared.errors import DimensionError, RelabelError
from shared.model import LOG_2PI, ModelState

from inference.chain import SampleChain

logger = logging.getLogger("sparsefactor.relabel")

# Floor for reference variances (one sample, or identical samples)
VARIANCE_FLOOR: float = 1e-12

DEFAULT_MAX_ITERATIONS: int = 100


# =============================================================================
# Value types
# =============================================================================


@dataclass(frozen=True, eq=False)
class Action:
    """Reference means and variances for every entry of F (K x N)."""

    m: np.ndarray
    s2: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        s2 = np.array(self.s2, dtype=float)
        if m.ndim != 2 or m.shape != s2.shape:
            raise DimensionError(f"m {m.shape} and s2 {s2.shape} must be equal 2-D shapes")
        if not (s2 > 0).all():
            raise RelabelError("reference variances must be positive")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "s2", s2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape


@dataclass(frozen=True, eq=False)
class Relabelling:
    """A factor permutation sigma and per-factor signs nu (indexed by source)."""

    sigma: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=int)
        nu = np.array(self.nu, dtype=int)
        k = sigma.size
        if sigma.shape != (k,) or nu.shape != (k,):
            raise DimensionError("sigma and nu must be vectors of equal length")
        if not np.array_equal(np.sort(sigma), np.arange(k)):
            raise RelabelError(f"sigma {sigma.tolist()} is not a permutation")
        if not np.isin(nu, (-1, 1)).all():
            raise RelabelError(f"nu {nu.tolist()} must contain only -1 and +1")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def identity(cls, k: int) -> "Relabelling":
        return cls(sigma=np.arange(k), nu=np.ones(k, dtype=int))

    @property
    def k(self) -> int:
        return self.sigma.size

    @property
    def is_identity(self) -> bool:
        return bool((self.sigma == np.arange(self.k)).all() and (self.nu == 1).all())

    def inverse(self) -> "Relabelling":
        """The relabelling that undoes this one."""
        inv = np.empty_like(self.sigma)
        inv[self.sigma] = np.arange(self.k)
        return Relabelling(sigma=inv, nu=self.nu[self.sigma])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Relabelling):
            return NotImplemented
        return np.array_equal(self.sigma, other.sigma) and np.array_equal(self.nu, other.nu)

    __hash__ = None

    def __repr__(self) -> str:
        return f"Relabelling(sigma={self.sigma.tolist()}, nu={self.nu.tolist()})"


# =============================================================================
# Applying relabellings
# =============================================================================


def relabel_f(f: np.ndarray, r: Relabelling) -> np.ndarray:
    """Rows of F permuted and sign-flipped: out[k] = nu[sigma(k)] f[sigma(k)]."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] != r.k:
        raise DimensionError(f"f has {f.shape[0]} rows, relabelling has K={r.k}")
    return r.nu[r.sigma][:, None] * f[r.sigma]


def apply_relabelling(state: ModelState, r: Relabelling) -> ModelState:
    """Relabel L columns, F rows, Z columns and alpha together; tau is unchanged.

    L F is invariant under this map.
    """
    if state.k != r.k:
        raise DimensionError(f"state has K={state.k}, relabelling has K={r.k}")
    signs = r.nu[r.sigma]
    return ModelState(
        l=state.l[:, r.sigma] * signs[None, :],
        f=state.f[r.sigma] * signs[:, None],
        z=state.z[:, r.sigma],
        tau=state.tau,
        alpha=state.alpha[r.sigma],
    )


# =============================================================================
# Loss and the two minimisation steps
# =============================================================================


def loss(action: Action, r: Relabelling, f: np.ndarray) -> float:
    """Negative log density of the relabelled F under the action."""
    x = relabel_f(f, r)
    if x.shape != action.shape:
        raise DimensionError(f"f has shape {x.shape}, action has {action.shape}")
    return float(
        0.5 * (LOG_2PI + np.log(action.s2)).sum()
        + 0.5 * ((x - action.m) ** 2 / action.s2).sum()
    )


def risk(action: Action, relabellings: list[Relabelling], samples: list[np.ndarray]) -> float:
    """Monte Carlo risk: summed loss over samples."""
    return float(sum(loss(action, r, f) for r, f in zip(relabellings, samples)))


def update_action(samples: list[np.ndarray], relabellings: list[Relabelling]) -> Action:
    """Per-cell mean and biased variance of the relabelled samples."""
    if not samples:
        raise RelabelError("cannot fit an action to zero samples")
    if len(samples) != len(relabellings):
        raise DimensionError(f"{len(samples)} samples but {len(relabellings)} relabellings")
    stacked = np.stack([relabel_f(f, r) for f, r in zip(samples, relabellings)])
    m = stacked.mean(axis=0)
    s2 = np.maximum(stacked.var(axis=0), VARIANCE_FLOOR)
    return Action(m=m, s2=s2)


def cost_matrix(action: Action, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cost C[k, k'] of sending source row k' to target row k, and the best sign.

    The sign is 0 where both signs cost the same.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != action.shape:
        raise DimensionError(f"f has shape {f.shape}, action has {action.shape}")
    w = 1.0 / action.s2
    base = 0.5 * (w @ (f**2).T) + 0.5 * ((action.m**2 * w).sum(axis=1)
                                         + (LOG_2PI + np.log(action.s2)).sum(axis=1))[:, None]
    linear = (w * action.m) @ f.T
    pos = base - linear
    neg = base + linear
    signs = np.where(pos <= neg, 1, -1)
    signs[np.isclose(pos, neg, rtol=1e-12, atol=1e-12)] = 0
    return np.minimum(pos, neg), signs


def _assign(action: Action, f: np.ndarray, prefer: Relabelling) -> Relabelling:
    cost, signs = cost_matrix(action, f)
    k = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()

    # equal-cost alternatives resolve to `prefer`
    preferred = cost[np.arange(k), prefer.sigma].sum()
    if np.isclose(preferred, best, rtol=1e-12, atol=1e-12):
        sigma = prefer.sigma
    else:
        sigma = cols
    chosen = signs[np.arange(k), sigma]
    nu = np.empty(k, dtype=int)
    nu[sigma] = np.where(chosen == 0, prefer.nu[sigma], chosen)
    return Relabelling(sigma=sigma, nu=nu)


def assign_sample(action: Action, f: np.ndarray) -> Relabelling:
    """Relabelling of f with the smallest loss under the action.

    Ties go to the identity permutation and positive signs.
    """
    return _assign(action, f, Relabelling.identity(action.shape[0]))


# =============================================================================
# Chains
# =============================================================================


@dataclass
class RelabelResult:
    """Aligned chains with the relabelling applied to every sample.

    risk_trace holds the Monte Carlo risk after each half-step (action
    update, then assignment) of every iteration.
    """

    chains: list[SampleChain]
    relabellings: list[list[Relabelling]]
    risk_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    action: Action | None = None


def _unit_rows(f: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    return np.divide(f, norms, out=f.copy(), where=norms > 0)


def relabel_chains(
    chains: list[SampleChain],
    normalize: bool = False,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    n_jobs: int = 1,
) -> RelabelResult:
    """Jointly align every sample of every chain.

    With normalize, rows of F are scaled to unit norm for computing the
    alignment only; outputs keep their original scale. Stored log joint
    values are carried over unchanged.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be positive")
    shapes = {c.shape for c in chains if len(c)}
    if len(shapes) > 1:
        ks = sorted({s[2] for s in shapes})
        if len(ks) > 1:
            raise RelabelError(f"chains disagree on the number of factors: {ks}")
        raise RelabelError(f"chains disagree on dimensions: {sorted(shapes)}")

    samples = [s.f for c in chains for s in c.samples]
    if not samples:
        logger.warning("no samples to relabel")
        return RelabelResult(chains=list(chains), relabellings=[[] for _ in chains], converged=True)
    if normalize:
        samples = [_unit_rows(f) for f in samples]

    k = samples[0].shape[0]
    current = [Relabelling.identity(k)] * len(samples)
    trace: list[float] = []
    converged = False
    action = None
    iteration = 0
    parallel = Parallel(n_jobs=n_jobs) if n_jobs != 1 else None

    for iteration in range(1, max_iterations + 1):
        action = update_action(samples, current)
        trace.append(risk(action, current, samples))

        if parallel is None:
            proposed = [_assign(action, f, r) for f, r in zip(samples, current)]
        else:
            proposed = parallel(delayed(_assign)(action, f, r) for f, r in zip(samples, current))
        trace.append(risk(action, proposed, samples))

        changed = sum(p != c for p, c in zip(proposed, current))
        logger.debug(f"iteration {iteration}: risk {trace[-1]:.10g}, {changed} changed")
        current = proposed
        if changed == 0:
            converged = True
            break

    if converged:
        logger.info(f"Relabelling reached a fixed point after {iteration} iteration(s)")
    else:
        logger.warning(f"Relabelling stopped at the cap of {max_iterations} iterations")

    aligned: list[SampleChain] = []
    per_chain: list[list[Relabelling]] = []
    offset = 0
    for chain in chains:
        rs = current[offset : offset + len(chain)]
        offset += len(chain)
        per_chain.append(rs)
        aligned.append(
            SampleChain(
                samples=[apply_relabelling(s, r) for s, r in zip(chain.samples, rs)],
                config=chain.config,
                log_joint=list(chain.log_joint),
                elapsed=list(chain.elapsed),
            )
        )

    return RelabelResult(
        chains=aligned,
        relabellings=per_chain,
        risk_trace=trace,
        iterations=iteration,
        converged=converged,
        action=action,
    )
