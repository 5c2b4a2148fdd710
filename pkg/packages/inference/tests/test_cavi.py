"""Tests for coordinate-ascent variational inference."""

import numpy as np
import pytest
from inference.cavi import (
    VariationalState,
    compute_elbo,
    elbo_terms,
    load_variational_state,
    random_state,
    run_cavi,
    run_multi_trial,
    save_variational_state,
    sweep,
    update_alpha,
    update_f,
    update_lz,
    update_tau,
)
from scipy import stats
from scipy.special import digamma
from shared.errors import DimensionError
from shared.model import LOG_2PI, Dataset
from shared.schemas import CaviConfig, CaviInit, Hyperparameters


def make_vstate(data: Dataset, hyper: Hyperparameters, seed: int = 0) -> VariationalState:
    rng = np.random.default_rng(seed)
    v = random_state(data, hyper, rng)
    v.var_l = rng.uniform(0.2, 1.0, v.var_l.shape)
    v.var_f = rng.uniform(0.2, 1.0, v.var_f.shape)
    v.a_tau_hat = rng.uniform(1.0, 3.0, data.g)
    v.b_tau_hat = rng.uniform(1.0, 3.0, data.g)
    v.a_alpha_hat = rng.uniform(1.0, 3.0, hyper.k)
    v.b_alpha_hat = rng.uniform(1.0, 3.0, hyper.k)
    return v


def assert_states_close(a: VariationalState, b: VariationalState, rtol=1e-12, atol=1e-14):
    for name in ("eta", "mu_l", "var_l", "mu_f", "var_f", "a_tau_hat", "b_tau_hat",
                 "a_alpha_hat", "b_alpha_hat"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=rtol, atol=atol)


def monte_carlo_elbo(v: VariationalState, data: Dataset, hyper: Hyperparameters, draws: int, seed: int):
    """Mean and standard error of log p(Y, theta) - log q(theta) under draws from q."""
    rng = np.random.default_rng(seed)
    s = draws
    z = rng.random((s, *v.eta.shape)) < v.eta
    l = v.mu_l + np.sqrt(v.var_l) * rng.standard_normal((s, *v.eta.shape))  # noqa: E741
    f = v.mu_f + np.sqrt(v.var_f) * rng.standard_normal((s, *v.mu_f.shape))
    tau = rng.gamma(v.a_tau_hat, 1.0 / v.b_tau_hat, size=(s, v.g))
    alpha = rng.gamma(v.a_alpha_hat, 1.0 / v.b_alpha_hat, size=(s, v.k))

    lf = np.einsum("sik,skj->sij", np.where(z, l, 0.0), f)
    cell = 0.5 * (np.log(tau)[:, :, None] - LOG_2PI) - 0.5 * tau[:, :, None] * (data.y - lf) ** 2
    log_p = (cell * data.mask).sum(axis=(1, 2))
    slab = 0.5 * (np.log(alpha)[:, None, :] - LOG_2PI) - 0.5 * alpha[:, None, :] * l**2
    pi = hyper.pi_array()
    log_p += np.where(z, slab + np.log(pi), np.log1p(-pi)).sum(axis=(1, 2))
    log_p += (-0.5 * (f**2 + LOG_2PI)).sum(axis=(1, 2))
    log_p += stats.gamma.logpdf(tau, hyper.a_tau, scale=1 / hyper.b_tau).sum(axis=1)
    log_p += stats.gamma.logpdf(alpha, hyper.a_alpha, scale=1 / hyper.b_alpha).sum(axis=1)

    q_l = stats.norm.logpdf(l, v.mu_l, np.sqrt(v.var_l))
    log_q = np.where(z, np.log(v.eta) + q_l, np.log1p(-v.eta)).sum(axis=(1, 2))
    log_q += stats.norm.logpdf(f, v.mu_f, np.sqrt(v.var_f)).sum(axis=(1, 2))
    log_q += stats.gamma.logpdf(tau, v.a_tau_hat, scale=1 / v.b_tau_hat).sum(axis=1)
    log_q += stats.gamma.logpdf(alpha, v.a_alpha_hat, scale=1 / v.b_alpha_hat).sum(axis=1)

    sample = log_p - log_q
    return sample.mean(), sample.std(ddof=1) / np.sqrt(s)


class TestElbo:
    """Tests for the closed-form ELBO."""

    def test_matches_monte_carlo_scalar(self):
        """G = N = K = 1 with eta = 1."""
        data = Dataset(y=[[0.8]])
        hyper = Hyperparameters(pi=[0.5], a_tau=2.0, b_tau=1.5, a_alpha=2.0, b_alpha=1.0)
        v = VariationalState(
            eta=[[1.0]], mu_l=[[0.4]], var_l=[[0.3]], mu_f=[[1.1]], var_f=[[0.5]],
            a_tau_hat=[3.0], b_tau_hat=[2.0], a_alpha_hat=[2.5], b_alpha_hat=[1.5],
        )
        mean, se = monte_carlo_elbo(v, data, hyper, draws=400_000, seed=1)
        assert abs(compute_elbo(v, data, hyper) - mean) < 4 * se

    def test_matches_monte_carlo_with_mask(self):
        """Random 3 x 3 x 2 state with fractional eta and one masked cell."""
        rng = np.random.default_rng(2)
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 2] = False
        data = Dataset(y=rng.standard_normal((3, 3)), mask=mask)
        hyper = Hyperparameters(pi=[0.3, 0.7], a_tau=2.0, b_tau=2.0, a_alpha=1.5, b_alpha=1.0)
        v = make_vstate(data, hyper, seed=3)
        mean, se = monte_carlo_elbo(v, data, hyper, draws=400_000, seed=4)
        assert abs(compute_elbo(v, data, hyper) - mean) < 4 * se

    def test_degenerate_eta_has_no_bernoulli_entropy(self, small_problem):
        data, hyper, _ = small_problem
        v = make_vstate(data, hyper)
        v.eta = (v.eta > 0.5).astype(float)
        expected = (0.5 * v.eta * (LOG_2PI + np.log(v.var_l) + 1.0)).sum()
        assert elbo_terms(v, data, hyper)["entropy_lz"] == pytest.approx(expected, rel=1e-12)

    def test_masked_cell_does_not_contribute(self, small_problem):
        """The likelihood term ignores the stored value of a masked cell."""
        data, hyper, _ = small_problem
        mask = np.ones(data.shape, dtype=bool)
        mask[2, 3] = False
        y = data.y.copy()
        v = make_vstate(data, hyper)
        a = compute_elbo(v, Dataset(y=y, mask=mask), hyper)
        y[2, 3] = 1e6
        b = compute_elbo(v, Dataset(y=y, mask=mask), hyper)
        assert a == b

    def test_dimension_mismatch(self, small_problem):
        data, hyper, _ = small_problem
        v = make_vstate(data, hyper)
        with pytest.raises(DimensionError):
            compute_elbo(v, data, Hyperparameters(pi=[0.5]))


class TestCoordinateUpdates:
    """Tests for single-coordinate updates."""

    def test_lz_update_is_local_optimum(self, masked_problem):
        """Perturbing the updated (mu_l, var_l, eta) never increases the ELBO."""
        data, hyper, _ = masked_problem
        v = update_lz(make_vstate(data, hyper), data, hyper, 4, 0)
        best = compute_elbo(v, data, hyper)
        for name in ("mu_l", "var_l", "eta"):
            for step in (-1e-3, 1e-3):
                probe = v.copy()
                value = getattr(probe, name)[4, 0] + step
                getattr(probe, name)[4, 0] = np.clip(value, 1e-9, 1 - 1e-9) if name == "eta" else value
                assert compute_elbo(probe, data, hyper) <= best + 1e-9

    def test_f_update_is_local_optimum(self, masked_problem):
        data, hyper, _ = masked_problem
        col = int(np.flatnonzero(~data.mask.all(axis=0))[0])
        v = update_f(make_vstate(data, hyper), data, hyper, 1, col)
        best = compute_elbo(v, data, hyper)
        for name in ("mu_f", "var_f"):
            for step in (-1e-3, 1e-3):
                probe = v.copy()
                getattr(probe, name)[1, col] += step
                assert compute_elbo(probe, data, hyper) <= best + 1e-9

    def test_updates_are_idempotent(self, masked_problem):
        data, hyper, _ = masked_problem
        v = make_vstate(data, hyper)
        once = update_lz(v, data, hyper, 2, 1)
        assert_states_close(once, update_lz(once, data, hyper, 2, 1))
        once = update_f(v, data, hyper, 0, 5)
        assert_states_close(once, update_f(once, data, hyper, 0, 5))
        once = update_tau(v, data, hyper, 3)
        assert_states_close(once, update_tau(once, data, hyper, 3))
        once = update_alpha(v, hyper, 2)
        assert_states_close(once, update_alpha(once, hyper, 2))

    def test_dense_factor_eta_is_one(self, small_problem):
        data, _, _ = small_problem
        hyper = Hyperparameters(pi=[0.5, 0.5, 1.0])
        v = make_vstate(data, hyper)
        v.eta[:, 2] = 0.3
        out = update_lz(v, data, hyper, 6, 2)
        assert out.eta[6, 2] == 1.0
        assert v.eta[6, 2] == 0.3

    def test_f_reverts_to_prior_without_loadings(self, small_problem):
        data, hyper, _ = small_problem
        v = make_vstate(data, hyper)
        v.eta[:] = 0.0
        out = update_f(v, data, hyper, 1, 4)
        assert out.mu_f[1, 4] == 0.0
        assert out.var_f[1, 4] == 1.0

    def test_alpha_reverts_to_prior_without_loadings(self, small_problem):
        data, hyper, _ = small_problem
        v = make_vstate(data, hyper)
        v.eta[:, 0] = 0.0
        out = update_alpha(v, hyper, 0)
        assert out.a_alpha_hat[0] == hyper.a_alpha
        assert out.b_alpha_hat[0] == hyper.b_alpha

    def test_tau_shape_counts_observed_entries(self, masked_problem):
        data, hyper, _ = masked_problem
        v = make_vstate(data, hyper)
        for i in range(data.g):
            v = update_tau(v, data, hyper, i)
        np.testing.assert_allclose(v.a_tau_hat, hyper.a_tau + 0.5 * data.mask.sum(axis=1))

    def test_tau_rate_matches_monte_carlo(self):
        """Zero data and zero means leave only variance terms in the rate."""
        data = Dataset(y=np.zeros((1, 2)))
        hyper = Hyperparameters(pi=[0.6, 0.4], a_tau=1.0, b_tau=1.0)
        v = VariationalState(
            eta=[[0.7, 0.4]], mu_l=[[0.0, 0.0]], var_l=[[0.5, 1.5]],
            mu_f=np.zeros((2, 2)), var_f=[[1.0, 0.5], [2.0, 0.3]],
            a_tau_hat=[1.0], b_tau_hat=[1.0], a_alpha_hat=[1.0, 1.0], b_alpha_hat=[1.0, 1.0],
        )
        out = update_tau(v, data, hyper, 0)

        rng = np.random.default_rng(0)
        s = 100_000
        z = rng.random((s, 2)) < v.eta[0]
        l = np.where(z, np.sqrt(v.var_l[0]) * rng.standard_normal((s, 2)), 0.0)  # noqa: E741
        f = np.sqrt(v.var_f) * rng.standard_normal((s, 2, 2))
        sq = np.einsum("sk,skj->sj", l, f) ** 2
        expected = hyper.b_tau + 0.5 * sq.sum(axis=1)
        se = expected.std(ddof=1) / np.sqrt(s)
        assert abs(out.b_tau_hat[0] - expected.mean()) < 4 * se

    def test_updates_leave_input_untouched(self, small_problem):
        data, hyper, _ = small_problem
        v = make_vstate(data, hyper)
        before = v.copy()
        sweep(v, data, hyper)
        assert_states_close(v, before, rtol=0, atol=0)


class TestRunCavi:
    """Tests for full CAVI runs."""

    def test_zero_sweeps_returns_initialisation(self, small_problem):
        data, hyper, _ = small_problem
        config = CaviConfig(max_sweeps=0, seed=5)
        result = run_cavi(data, hyper, config)
        assert result.elbo_trace == []
        assert result.sweeps == 0
        expected = random_state(data, hyper, np.random.default_rng(5))
        assert_states_close(result.state, expected, rtol=0, atol=0)

    def test_deterministic(self, masked_problem):
        data, hyper, _ = masked_problem
        config = CaviConfig(max_sweeps=15, seed=8)
        a = run_cavi(data, hyper, config)
        b = run_cavi(data, hyper, config)
        assert a.elbo_trace == b.elbo_trace
        assert_states_close(a.state, b.state, rtol=0, atol=0)

    def test_elbo_is_monotone(self, masked_problem):
        data, hyper, _ = masked_problem
        result = run_cavi(data, hyper, CaviConfig(max_sweeps=60, seed=1))
        trace = np.array(result.elbo_trace)
        assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]))

    def test_constraints_hold_after_many_sweeps(self, small_problem):
        data, hyper, _ = small_problem
        result = run_cavi(data, hyper, CaviConfig(max_sweeps=40, seed=2))
        result.state.check()

    def test_converges_with_loose_tolerance(self, small_problem):
        data, hyper, _ = small_problem
        result = run_cavi(data, hyper, CaviConfig(max_sweeps=500, abs_tol=1e-3, rel_tol=0, seed=3))
        assert result.converged
        assert result.sweeps == len(result.elbo_trace)
        assert abs(result.elbo_trace[-1] - result.elbo_trace[-2]) < 1e-3

    def test_elbo_every(self, small_problem):
        """The ELBO is evaluated every elbo_every sweeps and after the last."""
        data, hyper, _ = small_problem
        config = CaviConfig(max_sweeps=7, elbo_every=3, abs_tol=1e-300, rel_tol=0, seed=3)
        result = run_cavi(data, hyper, config)
        assert len(result.elbo_trace) == 3

    def test_supplied_start(self, small_problem):
        data, hyper, _ = small_problem
        start = make_vstate(data, hyper)
        config = CaviConfig(max_sweeps=0, init=CaviInit.SUPPLIED)
        result = run_cavi(data, hyper, config, init_state=start)
        assert_states_close(result.state, start, rtol=0, atol=0)
        assert result.state is not start

    def test_supplied_start_required(self, small_problem):
        data, hyper, _ = small_problem
        with pytest.raises(ValueError, match="init_state"):
            run_cavi(data, hyper, CaviConfig(init=CaviInit.SUPPLIED))


class TestMultiTrial:
    """Tests for best-of-N trials."""

    def test_single_trial_equals_run_cavi(self, small_problem):
        data, hyper, _ = small_problem
        config = CaviConfig(max_sweeps=10, seed=4)
        multi = run_multi_trial(data, hyper, config, trials=1)
        single = run_cavi(data, hyper, config)
        assert multi.best.elbo_trace == single.elbo_trace

    def test_identical_seeds_pick_first(self, small_problem):
        data, hyper, _ = small_problem
        multi = run_multi_trial(data, hyper, CaviConfig(max_sweeps=5), trials=2, seeds=[3, 3])
        assert multi.elbos[0] == multi.elbos[1]
        assert multi.best_index == 0

    def test_best_dominates_every_trial(self, small_problem):
        data, hyper, _ = small_problem
        multi = run_multi_trial(data, hyper, CaviConfig(max_sweeps=20, seed=1), trials=4)
        assert multi.best.elbo == max(multi.elbos)
        assert [t.seed for t in multi.trials] == [1, 2, 3, 4]

    def test_zero_trials(self, small_problem):
        data, hyper, _ = small_problem
        with pytest.raises(ValueError, match="trials"):
            run_multi_trial(data, hyper, CaviConfig(), trials=0)

    def test_early_stop_continues_only_leader(self, small_problem):
        data, hyper, _ = small_problem
        config = CaviConfig(max_sweeps=30, abs_tol=1e-300, rel_tol=0, seed=6)
        multi = run_multi_trial(data, hyper, config, trials=3, early_stop_sweeps=5)
        for t, trial in enumerate(multi.trials):
            expected = 30 if t == multi.best_index else 5
            assert trial.sweeps == expected
            assert len(trial.elbo_trace) == expected
        trace = np.array(multi.best.elbo_trace)
        assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]))


class TestMonitor:
    """Tests for snapshot rows recorded during a run."""

    def test_rows_every_interval_and_at_the_end(self, small_problem):
        data, hyper, _ = small_problem
        config = CaviConfig(max_sweeps=7, abs_tol=1e-300, rel_tol=0, seed=1)
        result = run_cavi(
            data, hyper, config, monitor=lambda v: {"eta_sum": float(v.eta.sum())}, monitor_every=3
        )
        assert [row["sweep"] for row in result.snapshots] == [3.0, 6.0, 7.0]
        assert result.snapshots[-1]["eta_sum"] == float(result.state.eta.sum())
        times = [row["elapsed"] for row in result.snapshots]
        assert times == sorted(times)

    def test_interval_longer_than_run_gives_one_row(self, small_problem):
        data, hyper, _ = small_problem
        config = CaviConfig(max_sweeps=4, abs_tol=1e-300, rel_tol=0)
        result = run_cavi(data, hyper, config, monitor=lambda v: {}, monitor_every=100)
        assert [row["sweep"] for row in result.snapshots] == [4.0]

    def test_failing_monitor_does_not_abort(self, small_problem):
        data, hyper, _ = small_problem

        def broken(v):
            raise RuntimeError("boom")

        result = run_cavi(data, hyper, CaviConfig(max_sweeps=3), monitor=broken)
        assert result.sweeps == 3
        assert result.snapshots == []

    def test_early_stop_rows_continue_the_clock(self, small_problem):
        data, hyper, _ = small_problem
        config = CaviConfig(max_sweeps=8, abs_tol=1e-300, rel_tol=0, seed=2)
        multi = run_multi_trial(
            data, hyper, config, trials=2, early_stop_sweeps=3, monitor=lambda v: {}, monitor_every=2
        )
        rows = multi.best.snapshots
        assert [row["sweep"] for row in rows] == [2.0, 3.0, 5.0, 7.0, 8.0]
        times = [row["elapsed"] for row in rows]
        assert times == sorted(times)


class TestPersistence:
    """Tests for saving and loading variational states."""

    def test_exact_round_trip(self, masked_problem, tmp_path):
        data, hyper, _ = masked_problem
        state = run_cavi(data, hyper, CaviConfig(max_sweeps=3, seed=9)).state
        save_variational_state(tmp_path / "state", state)
        loaded = load_variational_state(tmp_path / "state")
        assert_states_close(loaded, state, rtol=0, atol=0)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_variational_state(tmp_path / "absent")


class TestVaguePrior:
    """Runs under the default Gamma(1e-3, 1e-3) priors."""

    def test_random_start_fits_gamma_factors(self, vague_problem):
        data, hyper, _ = vague_problem
        v = random_state(data, hyper, np.random.default_rng(0))
        e_log_alpha = digamma(v.a_alpha_hat) - np.log(v.b_alpha_hat)
        assert np.all(np.abs(e_log_alpha) < 5.0)
        assert np.all(v.a_tau_hat > hyper.a_tau)
        v.check()

    def test_first_block_keeps_sparse_loadings(self, vague_problem):
        data, hyper, _ = vague_problem
        result = run_cavi(data, hyper, CaviConfig(max_sweeps=1, seed=0))
        assert result.state.eta.min() > 1e-3

    def test_recovers_signal(self, vague_problem):
        data, hyper, truth = vague_problem
        result = run_cavi(data, hyper, CaviConfig(max_sweeps=3000, seed=0))
        assert result.sweeps > 2
        v = result.state
        assert v.eta[:, 2].mean() > 0.8
        lf = truth.l @ truth.f
        error = np.linalg.norm(v.mean_l @ v.mu_f - lf) / np.linalg.norm(lf)
        assert error < 0.4


@pytest.mark.slow
class TestElboMonotoneRandomised:
    """The ELBO never decreases across randomised problems and priors."""

    @pytest.mark.parametrize("seed", range(50))
    def test_monotone(self, seed):
        rng = np.random.default_rng(1000 + seed)
        g, n, k = rng.integers(4, 16), rng.integers(3, 12), rng.integers(1, 4)
        y = rng.standard_normal((g, n)) * rng.uniform(0.5, 3.0)
        mask = rng.random((g, n)) > rng.uniform(0.0, 0.3)
        mask[:, 0] = True
        mask[0, :] = True
        pi = list(rng.uniform(0.05, 0.95, k))
        if rng.random() < 0.5:
            pi[-1] = 1.0
        gamma = 10.0 ** rng.uniform(-3, 1)
        hyper = Hyperparameters(pi=pi, a_tau=gamma, b_tau=gamma, a_alpha=gamma, b_alpha=gamma)
        result = run_cavi(
            Dataset(y=y, mask=mask), hyper,
            CaviConfig(max_sweeps=40, abs_tol=1e-300, rel_tol=0, seed=seed),
        )
        trace = np.array(result.elbo_trace)
        assert np.all(np.isfinite(trace))
        assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]))
