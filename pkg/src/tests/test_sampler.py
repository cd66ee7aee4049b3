import numpy as np
import pytest
from scipy import stats

from src.components.model import (
    Dataset,
    Observation,
    RandomEffect,
    Theta,
    gaussian_log_density,
    predictors,
    subject_log_likelihood,
)
from src.components.sampler import (
    ChainState,
    Kernel,
    KernelSchedule,
    adapt_omega,
    gibbs_update_w,
    initial_chain_state,
    log_accept_augmented,
    log_accept_original,
    mh_sweep,
    propose_kern1,
    propose_kern2,
    propose_kern3,
    refresh_w,
)
from src.utils.config import OMEGA_EIGEN_BOUNDS
from src.utils.exceptions import ContractError, StateError
from src.utils.numerics import RngStream


def _random_theta(rng):
    return Theta(rng.uniform(1.0, 30.0), rng.normal(), rng.normal(), rng.normal(size=1), rng.normal(size=1),
                 rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0))


def _replicated(observations, copies, dim_x=1, dim_z=1):
    # identical subjects evolve as independent chains inside one sweep
    return Dataset(tuple((f"S{i}", observations) for i in range(copies)), dim_x, dim_z)


def _sample_cov_bound(cov, n):
    diag = np.diag(cov)
    return 4.0 * np.sqrt((np.outer(diag, diag) + cov ** 2) / n)


def _augmented_target(theta, data, w, re_all):
    # sum over positive counts of ln p + ln Beta(w; u phi, (1-u) phi), zeros give ln(1-p)
    p, u = predictors(theta, re_all, data)
    pos = data.positive
    w_safe = np.where(pos, w, 0.5)
    per_obs = np.where(pos, np.log(p) + stats.beta.logpdf(w_safe, u * theta.phi, (1 - u) * theta.phi),
                       np.log1p(-p))
    return np.add.reduceat(per_obs, data.offsets)


class TestAcceptanceRatios:
    def test_original_matches_log_density_difference(self, rng, small_data):
        for _ in range(100):
            theta = _random_theta(rng)
            cur = rng.normal(size=(small_data.n_subjects, 2))
            cand = rng.normal(size=(small_data.n_subjects, 2))
            lik = subject_log_likelihood(theta, cand, small_data) - subject_log_likelihood(theta, cur, small_data)
            prior = gaussian_log_density(theta, cand) - gaussian_log_density(theta, cur)
            np.testing.assert_allclose(log_accept_original(theta, small_data, cur, cand, Kernel.PRIOR),
                                       lik, atol=1e-8)
            for kernel in (Kernel.RANDOM_WALK, Kernel.COMPONENT):
                np.testing.assert_allclose(log_accept_original(theta, small_data, cur, cand, kernel),
                                           lik + prior, atol=1e-8)

    def test_augmented_matches_log_density_difference(self, rng, small_data):
        for _ in range(100):
            theta = _random_theta(rng)
            cur = rng.normal(size=(small_data.n_subjects, 2))
            cand = rng.normal(size=(small_data.n_subjects, 2))
            w = np.where(small_data.positive, rng.uniform(0.05, 0.95, small_data.n_obs), np.nan)
            target = _augmented_target(theta, small_data, w, cand) - _augmented_target(theta, small_data, w, cur)
            prior = gaussian_log_density(theta, cand) - gaussian_log_density(theta, cur)
            np.testing.assert_allclose(log_accept_augmented(theta, small_data, w, cur, cand, Kernel.PRIOR),
                                       target, atol=1e-8)
            for kernel in (Kernel.RANDOM_WALK, Kernel.COMPONENT):
                np.testing.assert_allclose(log_accept_augmented(theta, small_data, w, cur, cand, kernel),
                                           target + prior, atol=1e-8)

    def test_identical_candidate_gives_zero(self, theta1, small_data):
        cur = np.full((small_data.n_subjects, 2), 0.3)
        for kernel in Kernel:
            np.testing.assert_array_equal(log_accept_original(theta1, small_data, cur, cur.copy(), kernel), 0.0)

    def test_augmented_needs_w(self, theta1, tiny_data):
        cur = np.zeros((2, 2))
        with pytest.raises(StateError):
            log_accept_augmented(theta1, tiny_data, None, cur, cur, Kernel.PRIOR)
        w = np.full(tiny_data.n_obs, np.nan)
        with pytest.raises(StateError):
            log_accept_augmented(theta1, tiny_data, w, cur, cur, Kernel.PRIOR)


class TestGibbs:
    def test_rejects_zero_count(self, theta1):
        with pytest.raises(ContractError):
            gibbs_update_w(RngStream(1), theta1, RandomEffect(0.0, 0.0), Observation(0, 5, (0.0,), (0.0,)))

    def test_scalar_draw_in_unit_interval(self, theta1):
        w = gibbs_update_w(RngStream(1), theta1, RandomEffect(0.0, 0.0), Observation(3, 5, (0.0,), (0.0,)))
        assert 0.0 < w < 1.0

    def test_conditional_is_beta(self, rng):
        for case in range(10):
            theta = Theta(rng.uniform(0.5, 20.0), 0.0, rng.normal(), [], [], 1.0, 1.0)
            s = int(rng.integers(1, 60))
            y = int(rng.integers(1, s + 1))
            n = 100_000
            data = Dataset((("A", tuple(Observation(y, s) for _ in range(n))),), 0, 0)
            re = np.array([[0.0, 0.2]])
            w = refresh_w(RngStream(case), theta, re, data)
            u = float(predictors(theta, re, data)[1][0])
            target = stats.beta(y + u * theta.phi, s - y + (1 - u) * theta.phi)
            assert stats.kstest(w, target.cdf).statistic < 0.01

    def test_refresh_marks_zeros(self, theta1, tiny_data):
        w = refresh_w(RngStream(2), theta1, np.zeros((2, 2)), tiny_data)
        assert np.all(np.isnan(w[~tiny_data.positive]))
        assert np.all((w[tiny_data.positive] > 0) & (w[tiny_data.positive] < 1))


class TestSweep:
    def test_initial_state(self, theta1, tiny_data):
        state = initial_chain_state(tiny_data, theta1, "augmented")
        np.testing.assert_allclose(state.re, [[-0.5, -0.5], [-0.5, -0.5]])
        np.testing.assert_allclose(state.omega, theta1.G() / 2)
        np.testing.assert_allclose(state.w[1], 3.5 / 11.0)

    def test_sweep_counts_and_immutability(self, theta1, small_data):
        state = initial_chain_state(small_data, theta1)
        before = state.re.copy()
        new = mh_sweep(RngStream(3), theta1, small_data, state, KernelSchedule(2, 3, 1))
        np.testing.assert_array_equal(state.re, before)
        n = small_data.n_subjects
        np.testing.assert_array_equal(new.sweep_counts[:, 1], [2 * n, 3 * n, n])
        assert np.all(new.sweep_counts[:, 0] <= new.sweep_counts[:, 1])

    def test_sweep_reproducible(self, theta1, small_data):
        state = initial_chain_state(small_data, theta1, "augmented")
        a = mh_sweep(RngStream(9), theta1, small_data, state, KernelSchedule(), "augmented")
        b = mh_sweep(RngStream(9), theta1, small_data, state, KernelSchedule(), "augmented")
        np.testing.assert_array_equal(a.re, b.re)
        np.testing.assert_array_equal(a.w, b.w)

    def test_kern3_moves_one_component(self):
        cur = np.zeros((500, 2))
        cand = propose_kern3(RngStream(4), cur)
        moved = (cand != 0).sum(axis=1)
        np.testing.assert_array_equal(moved, 1)

    def test_schedule_rejects_negative(self):
        with pytest.raises(ContractError):
            KernelSchedule(-1, 2, 2)

    def test_empty_schedule_only_refreshes_w(self, theta1, small_data):
        state = initial_chain_state(small_data, theta1, "augmented")
        new = mh_sweep(RngStream(6), theta1, small_data, state, KernelSchedule(0, 0, 0), "augmented")
        np.testing.assert_array_equal(new.re, state.re)
        pos = small_data.positive
        assert not np.array_equal(new.w[pos], state.w[pos])
        np.testing.assert_array_equal(new.sweep_counts, 0)

    @pytest.mark.slow
    def test_long_chain_matches_quadrature_moments(self, theta1, tiny_data):
        sub = tiny_data.subset([0])
        x, w = np.polynomial.hermite.hermgauss(60)
        grid = np.array([[a, b] for a in x for b in x])
        weights = np.array([wa * wb for wa in w for wb in w])
        scale = np.sqrt(2.0) * np.sqrt([theta1.sigma1_sq, theta1.sigma2_sq])
        pts = theta1.mu() + scale * grid
        lik = np.exp(subject_log_likelihood(theta1, pts[None], sub)[0])
        exact_mean = (weights * lik) @ pts / (weights * lik).sum()

        state = initial_chain_state(sub, theta1)
        stream = RngStream(5)
        draws = []
        for it in range(20000):
            state = mh_sweep(stream, theta1, sub, state, KernelSchedule())
            if it >= 1000:
                draws.append(state.re[0].copy())
        np.testing.assert_allclose(np.mean(draws, axis=0), exact_mean, atol=0.05)


class TestAdaptation:
    def _state(self, accepted, proposed, omega):
        counts = np.zeros((3, 2), dtype=np.int64)
        counts[Kernel.RANDOM_WALK - 1] = (accepted, proposed)
        return ChainState(re=np.zeros((1, 2)), omega=omega, sweep_counts=counts)

    def test_on_target_unchanged(self):
        omega = np.diag([0.3, 0.2])
        out = adapt_omega(self._state(3, 10, omega), 0.3)
        np.testing.assert_array_equal(out.omega, omega)

    def test_direction(self):
        omega = np.diag([0.3, 0.2])
        assert np.trace(adapt_omega(self._state(9, 10, omega), 0.3).omega) > np.trace(omega)
        assert np.trace(adapt_omega(self._state(0, 10, omega), 0.3).omega) < np.trace(omega)

    def test_eigenvalues_clamped(self):
        out = adapt_omega(self._state(0, 10, np.diag([1e-7, 1e-7])), 0.3)
        assert np.linalg.eigvalsh(out.omega).min() >= OMEGA_EIGEN_BOUNDS[0] * (1 - 1e-9)


class TestProposals:
    def test_kern1_draws_from_prior(self):
        theta = Theta(5.0, 0.4, -0.3, [0.1], [0.2], 0.8, 0.3)
        n = 100_000
        draws = propose_kern1(RngStream(21), theta, size=n)
        assert draws.shape == (n, 2)
        assert np.all(np.abs(draws.mean(axis=0) - theta.mu()) < 4.0 * np.sqrt(np.diag(theta.G()) / n))
        assert np.all(np.abs(np.cov(draws.T) - theta.G()) < _sample_cov_bound(theta.G(), n))

    def test_kern2_displacement_is_centred_with_omega(self, rng):
        n = 100_000
        omega = np.array([[0.5, 0.2], [0.2, 0.3]])
        current = 3.0 * rng.normal(size=(n, 2))
        step = propose_kern2(RngStream(22), current, omega) - current
        assert np.all(np.abs(step.mean(axis=0)) < 4.0 * np.sqrt(np.diag(omega) / n))
        assert np.all(np.abs(np.cov(step.T) - omega) < _sample_cov_bound(omega, n))


def _run_copies(theta, data, mode, sweeps, seed):
    state = initial_chain_state(data, theta, mode)
    stream = RngStream(seed)
    for _ in range(sweeps):
        state = mh_sweep(stream, theta, data, state, KernelSchedule(), mode)
    return state.re


def _grid_posterior(theta, sub, points=601):
    sd = np.sqrt([theta.sigma1_sq, theta.sigma2_sq])
    axes = [np.linspace(m - 6 * s, m + 6 * s, points) for m, s in zip(theta.mu(), sd)]
    ga, gb = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([ga.ravel(), gb.ravel()])
    log_post = subject_log_likelihood(theta, pts[None], sub)[0] + gaussian_log_density(theta, pts)
    mass = np.exp(log_post - log_post.max())
    return pts, mass / mass.sum()


def _binned_tv(samples, grid_values, grid_mass, bins=20):
    # equiprobable bins under the grid posterior
    order = np.argsort(grid_values)
    cdf = np.cumsum(grid_mass[order])
    inner = np.interp(np.arange(1, bins) / bins, cdf, grid_values[order])
    exact = np.bincount(np.searchsorted(inner, grid_values), weights=grid_mass, minlength=bins)
    observed = np.bincount(np.searchsorted(inner, samples), minlength=bins) / len(samples)
    return 0.5 * np.abs(observed - exact).sum()


@pytest.mark.slow
class TestInvariance:
    def test_augmented_and_original_share_the_marginal(self, theta1, tiny_data):
        _, observations = tiny_data.subjects[0]
        data = _replicated(observations, 20_000)
        original = _run_copies(theta1, data, "original", 300, 31)
        augmented = _run_copies(theta1, data, "augmented", 300, 32)
        for k in range(2):
            assert stats.ks_2samp(original[:, k], augmented[:, k]).statistic < 0.02

    @pytest.mark.parametrize("mode", ["original", "augmented"])
    def test_stationary_law_matches_grid_posterior(self, theta1, mode):
        observations = (Observation(0, 3, (0.3,), (-0.2,), 1), Observation(2, 3, (1.0,), (0.4,), 2))
        sub = Dataset((("A", observations),), 1, 1)
        pts, mass = _grid_posterior(theta1, sub)
        draws = _run_copies(theta1, _replicated(observations, 50_000), mode, 200, 33)
        for k in range(2):
            assert _binned_tv(draws[:, k], pts[:, k], mass) < 0.02
