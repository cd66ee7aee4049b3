import numpy as np
import pytest
from scipy import stats

from src.utils.exceptions import DecompositionError, DomainError
from src.utils.numerics import (
    RngStream,
    clamp_probability,
    digamma,
    expit,
    log_beta,
    log_expit,
    log_gamma,
    logit,
    sample_beta,
    sample_normal,
    sample_student_t,
    sample_uniform_int,
    trigamma,
)


class TestSpecialFunctions:
    def test_log_gamma_known_values(self):
        assert log_gamma(5.0) == pytest.approx(np.log(24.0), abs=1e-12)
        assert log_gamma(0.5) == pytest.approx(0.5 * np.log(np.pi), abs=1e-12)

    def test_log_gamma_rejects_non_positive(self):
        with pytest.raises(DomainError):
            log_gamma(0.0)
        with pytest.raises(DomainError):
            log_gamma(np.array([1.0, -2.0]))

    def test_log_beta(self):
        assert log_beta(2.0, 3.0) == pytest.approx(np.log(1.0 / 12.0), abs=1e-12)

    def test_digamma_trigamma_at_one(self):
        assert digamma(1.0) == pytest.approx(-np.euler_gamma, abs=1e-12)
        assert trigamma(1.0) == pytest.approx(np.pi ** 2 / 6.0, abs=1e-12)

    def test_digamma_recurrence(self, rng):
        x = rng.uniform(0.1, 50.0, size=100)
        np.testing.assert_allclose(digamma(x + 1), digamma(x) + 1.0 / x, rtol=1e-12)

    def test_logit_expit_inverse(self):
        p = np.linspace(0.01, 0.99, 25)
        np.testing.assert_allclose(expit(logit(p)), p, rtol=1e-12)

    def test_logit_domain(self):
        with pytest.raises(DomainError):
            logit(0.0)
        with pytest.raises(DomainError):
            logit(1.0)

    def test_log_expit_no_underflow(self):
        assert log_expit(-800.0) == pytest.approx(-800.0)
        assert np.isfinite(log_expit(800.0))

    def test_clamp_probability(self):
        out = clamp_probability(np.array([0.0, 0.5, 1.0]))
        assert out[0] > 0 and out[2] < 1 and out[1] == 0.5


class TestRngStream:
    def test_same_ids_reproduce(self):
        a = RngStream(42, 3).uniform(10)
        b = RngStream(42, 3).uniform(10)
        np.testing.assert_array_equal(a, b)

    def test_distinct_ids_differ(self):
        assert not np.array_equal(RngStream(42, 3).uniform(10), RngStream(42, 4).uniform(10))
        assert not np.array_equal(RngStream(42, 3).uniform(10), RngStream(43, 3).uniform(10))

    def test_child_keys(self):
        child = RngStream(1, 5).child(2)
        assert child.key == (5, 2)
        np.testing.assert_array_equal(child.uniform(3), RngStream(1, 2, parent_key=(5,)).uniform(3))

    def test_negative_stream_id(self):
        with pytest.raises(DomainError):
            RngStream(1, -1)


class TestSamplers:
    def test_sample_normal_moments(self):
        cov = np.array([[1.0, 0.3], [0.3, 0.5]])
        draws = sample_normal(RngStream(1), [1.0, -2.0], cov, size=40000)
        np.testing.assert_allclose(draws.mean(axis=0), [1.0, -2.0], atol=0.03)
        np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.03)

    def test_sample_normal_degenerate_covariance(self):
        draw = sample_normal(RngStream(1), [0.5, 0.5], np.zeros((2, 2)))
        np.testing.assert_array_equal(draw, [0.5, 0.5])

    def test_sample_normal_rejects_indefinite(self):
        with pytest.raises(DecompositionError):
            sample_normal(RngStream(1), [0.0, 0.0], np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_sample_beta_matches_distribution(self):
        draws = sample_beta(RngStream(3), np.full(20000, 2.5), np.full(20000, 4.0))
        assert stats.kstest(draws, stats.beta(2.5, 4.0).cdf).statistic < 0.015

    def test_sample_beta_small_shapes_stay_inside(self):
        draws = sample_beta(RngStream(4), np.full(5000, 0.01), np.full(5000, 0.02))
        assert np.all((draws > 0) & (draws < 1))

    def test_sample_student_t(self):
        draws = sample_student_t(RngStream(5), 5.0, size=20000)
        assert stats.kstest(draws, stats.t(5.0).cdf).statistic < 0.015

    def test_uniform_int_inclusive(self):
        draws = sample_uniform_int(RngStream(6), 0, 1, size=2000)
        assert set(np.unique(draws)) == {0, 1}

    def test_uniform_int_empty_range(self):
        with pytest.raises(DomainError):
            sample_uniform_int(RngStream(6), 3, 2)
