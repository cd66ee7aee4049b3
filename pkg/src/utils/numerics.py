"""
Special functions and reproducible random variate streams.

Special functions are thin validating wrappers around scipy.special: every
function accepts scalars or arrays and raises DomainError outside its domain
instead of returning nan/inf.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from src.utils.config import PROB_CLAMP
from src.utils.exceptions import DecompositionError, DomainError


def _check_positive(name, x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"{name} requires finite positive arguments")
    return arr


def _unwrap(value):
    return float(value) if np.ndim(value) == 0 else value


def log_gamma(x):
    """ln Gamma(x) for x > 0"""
    return _unwrap(special.gammaln(_check_positive("log_gamma", x)))


def log_beta(p, q):
    """ln B(p, q) for p, q > 0"""
    p = _check_positive("log_beta", p)
    q = _check_positive("log_beta", q)
    return _unwrap(special.betaln(p, q))


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0"""
    return _unwrap(special.digamma(_check_positive("digamma", x)))


def trigamma(x):
    """psi'(x) for x > 0"""
    return _unwrap(special.polygamma(1, _check_positive("trigamma", x)))


def logit(p):
    """log(p / (1 - p)) for 0 < p < 1"""
    arr = np.asarray(p, dtype=float)
    if not np.all((arr > 0) & (arr < 1)):
        raise DomainError("logit requires probabilities strictly inside (0, 1)")
    return _unwrap(special.logit(arr))


def expit(x):
    """Logistic function; stable for any finite x"""
    return _unwrap(special.expit(np.asarray(x, dtype=float)))


def log_expit(x):
    """log(expit(x)) without underflow for large negative x"""
    return _unwrap(special.log_expit(np.asarray(x, dtype=float)))


def clamp_probability(p, eps=PROB_CLAMP):
    """Keep probabilities away from {0, 1} so their logs stay finite"""
    return np.clip(p, eps, 1.0 - eps)


@dataclass
class RngStream:
    """
    Reproducible random stream identified by (seed, stream_id)

    Streams are derived with numpy's SeedSequence spawn keys, so identical
    ids give bit-identical sequences and distinct ids give independent ones.
    A stream is single-owner: hand it to one thread at a time.
    """
    seed: int
    stream_id: int = 0
    parent_key: tuple = ()
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.stream_id < 0:
            raise DomainError("stream_id must be non-negative")
        key = tuple(self.parent_key) + (int(self.stream_id),)
        seq = np.random.SeedSequence(int(self.seed), spawn_key=key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    @property
    def key(self):
        return tuple(self.parent_key) + (int(self.stream_id),)

    def child(self, stream_id):
        """Independent sub-stream, e.g. one per replicate or per chain"""
        return RngStream(self.seed, stream_id, parent_key=self.key)

    def uniform(self, size=None):
        return self.generator.random(size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)


def _covariance_factor(cov):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, atol=1e-12):
        raise DecompositionError("covariance must be a symmetric square matrix")
    if not np.all(np.isfinite(cov)):
        raise DecompositionError("covariance has non-finite entries")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # positive semi-definite fallback (e.g. a degenerate zero matrix)
        w, v = np.linalg.eigh(cov)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise DecompositionError("covariance is not positive semi-definite") from None
        return v * np.sqrt(np.clip(w, 0.0, None))


def sample_normal(stream, mean, cov, size=None):
    """
    Multivariate normal draw(s) N(mean, cov)

    Args:
        stream: RngStream
        mean: Mean vector of length d
        cov: d x d symmetric positive semi-definite matrix
        size: Number of draws; None for a single vector

    Returns:
        Array of shape (d,) or (size, d)
    """
    mean = np.asarray(mean, dtype=float)
    factor = _covariance_factor(cov)
    n = 1 if size is None else int(size)
    eps = stream.standard_normal((n, mean.shape[-1]))
    draws = mean + eps @ factor.T
    return draws[0] if size is None else draws


def _log_gamma_variate(stream, shape):
    # Gamma(k) = Gamma(k + 1) * U^(1/k) keeps small shapes from underflowing
    shape = np.asarray(shape, dtype=float)
    boosted = np.where(shape < 1.0, shape + 1.0, shape)
    g = stream.generator.standard_gamma(boosted)
    log_g = np.log(g)
    small = shape < 1.0
    if np.any(small):
        u = stream.generator.random(shape.shape)
        log_g = np.where(small, log_g + np.log(u) / shape, log_g)
    return log_g


def sample_beta(stream, p, q):
    """
    Beta(p, q) draw(s) built from two Gamma variates

    p and q broadcast against each other; the result is strictly inside (0, 1).
    """
    p = _check_positive("sample_beta", p)
    q = _check_positive("sample_beta", q)
    p, q = np.broadcast_arrays(p, q)
    w = special.expit(_log_gamma_variate(stream, p) - _log_gamma_variate(stream, q))
    return _unwrap(clamp_probability(w, np.finfo(float).tiny))


def sample_student_t(stream, df, size=None):
    """Student t_df draw(s)"""
    _check_positive("sample_student_t", df)
    return stream.generator.standard_t(df, size)


def sample_uniform_int(stream, lo, hi, size=None):
    """Uniform integer(s) on {lo, ..., hi}"""
    if lo > hi:
        raise DomainError(f"empty integer range [{lo}, {hi}]")
    return stream.generator.integers(lo, hi, size=size, endpoint=True)
