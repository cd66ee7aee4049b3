"""
ZIBBMR data model.

Y_it is a structural zero with probability 1 - p_it and beta-binomial
BB(S_it, u_it*phi, (1 - u_it)*phi) otherwise, with

    logit(p_it) = a_i + x_it' alpha
    logit(u_it) = b_i + z_it' beta
    (a_i, b_i) ~ N((a, b), diag(sigma1^2, sigma2^2))

Observed zeros are attributed entirely to the structural component: a zero
contributes ln(1 - p_it) and the beta-binomial term enters only for Y_it > 0.
Functions come in two flavours: scalar ones taking a single Observation and
RandomEffect, and vectorised ones taking a Dataset and an (N, 2) array of
random effects (optionally (N, K, 2) for K draws per subject).
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special

from src.utils.exceptions import ContractError, DomainError, ShapeError
from src.utils.numerics import clamp_probability, expit

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Observation:
    """One measurement occasion: count y out of s trials with covariates x, z"""
    y: int
    s: int
    x: tuple = ()
    z: tuple = ()
    occasion: int = 0

    def __post_init__(self):
        if self.s < 1:
            raise ContractError(f"trial total must be at least 1, got {self.s}")
        if not 0 <= self.y <= self.s:
            raise ContractError(f"count {self.y} outside [0, {self.s}]")
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        object.__setattr__(self, "z", tuple(float(v) for v in self.z))


def _as_design(values, n_rows):
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return np.zeros((n_rows, 0))
    return arr.reshape(n_rows, -1)


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Longitudinal observations grouped by subject

    Args:
        subjects: Ordered sequence of (subject_id, sequence of Observation)
        dim_x: Length of every zero-component covariate vector
        dim_z: Length of every mean-component covariate vector
    """
    subjects: tuple
    dim_x: int
    dim_z: int

    def __post_init__(self):
        subjects = tuple((str(sid), tuple(obs)) for sid, obs in self.subjects)
        if not subjects:
            raise ContractError("a dataset needs at least one subject")
        for sid, obs in subjects:
            if not obs:
                raise ContractError(f"subject {sid} has no observations")
            for o in obs:
                if len(o.x) != self.dim_x or len(o.z) != self.dim_z:
                    raise ShapeError(
                        f"subject {sid}: covariate lengths ({len(o.x)}, {len(o.z)}) "
                        f"do not match ({self.dim_x}, {self.dim_z})"
                    )
        object.__setattr__(self, "subjects", subjects)

    @classmethod
    def from_arrays(cls, subject_ids, y, s, x, z, occasion=None):
        """
        Build a dataset from flat per-observation arrays

        Rows sharing a subject id are grouped in order of first appearance;
        within a subject the row order is kept.
        """
        y = np.asarray(y, dtype=int)
        s = np.asarray(s, dtype=int)
        x = _as_design(x, len(y))
        z = _as_design(z, len(y))
        occasion = np.arange(len(y)) if occasion is None else np.asarray(occasion, dtype=int)
        groups = {}
        for row, sid in enumerate(subject_ids):
            groups.setdefault(str(sid), []).append(
                Observation(int(y[row]), int(s[row]), tuple(x[row]), tuple(z[row]), int(occasion[row]))
            )
        return cls(tuple(groups.items()), x.shape[1], z.shape[1])

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def subject_ids(self):
        return [sid for sid, _ in self.subjects]

    @cached_property
    def n_obs(self):
        return sum(len(obs) for _, obs in self.subjects)

    @cached_property
    def counts(self):
        """T_i for every subject"""
        return np.array([len(obs) for _, obs in self.subjects])

    @cached_property
    def offsets(self):
        """Index of each subject's first row in the flat arrays"""
        return np.concatenate(([0], np.cumsum(self.counts)[:-1]))

    @cached_property
    def subject(self):
        """Subject index of every flat row"""
        return np.repeat(np.arange(self.n_subjects), self.counts)

    @cached_property
    def y(self):
        return np.array([o.y for _, obs in self.subjects for o in obs], dtype=float)

    @cached_property
    def s(self):
        return np.array([o.s for _, obs in self.subjects for o in obs], dtype=float)

    @cached_property
    def x(self):
        return np.array([o.x for _, obs in self.subjects for o in obs], dtype=float).reshape(self.n_obs, self.dim_x)

    @cached_property
    def z(self):
        return np.array([o.z for _, obs in self.subjects for o in obs], dtype=float).reshape(self.n_obs, self.dim_z)

    @cached_property
    def occasion(self):
        return np.array([o.occasion for _, obs in self.subjects for o in obs], dtype=int)

    @cached_property
    def positive(self):
        return self.y > 0

    @cached_property
    def log_binom_coef(self):
        return special.gammaln(self.s + 1) - special.gammaln(self.y + 1) - special.gammaln(self.s - self.y + 1)

    def subset(self, indices):
        """Dataset restricted to the given subject positions"""
        return Dataset(tuple(self.subjects[i] for i in indices), self.dim_x, self.dim_z)


def param_names(dim_x, dim_z):
    """Names of the parameter vector (phi, a, b, alpha, beta, sigma1^2, sigma2^2)"""
    return (["phi", "a", "b"]
            + [f"alpha_{j + 1}" for j in range(dim_x)]
            + [f"beta_{j + 1}" for j in range(dim_z)]
            + ["sigma1_sq", "sigma2_sq"])


@dataclass(frozen=True, eq=False)
class Theta:
    """Full parameter vector with link-scale accessors"""
    phi: float
    a: float
    b: float
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma1_sq: float = 1.0
    sigma2_sq: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        for name in ("phi", "sigma1_sq", "sigma2_sq"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be finite and positive, got {value}")

    @classmethod
    def from_sigma_scale(cls, phi, a, b, alpha, beta, sigma1, sigma2):
        """Build from standard deviations as reported in tables and config files"""
        return cls(phi, a, b, alpha, beta, float(sigma1) ** 2, float(sigma2) ** 2)

    @classmethod
    def from_dict(cls, d):
        """Inverse of to_sigma_dict"""
        return cls.from_sigma_scale(d["phi"], d["a"], d["b"], d["alpha"], d["beta"], d["sigma1"], d["sigma2"])

    @classmethod
    def from_vector(cls, vec, dim_x, dim_z):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1], vec[2], vec[3:3 + dim_x], vec[3 + dim_x:3 + dim_x + dim_z],
                   vec[-2], vec[-1])

    def to_vector(self):
        return np.concatenate(([self.phi, self.a, self.b], self.alpha, self.beta,
                               [self.sigma1_sq, self.sigma2_sq]))

    def to_sigma_dict(self):
        return {
            "phi": float(self.phi), "a": float(self.a), "b": float(self.b),
            "alpha": [float(v) for v in self.alpha], "beta": [float(v) for v in self.beta],
            "sigma1": float(np.sqrt(self.sigma1_sq)), "sigma2": float(np.sqrt(self.sigma2_sq)),
        }

    def names(self):
        return param_names(len(self.alpha), len(self.beta))

    def as_named(self):
        return dict(zip(self.names(), self.to_vector()))

    def mu(self):
        return np.array([self.a, self.b])

    def G(self):
        return np.diag([self.sigma1_sq, self.sigma2_sq])

    def check_dims(self, dim_x, dim_z):
        if len(self.alpha) != dim_x or len(self.beta) != dim_z:
            raise ShapeError(
                f"theta has ({len(self.alpha)}, {len(self.beta)}) coefficients, data has ({dim_x}, {dim_z}) covariates"
            )


@dataclass(frozen=True)
class RandomEffect:
    """Subject-level random intercepts (a_i, b_i)"""
    a_i: float
    b_i: float

    def as_array(self):
        return np.array([self.a_i, self.b_i])


# --- scalar operations -----------------------------------------------------

def linear_predictors(theta, re, obs):
    """
    Zero-component and mean-component probabilities of one observation

    Returns:
        tuple: (p_it, u_it), each clamped strictly inside (0, 1)
    """
    if len(obs.x) != len(theta.alpha) or len(obs.z) != len(theta.beta):
        raise ShapeError("covariate and coefficient lengths differ")
    p = expit(re.a_i + float(np.dot(obs.x, theta.alpha)))
    u = expit(re.b_i + float(np.dot(obs.z, theta.beta)))
    return float(clamp_probability(p)), float(clamp_probability(u))


def betabin_log_pmf(y, s, u, phi):
    """
    Beta-binomial log-pmf ln[C(s,y) B(y+u*phi, s-y+(1-u)*phi) / B(u*phi, (1-u)*phi)]

    Broadcasts over array arguments.
    """
    y = np.asarray(y, dtype=float)
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(y < 0) or np.any(y > s):
        raise DomainError("betabin_log_pmf requires 0 <= y <= s")
    if np.any(u <= 0) or np.any(u >= 1):
        raise DomainError("betabin_log_pmf requires 0 < u < 1")
    if np.any(np.asarray(phi) <= 0):
        raise DomainError("betabin_log_pmf requires phi > 0")
    out = _betabin_log_pmf(y, s, u, phi)
    return float(out) if out.ndim == 0 else out


def _betabin_log_pmf(y, s, u, phi, log_coef=None):
    if log_coef is None:
        log_coef = special.gammaln(s + 1) - special.gammaln(y + 1) - special.gammaln(s - y + 1)
    return (log_coef + special.betaln(y + u * phi, s - y + (1 - u) * phi)
            - special.betaln(u * phi, (1 - u) * phi))


def betabin_mean_var(s, u, phi):
    """Mean s*u and variance s*u*(1-u)*[1 + (s-1)/(phi+1)]"""
    if phi <= 0 or not 0 < u < 1:
        raise DomainError("betabin_mean_var requires phi > 0 and 0 < u < 1")
    mean = s * u
    var = s * u * (1 - u) * (1 + (s - 1) / (phi + 1))
    return mean, var


def mixture_log_density(theta, re, obs):
    """Log-density of one observation under the zero-inflated mixture"""
    p, u = linear_predictors(theta, re, obs)
    if obs.y == 0:
        return float(np.log1p(-p))
    return float(np.log(p) + betabin_log_pmf(obs.y, obs.s, u, theta.phi))


# --- vectorised operations -------------------------------------------------

def _per_obs(re_all, data, component):
    # (N, 2) -> (n_obs,), (N, K, 2) -> (n_obs, K)
    return np.asarray(re_all)[data.subject, ..., component]


def _broadcast_rows(v, like):
    return v.reshape(v.shape + (1,) * (like.ndim - 1))


def predictors(theta, re_all, data):
    """
    p_it and u_it for every observation

    Args:
        theta: Theta
        re_all: Random effects, shape (N, 2) or (N, K, 2)
        data: Dataset

    Returns:
        tuple: (p, u) with shape (n_obs,) or (n_obs, K)
    """
    a_obs = _per_obs(re_all, data, 0)
    b_obs = _per_obs(re_all, data, 1)
    eta_p = a_obs + _broadcast_rows(data.x @ theta.alpha, a_obs)
    eta_u = b_obs + _broadcast_rows(data.z @ theta.beta, b_obs)
    return clamp_probability(special.expit(eta_p)), clamp_probability(special.expit(eta_u))


def obs_log_density(theta, re_all, data):
    """Mixture log-density of every observation, shape (n_obs,) or (n_obs, K)"""
    p, u = predictors(theta, re_all, data)
    y = _broadcast_rows(data.y, p)
    s = _broadcast_rows(data.s, p)
    pos = _broadcast_rows(data.positive, p)
    coef = _broadcast_rows(data.log_binom_coef, p)
    count_part = np.log(p) + _betabin_log_pmf(y, s, u, theta.phi, coef)
    return np.where(pos, count_part, np.log1p(-p))


def subject_log_likelihood(theta, re_all, data):
    """ln p(Y_i | phi_i; theta) per subject, shape (N,) or (N, K)"""
    return np.add.reduceat(obs_log_density(theta, re_all, data), data.offsets, axis=0)


def gaussian_log_density(theta, re_all):
    """ln N(phi_i; mu, G) per subject, shape (N,) or (N, K)"""
    re_all = np.asarray(re_all)
    da = re_all[..., 0] - theta.a
    db = re_all[..., 1] - theta.b
    return (-0.5 * (LOG_2PI + np.log(theta.sigma1_sq)) - 0.5 * da ** 2 / theta.sigma1_sq
            - 0.5 * (LOG_2PI + np.log(theta.sigma2_sq)) - 0.5 * db ** 2 / theta.sigma2_sq)


def complete_data_loglik(theta, re_all, data):
    """ln p(Y, phi; theta) summed over subjects"""
    re_all = np.asarray(re_all, dtype=float)
    if re_all.shape != (data.n_subjects, 2):
        raise ShapeError(f"expected random effects of shape ({data.n_subjects}, 2), got {re_all.shape}")
    theta.check_dims(data.dim_x, data.dim_z)
    return float(gaussian_log_density(theta, re_all).sum() + obs_log_density(theta, re_all, data).sum())


def _betabin_terms(theta, re_all, data):
    p, u = predictors(theta, re_all, data)
    pos = data.positive
    y, s, up = data.y[pos], data.s[pos], u[pos]
    phi = theta.phi
    big_a, big_b = up * phi, (1 - up) * phi
    return p, up, pos, y, s, big_a, big_b


def complete_data_score(theta, re_all, data):
    """
    Analytic gradient of complete_data_loglik

    Returns:
        Vector ordered as param_names(dim_x, dim_z)
    """
    re_all = np.asarray(re_all, dtype=float)
    theta.check_dims(data.dim_x, data.dim_z)
    p, up, pos, y, s, big_a, big_b = _betabin_terms(theta, re_all, data)
    phi = theta.phi

    d_a = special.digamma(y + big_a) - special.digamma(big_a)
    d_b = special.digamma(s - y + big_b) - special.digamma(big_b)
    g_u = phi * (d_a - d_b)
    score_beta = data.z[pos].T @ (g_u * up * (1 - up))
    score_phi = np.sum(up * d_a + (1 - up) * d_b - special.digamma(s + phi) + special.digamma(phi))

    score_alpha = data.x.T @ (pos.astype(float) - p)

    ra = re_all[:, 0] - theta.a
    rb = re_all[:, 1] - theta.b
    s1, s2 = theta.sigma1_sq, theta.sigma2_sq
    score_a = ra.sum() / s1
    score_b = rb.sum() / s2
    score_s1 = np.sum(-0.5 / s1 + 0.5 * ra ** 2 / s1 ** 2)
    score_s2 = np.sum(-0.5 / s2 + 0.5 * rb ** 2 / s2 ** 2)

    return np.concatenate(([score_phi, score_a, score_b], score_alpha, score_beta, [score_s1, score_s2]))


def complete_data_hessian(theta, re_all, data):
    """Analytic Hessian of complete_data_loglik, same ordering as the score"""
    re_all = np.asarray(re_all, dtype=float)
    theta.check_dims(data.dim_x, data.dim_z)
    dx, dz = data.dim_x, data.dim_z
    n_par = 5 + dx + dz
    i_phi, i_a, i_b = 0, 1, 2
    sl_alpha = slice(3, 3 + dx)
    sl_beta = slice(3 + dx, 3 + dx + dz)
    i_s1, i_s2 = n_par - 2, n_par - 1
    hess = np.zeros((n_par, n_par))

    p, up, pos, y, s, big_a, big_b = _betabin_terms(theta, re_all, data)
    phi = theta.phi
    d_a = special.digamma(y + big_a) - special.digamma(big_a)
    d_b = special.digamma(s - y + big_b) - special.digamma(big_b)
    t_a = special.polygamma(1, y + big_a) - special.polygamma(1, big_a)
    t_b = special.polygamma(1, s - y + big_b) - special.polygamma(1, big_b)
    w_u = up * (1 - up)
    g_u = phi * (d_a - d_b)
    d2_uu = phi ** 2 * (t_a + t_b)
    d2_uphi = (d_a - d_b) + phi * (up * t_a - (1 - up) * t_b)
    zp = data.z[pos]

    hess[sl_beta, sl_beta] = (zp * (d2_uu * w_u ** 2 + g_u * w_u * (1 - 2 * up))[:, None]).T @ zp
    cross = zp.T @ (d2_uphi * w_u)
    hess[sl_beta, i_phi] = cross
    hess[i_phi, sl_beta] = cross
    hess[i_phi, i_phi] = np.sum(up ** 2 * t_a + (1 - up) ** 2 * t_b
                                - special.polygamma(1, s + phi) + special.polygamma(1, phi))

    hess[sl_alpha, sl_alpha] = -(data.x * (p * (1 - p))[:, None]).T @ data.x

    n = data.n_subjects
    ra = re_all[:, 0] - theta.a
    rb = re_all[:, 1] - theta.b
    s1, s2 = theta.sigma1_sq, theta.sigma2_sq
    hess[i_a, i_a] = -n / s1
    hess[i_b, i_b] = -n / s2
    hess[i_a, i_s1] = hess[i_s1, i_a] = -ra.sum() / s1 ** 2
    hess[i_b, i_s2] = hess[i_s2, i_b] = -rb.sum() / s2 ** 2
    hess[i_s1, i_s1] = np.sum(0.5 / s1 ** 2 - ra ** 2 / s1 ** 3)
    hess[i_s2, i_s2] = np.sum(0.5 / s2 ** 2 - rb ** 2 / s2 ** 3)
    return hess


def score_jacobian_fd(theta, re_all, data, rel_step=1e-6):
    """Central finite-difference Jacobian of complete_data_score, symmetrised"""
    base = theta.to_vector()
    dx, dz = data.dim_x, data.dim_z
    jac = np.zeros((len(base), len(base)))
    for j in range(len(base)):
        h = rel_step * max(1.0, abs(base[j]))
        up, dn = base.copy(), base.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (complete_data_score(Theta.from_vector(up, dx, dz), re_all, data)
                     - complete_data_score(Theta.from_vector(dn, dx, dz), re_all, data)) / (2 * h)
    return 0.5 * (jac + jac.T)

