"""
SAEM engine for the ZIBBMR model.

Each iteration q runs
    S-step   one mh_sweep per chain (chains in worker threads)
    SA-step  Robbins-Monro update of the Gaussian sufficient statistics and
             of the per-subject conditional moments
    M-step   closed form for (mu, G), quasi-Newton for (beta, phi),
             offset logistic regression for alpha, then smoothing of
             (phi, alpha, beta) with the step size gamma_q
and finally refreshes the Louis accumulators at theta^(q).
"""
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import statsmodels.api as sm
from joblib import Parallel, delayed
from scipy import linalg, optimize, special
from statsmodels.tools.sm_exceptions import PerfectSeparationError, PerfectSeparationWarning

from src.components.model import (
    Theta,
    complete_data_hessian,
    complete_data_score,
    param_names,
    score_jacobian_fd,
)
from src.components.sampler import (
    KernelSchedule,
    adapt_omega,
    initial_chain_state,
    mh_sweep,
)
from src.utils.config import (
    BETABIN_MAX_ITER,
    DRIFT_WINDOW,
    LOGISTIC_RIDGE,
    PHI_FLOOR,
    VARIANCE_FLOOR,
    FitConfig,
)
from src.utils.exceptions import (
    ContractError,
    DomainError,
    NoInformationError,
    NumericalFailure,
    UsageError,
)
from src.utils.numerics import RngStream, clamp_probability

logger = logging.getLogger(__name__)

PINNABLE_PREFIXES = ("alpha_", "beta_")


@dataclass(frozen=True)
class StepSchedule:
    """gamma_q = 1 for q <= k1, then 1/(q - k1) up to k1 + k2"""
    k1: int
    k2: int

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0:
            raise ContractError("k1 and k2 must be non-negative")

    @property
    def total(self):
        return self.k1 + self.k2

    def gamma(self, q):
        if not 1 <= q <= self.total:
            raise ContractError(f"iteration {q} outside 1..{self.total}")
        return 1.0 if q <= self.k1 else 1.0 / (q - self.k1)

    def gammas(self):
        return np.array([self.gamma(q) for q in range(1, self.total + 1)])


@dataclass
class SufficientStats:
    f1: np.ndarray = field(default_factory=lambda: np.zeros(2))
    f2: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))


@dataclass
class LouisAccumulators:
    """Stochastic approximations D_q and G_q; H_q = G_q - D_q D_q'"""
    d: np.ndarray
    g: np.ndarray

    @classmethod
    def zeros(cls, n_params):
        return cls(np.zeros(n_params), np.zeros((n_params, n_params)))

    @property
    def h(self):
        return self.g - np.outer(self.d, self.d)


@dataclass
class ConditionalMoments:
    """Running first and second moments of phi_i given Y, per subject"""
    mean: np.ndarray
    second: np.ndarray

    @classmethod
    def zeros(cls, n_subjects):
        return cls(np.zeros((n_subjects, 2)), np.zeros((n_subjects, 2)))

    @property
    def var(self):
        return np.maximum(self.second - self.mean ** 2, VARIANCE_FLOOR)

    @property
    def sd(self):
        return np.sqrt(self.var)


@dataclass
class MStepResult:
    values: np.ndarray
    phi: float = None
    objective: float = None
    flagged: str = None


@dataclass
class FitResult:
    """
    Outcome of a SAEM run

    Args:
        theta: Final parameter estimate
        se: Standard errors by parameter name; None for pinned parameters or
            when the information matrix is not negative definite
        cov: Covariance of the free parameters (order of free_names) or None
        free_names: Names of the estimated (non-pinned) parameters
        moments: Conditional moments of the random effects
        acceptance: Overall acceptance rate per kernel, pooled over chains
        trajectory: Parameter vectors theta^(0..K1+K2), one row per iteration
        flags: Non-fatal condition codes raised during the run
        drift: Relative change over the last DRIFT_WINDOW iterations
        elapsed: Wall-clock seconds
    """
    theta: Theta
    se: dict
    cov: np.ndarray
    free_names: tuple
    moments: ConditionalMoments
    acceptance: dict
    trajectory: np.ndarray
    flags: list
    drift: float
    elapsed: float
    louis: LouisAccumulators = None

    @property
    def names(self):
        return self.theta.names()

    def se_vector(self):
        return np.array([np.nan if self.se.get(n) is None else self.se[n] for n in self.names])


def _stack_chains(chains):
    # list of ChainState, a single (N, 2) array or an (m, N, 2) array -> (m, N, 2)
    if isinstance(chains, (list, tuple)):
        arrays = [c.re if hasattr(c, "re") else np.asarray(c, dtype=float) for c in chains]
        if not arrays:
            raise ContractError("at least one chain is required")
        return np.stack(arrays)
    arr = np.asarray(chains, dtype=float)
    return arr[None] if arr.ndim == 2 else arr


def sa_update_stats(stats, chains, gamma):
    """
    F1 <- F1 + gamma (sum_i phi_i - F1), F2 likewise with phi_i phi_i'

    Sums are averaged over chains.
    """
    re = _stack_chains(chains)
    m = re.shape[0]
    s1 = re.sum(axis=(0, 1)) / m
    s2 = np.einsum("lni,lnj->ij", re, re) / m
    return SufficientStats(stats.f1 + gamma * (s1 - stats.f1), stats.f2 + gamma * (s2 - stats.f2))


def mstep_gaussian(stats, n_subjects, pinned=()):
    """
    mu = F1/N and the diagonal of F2/N - F1 F1'/N^2, floored at VARIANCE_FLOOR

    Components listed in pinned (0 for a, 1 for b) keep mu_k = 0 and their
    variance is the second moment about 0, F2_kk/N.

    Returns:
        tuple: (mu, G) with G diagonal
    """
    if n_subjects < 1:
        raise ContractError("n_subjects must be positive")
    mu = stats.f1 / n_subjects
    mu[list(pinned)] = 0.0
    # E[(phi_k - mu_k)^2] under the SA moments; equals F2/N - (F1/N)^2 when mu = F1/N
    var = np.diag(stats.f2) / n_subjects - 2.0 * mu * stats.f1 / n_subjects + mu ** 2
    return mu, np.diag(np.maximum(var, VARIANCE_FLOOR))


def _betabin_pieces(data, re):
    pos = data.positive
    if not np.any(pos):
        raise NoInformationError("no positive counts: beta-binomial parameters are not identified")
    b_obs = re[:, data.subject[pos], 1]
    return pos, b_obs, data.y[pos], data.s[pos], data.z[pos]


def betabin_objective(data, re_all, beta, phi):
    """Chain-averaged sum over Y > 0 of ln B(Y+u phi, S-Y+(1-u)phi) - ln B(u phi, (1-u)phi)"""
    re = _stack_chains(re_all)
    _, b_obs, y, s, z = _betabin_pieces(data, re)
    u = clamp_probability(special.expit(b_obs + z @ np.asarray(beta, dtype=float)))
    big_a, big_b = u * phi, (1 - u) * phi
    terms = special.betaln(y + big_a, s - y + big_b) - special.betaln(big_a, big_b)
    return float(terms.sum() / re.shape[0])


def mstep_betabin(data, re_all, beta_init, phi_init, free=None):
    """
    Maximise the beta-binomial part of the complete-data likelihood over (beta, phi)

    BFGS runs on (beta, ln phi) with the analytic digamma gradient and is
    warm-started at (beta_init, phi_init).

    Args:
        data: Dataset
        re_all: Random effects of one or several chains
        beta_init: Starting mean-model coefficients
        phi_init: Starting dispersion
        free: Boolean mask of estimated beta components; default all

    Returns:
        MStepResult with values=beta and phi set; flagged "betabin_maxiter"
        when the iteration cap was hit
    """
    re = _stack_chains(re_all)
    m = re.shape[0]
    _, b_obs, y, s, z = _betabin_pieces(data, re)
    beta_init = np.asarray(beta_init, dtype=float)
    free = np.ones(len(beta_init), dtype=bool) if free is None else np.asarray(free, dtype=bool)
    z_free = z[:, free]
    offset = b_obs + z[:, ~free] @ beta_init[~free]

    def negative(params):
        beta_f, log_phi = params[:-1], params[-1]
        phi = np.exp(log_phi)
        u = clamp_probability(special.expit(offset + z_free @ beta_f))
        big_a, big_b = u * phi, (1 - u) * phi
        value = np.sum(special.betaln(y + big_a, s - y + big_b) - special.betaln(big_a, big_b)) / m
        d_a = special.digamma(y + big_a) - special.digamma(big_a)
        d_b = special.digamma(s - y + big_b) - special.digamma(big_b)
        g_beta = np.einsum("lk,kj->j", phi * (d_a - d_b) * u * (1 - u), z_free) / m
        g_phi = np.sum(u * d_a + (1 - u) * d_b - special.digamma(s + phi) + special.digamma(phi)) / m
        return -value, -np.append(g_beta, phi * g_phi)

    start = np.append(beta_init[free], np.log(phi_init))
    f0, _ = negative(start)
    if not np.isfinite(f0):
        raise NumericalFailure("beta-binomial objective is not finite at the starting point")
    with np.errstate(over="ignore", invalid="ignore"):
        res = optimize.minimize(negative, start, jac=True, method="BFGS",
                                options={"maxiter": BETABIN_MAX_ITER, "gtol": 1e-6 * (1.0 + abs(f0))})
    params, value = res.x, res.fun
    if not np.isfinite(value) or value > f0:
        params, value = start, f0
    beta = beta_init.copy()
    beta[free] = params[:-1]
    flag = "betabin_maxiter" if res.nit >= BETABIN_MAX_ITER and not res.success else None
    if flag:
        logger.warning("beta-binomial M-step stopped after %d iterations: %s", res.nit, res.message)
    return MStepResult(values=beta, phi=float(np.exp(params[-1])), objective=-float(value), flagged=flag)


def mstep_logistic(data, re_all, alpha_init, free=None):
    """
    Offset logistic regression of 1{Y > 0} on x with offset a_i

    Uses a statsmodels Binomial GLM (IRLS); under complete separation a ridge
    penalised fit is returned and flagged "logistic_separation".
    """
    re = _stack_chains(re_all)
    m = re.shape[0]
    alpha_init = np.asarray(alpha_init, dtype=float)
    free = np.ones(len(alpha_init), dtype=bool) if free is None else np.asarray(free, dtype=bool)
    if not np.any(free):
        return MStepResult(values=alpha_init.copy())
    x = data.x
    endog = np.tile(data.positive.astype(float), m)
    exog = np.tile(x[:, free], (m, 1))
    offset = (re[:, data.subject, 0] + x[:, ~free] @ alpha_init[~free]).ravel()
    model = sm.GLM(endog, exog, family=sm.families.Binomial(), offset=offset)

    separated = endog.min() == endog.max()
    if not separated:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", PerfectSeparationWarning)
                res = model.fit(start_params=alpha_init[free], tol=1e-10, maxiter=100)
            params = np.asarray(res.params)
            separated = not np.all(np.isfinite(params))
        except (PerfectSeparationError, PerfectSeparationWarning, np.linalg.LinAlgError):
            separated = True
    if separated:
        logger.warning("separation in the zero-inflation regression; using a ridge-penalised estimate")
        res = model.fit_regularized(method="elastic_net", alpha=LOGISTIC_RIDGE, L1_wt=0.0,
                                    start_params=alpha_init[free])
        params = np.asarray(res.params)
    alpha = alpha_init.copy()
    alpha[free] = params
    return MStepResult(values=alpha, flagged="logistic_separation" if separated else None)


def smooth_params(theta_prev, phi_tilde, alpha_tilde, beta_tilde, gamma, mu, g):
    """
    Convex SA combination for (phi, alpha, beta); (mu, G) come from mstep_gaussian

    Returns:
        tuple: (Theta, flag) where flag is "phi_floored" if phi had to be floored
    """
    phi = theta_prev.phi + gamma * (phi_tilde - theta_prev.phi)
    flag = None
    if not phi > 0:
        logger.warning("smoothed phi %.3g floored at %g", phi, PHI_FLOOR)
        phi, flag = PHI_FLOOR, "phi_floored"
    alpha = theta_prev.alpha + gamma * (np.asarray(alpha_tilde) - theta_prev.alpha)
    beta = theta_prev.beta + gamma * (np.asarray(beta_tilde) - theta_prev.beta)
    return Theta(phi, mu[0], mu[1], alpha, beta, g[0, 0], g[1, 1]), flag


def update_conditional_moments(moments, chains, gamma):
    """SA update of per-subject E[phi_i | Y] and E[phi_i^2 | Y] from the chain draws"""
    re = _stack_chains(chains)
    first = re.mean(axis=0)
    second = (re ** 2).mean(axis=0)
    return ConditionalMoments(moments.mean + gamma * (first - moments.mean),
                              moments.second + gamma * (second - moments.second))


def _complete_hessian(theta, re, data):
    hess = complete_data_hessian(theta, re, data)
    if np.all(np.isfinite(hess)):
        return hess
    logger.debug("analytic Hessian not finite; using finite differences of the score")
    return score_jacobian_fd(theta, re, data)


def update_louis(acc, theta, chains, data, gamma):
    """
    D <- D + gamma (score - D), G <- G + gamma (hessian + score score' - G)

    Score and Hessian of ln p(Y, phi; theta) are averaged over chains. The
    Hessian is analytic; where it is not finite (e.g. digamma overflow at an
    extreme phi) central differences of the score are used instead.
    """
    re = _stack_chains(chains)
    m = re.shape[0]
    scores = [complete_data_score(theta, re[l], data) for l in range(m)]
    d_target = sum(scores) / m
    g_target = sum(_complete_hessian(theta, re[l], data) + np.outer(scores[l], scores[l])
                   for l in range(m)) / m
    g_new = acc.g + gamma * (g_target - acc.g)
    return LouisAccumulators(acc.d + gamma * (d_target - acc.d), 0.5 * (g_new + g_new.T))


def louis_covariance(acc, free_idx):
    """
    -H^-1 over the free parameters

    Returns:
        Covariance matrix, or None when -H is not positive definite
    """
    h = acc.h[np.ix_(free_idx, free_idx)]
    info = -0.5 * (h + h.T)
    if not np.all(np.isfinite(info)):
        return None
    eig = np.linalg.eigvalsh(info)
    if eig.min() <= 0:
        return None
    return linalg.inv(info)


def _validate_fixed(fixed, names):
    for name in fixed:
        if name not in names:
            raise UsageError(f"cannot pin unknown parameter {name!r}")
        if name not in ("a", "b") and not name.startswith(PINNABLE_PREFIXES):
            raise UsageError(f"only location coefficients can be pinned, not {name!r}")


def _pin(theta, fixed):
    if not fixed:
        return theta
    names = theta.names()
    vec = theta.to_vector()
    for name in fixed:
        vec[names.index(name)] = 0.0
    return Theta.from_vector(vec, len(theta.alpha), len(theta.beta))


def relative_drift(trajectory, window=DRIFT_WINDOW):
    """max_j |theta_j(last) - theta_j(last - window)| / (1 + |theta_j(last)|)"""
    if len(trajectory) <= 1:
        return 0.0
    back = trajectory[max(0, len(trajectory) - 1 - window)]
    last = trajectory[-1]
    return float(np.max(np.abs(last - back) / (1.0 + np.abs(last))))


def fit(data, theta0, config=None):
    """
    Run K1 + K2 SAEM iterations from theta0

    Args:
        data: Dataset
        theta0: Starting Theta
        config: FitConfig; defaults used when None

    Returns:
        FitResult

    Raises:
        NumericalFailure: If an iterate becomes non-finite; carries the
            trajectory so far
    """
    config = config or FitConfig()
    theta0.check_dims(data.dim_x, data.dim_z)
    names = param_names(data.dim_x, data.dim_z)
    _validate_fixed(config.fixed, names)
    fixed = set(config.fixed)
    free_idx = [j for j, n in enumerate(names) if n not in fixed]
    alpha_free = np.array([f"alpha_{j + 1}" not in fixed for j in range(data.dim_x)], dtype=bool)
    beta_free = np.array([f"beta_{j + 1}" not in fixed for j in range(data.dim_z)], dtype=bool)
    pinned_re = [k for k, name in enumerate(("a", "b")) if name in fixed]

    schedule = StepSchedule(config.k1, config.k2)
    kernels = KernelSchedule(config.m1, config.m2, config.m3)
    root = RngStream(config.seed)
    streams = [root.child(l) for l in range(config.chains)]

    start = time.perf_counter()
    theta = _pin(theta0, fixed)
    states = [initial_chain_state(data, theta, config.mode) for _ in range(config.chains)]
    stats = SufficientStats()
    moments = ConditionalMoments.zeros(data.n_subjects)
    louis = LouisAccumulators.zeros(len(names))
    trajectory = [theta.to_vector()]
    flags = []

    def _flag(code):
        if code and code not in flags:
            flags.append(code)

    logger.info("SAEM fit: N=%d, n_obs=%d, chains=%d, K1=%d, K2=%d, mode=%s",
                data.n_subjects, data.n_obs, config.chains, config.k1, config.k2, config.mode)

    with Parallel(n_jobs=min(config.threads, config.chains), prefer="threads") as parallel:
        for q in range(1, schedule.total + 1):
            gamma = schedule.gamma(q)
            states = parallel(
                delayed(mh_sweep)(streams[l], theta, data, states[l], kernels, config.mode)
                for l in range(config.chains)
            )
            states = [adapt_omega(st, config.target_accept, gamma) for st in states]

            stats = sa_update_stats(stats, states, gamma)
            if config.moments_phase == "all" or q > schedule.k1:
                moments = update_conditional_moments(moments, states, gamma)

            try:
                mu, g = mstep_gaussian(stats, data.n_subjects, pinned_re)
                betabin = mstep_betabin(data, states, theta.beta, theta.phi, beta_free)
                logistic = mstep_logistic(data, states, theta.alpha, alpha_free)
                theta, phi_flag = smooth_params(theta, betabin.phi, logistic.values, betabin.values, gamma, mu, g)
            except DomainError as e:
                raise NumericalFailure(f"iteration {q}: {e}", trajectory=np.array(trajectory)) from e
            for code in (betabin.flagged, logistic.flagged, phi_flag):
                _flag(code)

            vec = theta.to_vector()
            if not np.all(np.isfinite(vec)):
                raise NumericalFailure(f"non-finite parameters at iteration {q}", trajectory=np.array(trajectory))
            trajectory.append(vec)

            if config.se_method == "louis":
                louis = update_louis(louis, theta, states, data, gamma)

            if q % config.log_every == 0 or q == schedule.total:
                logger.info("iteration %d/%d (%s): phi=%.4g a=%.4g b=%.4g sigma1=%.4g sigma2=%.4g",
                            q, schedule.total, "exploration" if q <= schedule.k1 else "convergence",
                            theta.phi, theta.a, theta.b, np.sqrt(theta.sigma1_sq), np.sqrt(theta.sigma2_sq))
            logger.debug("iteration %d acceptance %s", q, states[0].acceptance_rates(latest=True))

    trajectory = np.array(trajectory)
    se = {n: None for n in names}
    cov = None
    if schedule.total == 0:
        _flag("no_iterations")
    elif config.se_method == "louis":
        cov = louis_covariance(louis, free_idx)
        if cov is None:
            logger.warning("information matrix is not negative definite; standard errors unavailable")
            _flag("se_unavailable")
        else:
            for k, j in enumerate(free_idx):
                se[names[j]] = float(np.sqrt(cov[k, k]))

    pooled = sum(st.accept_counts for st in states)
    acceptance = {
        f"kern{k + 1}": (float(pooled[k, 0] / pooled[k, 1]) if pooled[k, 1] else None)
        for k in range(3)
    }
    drift = relative_drift(trajectory)
    elapsed = time.perf_counter() - start
    logger.info("SAEM fit finished in %.2fs (drift %.3g, flags %s)", elapsed, drift, flags or "none")
    return FitResult(
        theta=theta, se=se, cov=cov, free_names=tuple(names[j] for j in free_idx),
        moments=moments, acceptance=acceptance, trajectory=trajectory, flags=flags,
        drift=drift, elapsed=elapsed, louis=louis,
    )
