"""
Simulation step of SAEM: Metropolis-Hastings updates of the random effects.

Three proposal kernels are cycled at every SAEM iteration:
    kern1  prior proposal N(mu, G) (independence sampler)
    kern2  multivariate random walk N(phi_i, Omega)
    kern3  univariate random walk on one randomly chosen component, N(0, 1) noise

Two targets are supported. In "original" mode the chain targets
p(phi_i | Y_i; theta). In "augmented" mode the latent Beta probabilities w_it
are carried along: phi_i is updated given (Y, w) and w is then refreshed from
its closed-form Beta full conditional.

All updates are vectorised over subjects; subjects never interact within a
sweep because the complete-data likelihood factorises over i.
"""
import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import special

from src.components.model import linear_predictors, predictors
from src.utils.config import OMEGA_EIGEN_BOUNDS
from src.utils.exceptions import ContractError, StateError
from src.utils.numerics import (
    sample_beta,
    sample_normal,
    sample_uniform_int,
)

logger = logging.getLogger(__name__)

MODES = ("original", "augmented")


class Kernel(IntEnum):
    PRIOR = 1
    RANDOM_WALK = 2
    COMPONENT = 3


@dataclass(frozen=True)
class KernelSchedule:
    """Sweeps per SAEM iteration for kern1, kern2 and kern3"""
    m1: int = 2
    m2: int = 2
    m3: int = 2

    def __post_init__(self):
        if min(self.m1, self.m2, self.m3) < 0:
            raise ContractError("kernel schedule needs non-negative sweep counts")

    def items(self):
        return ((Kernel.PRIOR, self.m1), (Kernel.RANDOM_WALK, self.m2), (Kernel.COMPONENT, self.m3))


@dataclass
class ChainState:
    """
    State of one Markov chain

    Args:
        re: Random effects, shape (N, 2)
        w: Latent Beta probabilities per observation (augmented mode only);
            nan for zero counts
        omega: 2 x 2 proposal covariance of the multivariate random walk
        accept_counts: Cumulative [accepted, proposed] per kernel, shape (3, 2)
        sweep_counts: [accepted, proposed] per kernel in the latest sweep
    """
    re: np.ndarray
    w: np.ndarray = None
    omega: np.ndarray = field(default_factory=lambda: np.eye(2))
    accept_counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 2), dtype=np.int64))
    sweep_counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 2), dtype=np.int64))

    def acceptance_rates(self, latest=False):
        counts = self.sweep_counts if latest else self.accept_counts
        return {
            f"kern{k.value}": (float(counts[k - 1, 0] / counts[k - 1, 1]) if counts[k - 1, 1] else None)
            for k in Kernel
        }


def initial_chain_state(data, theta, mode="original", re_init=None):
    """
    Starting state of a chain

    Random effects start at mu (or re_init), Omega at G/2 and, in augmented
    mode, w_it at (Y_it + 0.5)/(S_it + 1).
    """
    if mode not in MODES:
        raise ContractError(f"unknown sampler mode {mode!r}")
    re = np.tile(theta.mu(), (data.n_subjects, 1)) if re_init is None else np.array(re_init, dtype=float)
    w = None
    if mode == "augmented":
        w = np.where(data.positive, (data.y + 0.5) / (data.s + 1.0), np.nan)
    return ChainState(re=re, w=w, omega=theta.G() / 2.0)


def propose_kern1(stream, theta, size=None):
    """Independence proposal from the prior N(mu, G)"""
    return sample_normal(stream, theta.mu(), theta.G(), size)


def propose_kern2(stream, current, omega):
    """Symmetric random walk current + N(0, Omega)"""
    current = np.asarray(current, dtype=float)
    size = None if current.ndim == 1 else current.shape[0]
    return current + sample_normal(stream, np.zeros(2), omega, size)


def propose_kern3(stream, current):
    """Add N(0, 1) noise to one uniformly chosen component of each row"""
    current = np.asarray(current, dtype=float)
    candidate = current.copy()
    if current.ndim == 1:
        component = sample_uniform_int(stream, 0, 1)
        candidate[component] += stream.standard_normal()
        return candidate
    n = current.shape[0]
    component = sample_uniform_int(stream, 0, 1, size=n)
    candidate[np.arange(n), component] += stream.standard_normal(n)
    return candidate


def prior_log_ratio(theta, current, candidate):
    """ln N(candidate; mu, G) - ln N(current; mu, G) per subject"""
    inv_var = np.array([1.0 / theta.sigma1_sq, 1.0 / theta.sigma2_sq])
    mu = theta.mu()
    quad_new = np.sum((np.asarray(candidate) - mu) ** 2 * inv_var, axis=-1)
    quad_old = np.sum((np.asarray(current) - mu) ** 2 * inv_var, axis=-1)
    return -0.5 * (quad_new - quad_old)


def _zero_terms(p, p_hat):
    return np.log1p(-p_hat) - np.log1p(-p)


def log_accept_original(theta, data, current, candidate, kernel):
    """
    Log acceptance ratio per subject without augmentation

    For the prior proposal the prior cancels and the ratio is the change in
    ln p(Y_i | phi_i). Symmetric kernels add the Gaussian prior log-ratio.
    """
    p, u = predictors(theta, current, data)
    p_hat, u_hat = predictors(theta, candidate, data)
    y, s, phi = data.y, data.s, theta.phi
    count_terms = (
        special.betaln(y + u_hat * phi, s - y + (1 - u_hat) * phi)
        - special.betaln(y + u * phi, s - y + (1 - u) * phi)
        - (special.betaln(u_hat * phi, (1 - u_hat) * phi) - special.betaln(u * phi, (1 - u) * phi))
        + np.log(p_hat) - np.log(p)
    )
    per_obs = np.where(data.positive, count_terms, _zero_terms(p, p_hat))
    delta = np.add.reduceat(per_obs, data.offsets)
    if Kernel(kernel) != Kernel.PRIOR:
        delta = delta + prior_log_ratio(theta, current, candidate)
    return delta


def log_accept_augmented(theta, data, w, current, candidate, kernel):
    """
    Log acceptance ratio per subject given the latent probabilities w

    Only the Beta density of w and the zero-inflation terms depend on phi_i;
    the Binomial part given w cancels.
    """
    if w is None:
        raise StateError("augmented acceptance ratio needs latent probabilities w")
    w = np.asarray(w, dtype=float)
    pos = data.positive
    if w.shape != (data.n_obs,) or not np.all(np.isfinite(w[pos])) or np.any((w[pos] <= 0) | (w[pos] >= 1)):
        raise StateError("w must lie in (0, 1) for every positive count")
    p, u = predictors(theta, current, data)
    p_hat, u_hat = predictors(theta, candidate, data)
    phi = theta.phi
    w_safe = np.where(pos, w, 0.5)
    count_terms = (
        special.gammaln(u * phi) + special.gammaln((1 - u) * phi)
        - special.gammaln(u_hat * phi) - special.gammaln((1 - u_hat) * phi)
        + np.log(p_hat) - np.log(p)
        + phi * (u_hat - u) * special.logit(w_safe)
    )
    per_obs = np.where(pos, count_terms, _zero_terms(p, p_hat))
    delta = np.add.reduceat(per_obs, data.offsets)
    if Kernel(kernel) != Kernel.PRIOR:
        delta = delta + prior_log_ratio(theta, current, candidate)
    return delta


def gibbs_update_w(stream, theta, re, obs):
    """Draw w_it ~ Beta(Y + u*phi, S - Y + (1 - u)*phi) for one positive observation"""
    if obs.y <= 0:
        raise ContractError("w is only defined for positive counts")
    _, u = linear_predictors(theta, re, obs)
    return sample_beta(stream, obs.y + u * theta.phi, obs.s - obs.y + (1 - u) * theta.phi)


def refresh_w(stream, theta, re_all, data):
    """Gibbs refresh of every w_it; nan where Y_it = 0"""
    _, u = predictors(theta, re_all, data)
    pos = data.positive
    w = np.full(data.n_obs, np.nan)
    if np.any(pos):
        y, s, up = data.y[pos], data.s[pos], u[pos]
        w[pos] = sample_beta(stream, y + up * theta.phi, s - y + (1 - up) * theta.phi)
    return w


def mh_sweep(stream, theta, data, state, schedule, mode="original"):
    """
    One simulation step for a chain

    Runs m1 kern1, m2 kern2 and m3 kern3 updates for every subject with the
    mode's acceptance ratio, then in augmented mode refreshes w.

    Returns:
        New ChainState; the input state is not modified
    """
    if mode not in MODES:
        raise ContractError(f"unknown sampler mode {mode!r}")
    if mode == "augmented" and state.w is None:
        raise StateError("augmented sweep started from a state without w")
    re = state.re.copy()
    n = data.n_subjects
    counts = np.zeros((3, 2), dtype=np.int64)

    for kernel, sweeps in schedule.items():
        for _ in range(sweeps):
            if kernel == Kernel.PRIOR:
                candidate = propose_kern1(stream, theta, size=n)
            elif kernel == Kernel.RANDOM_WALK:
                candidate = propose_kern2(stream, re, state.omega)
            else:
                candidate = propose_kern3(stream, re)
            if mode == "augmented":
                delta = log_accept_augmented(theta, data, state.w, re, candidate, kernel)
            else:
                delta = log_accept_original(theta, data, re, candidate, kernel)
            accept = np.log(stream.uniform(n)) < delta
            re[accept] = candidate[accept]
            counts[kernel - 1] += (int(accept.sum()), n)

    w = refresh_w(stream, theta, re, data) if mode == "augmented" else None
    return ChainState(re=re, w=w, omega=state.omega.copy(),
                      accept_counts=state.accept_counts + counts, sweep_counts=counts)


def adapt_omega(state, target_rate, gamma=1.0):
    """
    Robbins-Monro scaling of Omega towards the target kern2 acceptance rate

    Omega is multiplied by exp(gamma * (observed - target)) using the latest
    sweep's kern2 tallies; eigenvalues are kept inside OMEGA_EIGEN_BOUNDS.
    """
    accepted, proposed = state.sweep_counts[Kernel.RANDOM_WALK - 1]
    if proposed == 0:
        return state
    rate = accepted / proposed
    omega = state.omega * np.exp(gamma * (rate - target_rate))
    lo, hi = OMEGA_EIGEN_BOUNDS
    eig, vec = np.linalg.eigh(omega)
    if eig.min() < lo or eig.max() > hi:
        omega = (vec * np.clip(eig, lo, hi)) @ vec.T
    logger.debug("kern2 acceptance %.3f, omega scale %.4g", rate, np.sqrt(np.trace(omega) / 2))
    return ChainState(re=state.re, w=state.w, omega=omega,
                      accept_counts=state.accept_counts, sweep_counts=state.sweep_counts)
