"""
Observed-data log-likelihood of a fitted ZIBBMR model.

The marginal p(Y_i; theta) = integral of p(Y_i | phi_i) N(phi_i; mu, G) has no
closed form. loglik_importance estimates it with scaled Student-t proposals
centred at the conditional moments tracked during SAEM; loglik_quadrature is
an adaptive tensor-product Gauss-Hermite rule for small problems and checks.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

from src.components.model import gaussian_log_density, subject_log_likelihood
from src.utils.config import VARIANCE_FLOOR, ISConfig
from src.utils.exceptions import ContractError, NumericalFailure
from src.utils.numerics import sample_student_t

logger = logging.getLogger(__name__)

__all__ = ["ISConfig", "ISResult", "ProposalMoments", "laplace_moments",
           "loglik_importance", "loglik_quadrature", "information_criteria"]


@dataclass(frozen=True)
class ISResult:
    loglik: float
    mc_se: float
    per_subject: np.ndarray


@dataclass(frozen=True)
class ProposalMoments:
    """Per-subject proposal centre and scale, e.g. read back from a result file"""
    mean: np.ndarray
    sd: np.ndarray


def _joint_log_density(theta, phi, data):
    # ln p(Y_i | phi) + ln N(phi; mu, G) for phi of shape (N, K, 2)
    return subject_log_likelihood(theta, phi, data) + gaussian_log_density(theta, phi)


def loglik_importance(data, theta, moments, cfg=None, stream=None):
    """
    Importance-sampling estimate of sum_i ln p(Y_i; theta)

    Args:
        data: Dataset
        theta: Theta
        moments: Object with per-subject ``mean`` and ``sd`` arrays of shape (N, 2)
        cfg: ISConfig (nu, K)
        stream: RngStream for the proposals

    Returns:
        ISResult with the total, its delta-method Monte Carlo standard error
        and the per-subject log-likelihoods
    """
    cfg = cfg or ISConfig()
    if stream is None:
        raise ContractError("loglik_importance needs a random stream")
    centre = np.asarray(moments.mean, dtype=float)
    scale = np.asarray(moments.sd, dtype=float)
    if centre.shape != (data.n_subjects, 2) or scale.shape != (data.n_subjects, 2):
        raise ContractError("conditional moments must be given for every subject")
    if np.any(scale <= 0):
        raise ContractError("conditional standard deviations must be positive")

    k = cfg.k_samples
    t = sample_student_t(stream, cfg.nu, size=(data.n_subjects, k, 2))
    phi = centre[:, None, :] + scale[:, None, :] * t
    log_proposal = (stats.t.logpdf(t, cfg.nu) - np.log(scale)[:, None, :]).sum(axis=-1)
    log_w = _joint_log_density(theta, phi, data) - log_proposal

    finite = np.isfinite(log_w)
    dead = ~finite.any(axis=1)
    if np.any(dead):
        sid = data.subject_ids[int(np.flatnonzero(dead)[0])]
        raise NumericalFailure(f"importance sampler has zero effective sample for subject {sid!r}")
    log_w = np.where(finite, log_w, -np.inf)

    per_subject = special.logsumexp(log_w, axis=1) - np.log(k)
    scaled = np.exp(log_w - log_w.max(axis=1, keepdims=True))
    rel_var = scaled.var(axis=1) / scaled.mean(axis=1) ** 2 / k
    loglik = float(per_subject.sum())
    mc_se = float(np.sqrt(rel_var.sum()))
    logger.debug("IS log-likelihood %.4f (MC SE %.4f, K=%d, nu=%g)", loglik, mc_se, k, cfg.nu)
    return ISResult(loglik=loglik, mc_se=mc_se, per_subject=per_subject)


def _subject_mode(theta, data, i):
    sub = data.subset([i])

    def negative(x):
        return -float(_joint_log_density(theta, x[None, None, :], sub)[0, 0])

    res = optimize.minimize(negative, theta.mu(), method="BFGS")
    cov = np.atleast_2d(res.hess_inv)
    # central-difference Hessian at the mode, BFGS inverse Hessian as fallback
    h = 1e-4
    steps = np.eye(2) * h
    hess = np.empty((2, 2))
    for j in range(2):
        for k in range(2):
            hess[j, k] = (negative(res.x + steps[j] + steps[k]) - negative(res.x + steps[j] - steps[k])
                          - negative(res.x - steps[j] + steps[k]) + negative(res.x - steps[j] - steps[k])) / (4 * h * h)
    hess = 0.5 * (hess + hess.T)
    if np.all(np.isfinite(hess)) and np.all(np.linalg.eigvalsh(hess) > 0):
        cov = np.linalg.inv(hess)
    return res.x, np.sqrt(np.clip(np.diag(cov), VARIANCE_FLOOR, None))


def laplace_moments(data, theta):
    """Posterior mode of every phi_i with a curvature-based scale"""
    found = [_subject_mode(theta, data, i) for i in range(data.n_subjects)]
    return ProposalMoments(mean=np.array([c for c, _ in found]), sd=np.array([s for _, s in found]))


def loglik_quadrature(data, theta, nodes=20, moments=None):
    """
    Adaptive Gauss-Hermite evaluation of sum_i ln p(Y_i; theta)

    Each subject's integral is centred and scaled by the supplied conditional
    moments or, when none are given, by the posterior mode and the curvature
    estimate of a BFGS search. Cost grows as nodes^2 per subject.
    """
    if nodes < 5:
        raise ContractError("quadrature needs at least 5 nodes")
    x, w = np.polynomial.hermite.hermgauss(nodes)
    gx, gy = np.meshgrid(x, x, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    log_weights = (np.log(np.outer(w, w)) + gx ** 2 + gy ** 2).ravel()

    moments = moments if moments is not None else laplace_moments(data, theta)
    centre = np.asarray(moments.mean, dtype=float)
    scale = np.asarray(moments.sd, dtype=float)

    phi = centre[:, None, :] + np.sqrt(2.0) * scale[:, None, :] * grid[None, :, :]
    log_f = _joint_log_density(theta, phi, data)
    per_subject = (special.logsumexp(log_weights[None, :] + log_f, axis=1)
                   + np.log(2.0) + np.log(scale).sum(axis=1))
    return float(per_subject.sum())


def information_criteria(loglik, n_params, n_units):
    """
    AIC and BIC of a fitted model

    n_units is the number of independent units entering the BIC penalty
    (subjects for these longitudinal data).
    """
    if n_params < 0 or n_units < 1:
        raise ContractError("n_params must be >= 0 and n_units >= 1")
    aic = -2.0 * loglik + 2.0 * n_params
    bic = -2.0 * loglik + n_params * np.log(n_units)
    return float(aic), float(bic)
