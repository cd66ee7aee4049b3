"""
Wald and likelihood-ratio tests for fitted ZIBBMR models.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from src.utils.exceptions import ContractError, DomainError

logger = logging.getLogger(__name__)

# Allowed MC shortfall of the full-model log-likelihood, in combined standard errors
LRT_NOISE_ALLOWANCE = 3.0


@dataclass(frozen=True)
class TestResult:
    """
    Outcome of a hypothesis test

    statistic is z^2 for Wald tests and 2(LL_full - LL_reduced) for LRTs.
    """
    __test__ = False  # not a pytest class

    statistic: float
    df: int
    p_value: float
    kind: str
    parameter: str = None
    flagged: str = None

    def rejects(self, level):
        return self.p_value < level

    def to_dict(self):
        return {
            "kind": self.kind, "parameter": self.parameter, "statistic": self.statistic,
            "df": self.df, "p_value": self.p_value, "flagged": self.flagged,
        }


def chi_square_sf(x, df):
    """P(X > x) for X ~ chi-square(df), via the regularised upper incomplete gamma"""
    if x < 0:
        raise DomainError("chi-square survival needs x >= 0")
    if df < 1:
        raise DomainError("degrees of freedom must be positive")
    return float(special.gammaincc(df / 2.0, x / 2.0))


def wald_test(estimate, se, null_value=0.0, parameter=None):
    """Two-sided z test of estimate = null_value"""
    if se is None or not np.isfinite(se) or se <= 0:
        raise DomainError(f"Wald test needs a positive standard error, got {se}")
    z = (estimate - null_value) / se
    p = float(2.0 * stats.norm.sf(abs(z)))
    return TestResult(statistic=float(z * z), df=1, p_value=min(1.0, p), kind="wald", parameter=parameter)


def lrt(loglik_full, loglik_reduced, df, mc_se=0.0, parameter=None):
    """
    Likelihood-ratio test from (possibly Monte Carlo) log-likelihoods

    Args:
        loglik_full: Log-likelihood of the full model
        loglik_reduced: Log-likelihood of the nested model
        df: Number of restrictions
        mc_se: Combined Monte Carlo standard error of the difference
        parameter: Label of the tested hypothesis

    Returns:
        TestResult; a negative statistic is clamped to 0 and flagged
        "negative_lrt" when the shortfall exceeds the MC noise allowance
    """
    if df < 1:
        raise ContractError("LRT needs at least one restriction")
    raw = 2.0 * (loglik_full - loglik_reduced)
    flagged = None
    if raw < 0:
        shortfall = loglik_reduced - loglik_full
        if shortfall > LRT_NOISE_ALLOWANCE * mc_se:
            logger.warning("full model log-likelihood below the reduced one by %.4g (MC SE %.4g)",
                           shortfall, mc_se)
            flagged = "negative_lrt"
    statistic = max(0.0, raw)
    return TestResult(statistic=statistic, df=int(df), p_value=chi_square_sf(statistic, df),
                      kind="lrt", parameter=parameter, flagged=flagged)


def coefficient_table(fit_result):
    """
    Wald z and p-value for every estimated parameter

    Variance parameters are tested on the sigma^2 scale against 0.

    Returns:
        list of dict rows (name, estimate, se, z, p_value); se, z and p_value
        are None where no standard error is available
    """
    rows = []
    for name, estimate in fit_result.theta.as_named().items():
        se = fit_result.se.get(name)
        row = {"name": name, "estimate": float(estimate), "se": se, "z": None, "p_value": None}
        if se is not None and se > 0:
            result = wald_test(float(estimate), se, 0.0, parameter=name)
            row["z"] = float(estimate / se)
            row["p_value"] = result.p_value
        rows.append(row)
    return rows
