"""
Simulation study harness: data generators for the four built-in settings,
bias/RMSE/MAE metrics, the Monte Carlo replication runner and the Type-I
error study.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import special
from tqdm import tqdm

from src.components.inference import lrt, wald_test
from src.components.likelihood import loglik_importance
from src.components.model import Dataset, Theta
from src.components.saem import fit
from src.utils.config import DEFAULT_CHAINS, IS_STREAM_ID, SIMULATION_STREAM_ID, ISConfig
from src.utils.exceptions import (
    ContractError,
    DecompositionError,
    NoInformationError,
    NumericalFailure,
    UsageError,
)
from src.utils.numerics import RngStream, clamp_probability, sample_beta, sample_normal, sample_uniform_int

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["setting", "parameter", "true", "bias", "rmse", "mae", "n_reps", "n_fail"]
MAX_FAILURE_SHARE = 0.5
RECOVERABLE = (NumericalFailure, NoInformationError, DecompositionError)


@dataclass(frozen=True)
class PhiLaw:
    """Dispersion of a setting: a fixed value, or Uniform(low, high) drawn per dataset"""
    value: float = None
    low: float = None
    high: float = None

    def __post_init__(self):
        if self.value is None and (self.low is None or self.high is None or not 0 < self.low < self.high):
            raise ContractError("phi law needs a fixed value or 0 < low < high")

    @classmethod
    def uniform(cls, low, high):
        return cls(low=low, high=high)

    @property
    def is_random(self):
        return self.value is None

    def draw(self, stream):
        if not self.is_random:
            return float(self.value)
        return float(self.low + (self.high - self.low) * stream.uniform())


@dataclass(frozen=True)
class CovariatePlan:
    """
    Covariates shared by both linear predictors (X = Z)

    kind "binary_half": one covariate, 0 for the first N/2 subjects and 1 after.
    kind "binary_half_plus_normal": the same plus a N(mean, sd) covariate per occasion.
    """
    kind: str = "binary_half"
    mean: float = 0.0
    sd: float = 1.0

    @property
    def dim(self):
        return 1 if self.kind == "binary_half" else 2

    def draw(self, stream, n_subjects, t_per_subject):
        binary = np.repeat((np.arange(n_subjects) >= n_subjects // 2).astype(float), t_per_subject)
        if self.kind == "binary_half":
            return binary[:, None]
        if self.kind == "binary_half_plus_normal":
            normal = self.mean + self.sd * stream.standard_normal(n_subjects * t_per_subject)
            return np.column_stack([binary, normal])
        raise ContractError(f"unknown covariate plan {self.kind!r}")


@dataclass(frozen=True)
class SettingSpec:
    setting_id: int
    theta_true: Theta
    n_subjects: int = 50
    t_per_subject: int = 10
    covariate_plan: CovariatePlan = field(default_factory=CovariatePlan)
    s_range: tuple = (200, 800)
    phi_law: PhiLaw = None
    chains: int = DEFAULT_CHAINS

    def __post_init__(self):
        if self.n_subjects < 1 or self.t_per_subject < 1:
            raise ContractError("a setting needs at least one subject and one occasion")
        if self.chains < 1:
            raise ContractError("a setting needs at least one chain")
        lo, hi = self.s_range
        if not 1 <= lo <= hi:
            raise ContractError(f"empty trial range {self.s_range}")
        dim = self.covariate_plan.dim
        self.theta_true.check_dims(dim, dim)
        if self.phi_law is None:
            object.__setattr__(self, "phi_law", PhiLaw(value=self.theta_true.phi))

    def with_size(self, n_subjects=None, t_per_subject=None):
        return SettingSpec(self.setting_id, self.theta_true,
                           n_subjects or self.n_subjects, t_per_subject or self.t_per_subject,
                           self.covariate_plan, self.s_range, self.phi_law, self.chains)


@dataclass(frozen=True)
class MetricRow:
    parameter: str
    true: float
    bias: float
    rmse: float
    mae: float
    n_replicates: int


def builtin_setting(setting_id, n_subjects=None, t_per_subject=None):
    """
    Data-generating settings of the simulation study

    Settings 1 and 2 use a single binary covariate; 3 and 4 add a normal one.
    Setting 4 has true-zero first coefficients and phi ~ Uniform(2, 10);
    its default size is N=30 and its fits run 10 chains.
    """
    if setting_id == 1:
        theta = Theta.from_sigma_scale(6.4, -0.5, -0.5, [0.5], [0.5], 0.7, 0.5)
        spec = SettingSpec(1, theta)
    elif setting_id == 2:
        theta = Theta.from_sigma_scale(10.4, -0.5, 0.5, [0.5], [-0.5], 1.4, 0.8)
        spec = SettingSpec(2, theta)
    elif setting_id == 3:
        theta = Theta.from_sigma_scale(12.3, -1.8, -0.9, [0.8, -0.7], [0.6, -0.9], 1.35, 1.28)
        spec = SettingSpec(3, theta, covariate_plan=CovariatePlan("binary_half_plus_normal", 2.0, 1.0))
    elif setting_id == 4:
        # phi is drawn per dataset; 6.0 is the law's mean and only a placeholder
        theta = Theta.from_sigma_scale(6.0, 0.5, -0.5, [0.0, -0.5], [0.0, 0.5], 0.7, 0.5)
        spec = SettingSpec(4, theta, n_subjects=30,
                           covariate_plan=CovariatePlan("binary_half_plus_normal", 1.0, 1.0),
                           phi_law=PhiLaw.uniform(2.0, 10.0), chains=10)
    else:
        raise UsageError(f"unknown setting {setting_id!r}; expected 1, 2, 3 or 4")
    return spec.with_size(n_subjects, t_per_subject)


def default_theta0(setting_id):
    """SAEM starting values used for the built-in settings"""
    if setting_id in (1, 2):
        return Theta.from_sigma_scale(18.0, -0.3, 0.2, [0.8], [0.1], 0.48, 0.72)
    if setting_id in (3, 4):
        return Theta.from_sigma_scale(6.0, 0.4, -0.7, [0.3, -0.2], [0.2, 0.1], 0.28, 0.61)
    raise UsageError(f"unknown setting {setting_id!r}; expected 1, 2, 3 or 4")


def generate_dataset(spec, stream):
    """
    Simulate one dataset from a setting

    Returns:
        tuple: (Dataset, Theta actually used; phi differs from spec.theta_true
        when the setting's phi law is random)
    """
    theta = spec.theta_true
    phi = spec.phi_law.draw(stream)
    if phi != theta.phi:
        theta = Theta(phi, theta.a, theta.b, theta.alpha, theta.beta, theta.sigma1_sq, theta.sigma2_sq)

    n, t = spec.n_subjects, spec.t_per_subject
    re = sample_normal(stream, theta.mu(), theta.G(), size=n)
    cov = spec.covariate_plan.draw(stream, n, t)
    subject = np.repeat(np.arange(n), t)
    s = sample_uniform_int(stream, spec.s_range[0], spec.s_range[1], size=n * t)

    p = special.expit(re[subject, 0] + cov @ theta.alpha)
    u = clamp_probability(special.expit(re[subject, 1] + cov @ theta.beta))
    present = stream.uniform(n * t) < p
    w = sample_beta(stream, u * phi, (1 - u) * phi)
    y = np.where(present, stream.generator.binomial(s, w), 0)

    ids = [f"s{i + 1:03d}" for i in subject]
    occasion = np.tile(np.arange(1, t + 1), n)
    return Dataset.from_arrays(ids, y, s, cov, cov, occasion), theta


def _sigma_scale(theta):
    out = theta.as_named()
    out["sigma1"] = float(np.sqrt(out.pop("sigma1_sq")))
    out["sigma2"] = float(np.sqrt(out.pop("sigma2_sq")))
    return out


def compute_metrics(estimates, theta_true):
    """
    Bias, RMSE and MAE per parameter, variances reported on the sigma scale

    Args:
        estimates: Non-empty list of fitted Theta
        theta_true: Theta, or a list of per-replicate Theta when the truth varies

    Returns:
        list of MetricRow
    """
    if not estimates:
        raise ContractError("compute_metrics needs at least one estimate")
    truths = theta_true if isinstance(theta_true, (list, tuple)) else [theta_true] * len(estimates)
    if len(truths) != len(estimates):
        raise ContractError("one true parameter set is needed per estimate")
    est = pd.DataFrame([_sigma_scale(e) for e in estimates])
    true = pd.DataFrame([_sigma_scale(t) for t in truths])
    err = est - true
    rows = []
    for name in est.columns:
        e = err[name].to_numpy()
        rows.append(MetricRow(
            parameter=name,
            true=float(true[name].mean()),
            bias=float(e.mean()),
            rmse=float(np.sqrt(np.mean(e ** 2))),
            mae=float(np.mean(np.abs(e))),
            n_replicates=len(e),
        ))
    return rows


def metrics_frame(rows, setting_id, n_fail):
    """Metric rows as a DataFrame with the bench CSV columns"""
    return pd.DataFrame(
        [[setting_id, r.parameter, r.true, r.bias, r.rmse, r.mae, r.n_replicates, n_fail] for r in rows],
        columns=METRIC_COLUMNS,
    )


@dataclass
class ReplicationReport:
    metrics: pd.DataFrame
    estimates: list
    truths: list
    standard_errors: list
    failures: list
    logliks: list = field(default_factory=list)
    loglik_failures: int = 0
    mean_fit_seconds: float = None


def _replicate_streams(seed, rep):
    rep_stream = RngStream(seed, SIMULATION_STREAM_ID).child(rep)
    fit_seed = int(rep_stream.child(1).generator.integers(2 ** 62))
    return rep_stream.child(0), fit_seed


def _one_replicate(spec, fit_config, theta0, rep, with_loglik, is_config, chains):
    data_stream, fit_seed = _replicate_streams(fit_config.seed, rep)
    data, truth = generate_dataset(spec, data_stream)
    config = fit_config.with_overrides(seed=fit_seed, threads=1, chains=chains)
    try:
        result = fit(data, theta0, config)
    except RECOVERABLE as e:
        return {"rep": rep, "error": f"{type(e).__name__}: {e}"}
    out = {"rep": rep, "theta": result.theta, "truth": truth, "se": result.se, "elapsed": result.elapsed}
    if with_loglik:
        try:
            ll = loglik_importance(data, result.theta, result.moments, is_config,
                                   RngStream(fit_seed, IS_STREAM_ID))
            out["loglik"] = (ll.loglik, ll.mc_se)
        except RECOVERABLE as e:
            logger.warning("replicate %d: log-likelihood failed: %s", rep, e)
            out["loglik"] = None
    return out


def _run_parallel(func, args_list, parallelism, desc, progress):
    # loky worker processes; results come back in submission order
    with Parallel(n_jobs=parallelism, return_as="generator") as parallel:
        results = parallel(delayed(func)(*args) for args in args_list)
        return list(tqdm(results, total=len(args_list), desc=desc, disable=not progress))


def _check_failures(failures, n_reps):
    if len(failures) > MAX_FAILURE_SHARE * n_reps:
        detail = "; ".join(f"rep {f['rep']}: {f['error']}" for f in failures[:5])
        raise NumericalFailure(f"{len(failures)} of {n_reps} replicates failed ({detail})")


def run_replications(spec, fit_config, n_reps, parallelism=1, theta0=None, with_loglik=False,
                     is_config=None, progress=False, chains=None):
    """
    Monte Carlo replication of simulate-then-fit

    Replicate r draws its data from stream (seed, SIMULATION_STREAM_ID, r, 0)
    and its chains from a seed derived from (seed, SIMULATION_STREAM_ID, r, 1),
    so results do not depend on parallelism.

    Args:
        spec: SettingSpec
        fit_config: FitConfig; its seed is the root seed of the study
        n_reps: Number of replicates
        parallelism: joblib worker processes
        theta0: Starting Theta; default_theta0(spec.setting_id) when None
        with_loglik: Also compute the IS log-likelihood of every fit
        is_config: ISConfig for with_loglik
        progress: Show a tqdm progress bar
        chains: Chains per fit; spec.chains when None, overriding fit_config.chains

    Returns:
        ReplicationReport

    Raises:
        NumericalFailure: If more than half of the replicates fail
    """
    if n_reps < 1:
        raise UsageError("n_reps must be at least 1")
    theta0 = theta0 or default_theta0(spec.setting_id)
    is_config = is_config or ISConfig()
    chains = chains or spec.chains
    logger.info("Running %d replicates of setting %d (N=%d, T=%d, %d chains)",
                n_reps, spec.setting_id, spec.n_subjects, spec.t_per_subject, chains)
    args = [(spec, fit_config, theta0, rep, with_loglik, is_config, chains) for rep in range(n_reps)]
    outcomes = _run_parallel(_one_replicate, args, parallelism, f"setting {spec.setting_id}", progress)

    failures = [o for o in outcomes if "error" in o]
    for f in failures:
        logger.warning("replicate %d failed: %s", f["rep"], f["error"])
    _check_failures(failures, n_reps)
    good = [o for o in outcomes if "error" not in o]

    estimates = [o["theta"] for o in good]
    truths = [o["truth"] for o in good]
    rows = compute_metrics(estimates, truths)
    report = ReplicationReport(
        metrics=metrics_frame(rows, spec.setting_id, len(failures)),
        estimates=estimates,
        truths=truths,
        standard_errors=[o["se"] for o in good],
        failures=failures,
        mean_fit_seconds=float(np.mean([o["elapsed"] for o in good])),
    )
    if with_loglik:
        report.logliks = [o["loglik"] for o in good]
        report.loglik_failures = sum(1 for ll in report.logliks if ll is None)
    return report


def _one_type1_replicate(spec, fit_config, theta0, rep, tested, is_config, chains):
    data_stream, fit_seed = _replicate_streams(fit_config.seed, rep)
    data, _ = generate_dataset(spec, data_stream)
    config = fit_config.with_overrides(seed=fit_seed, threads=1, chains=chains)
    try:
        full = fit(data, theta0, config)
        reduced = fit(data, theta0, config.with_overrides(fixed=tuple(tested)))
        ll_full = loglik_importance(data, full.theta, full.moments, is_config, RngStream(fit_seed, IS_STREAM_ID))
        ll_red = loglik_importance(data, reduced.theta, reduced.moments, is_config,
                                   RngStream(fit_seed, IS_STREAM_ID + 1))
    except RECOVERABLE as e:
        return {"rep": rep, "error": f"{type(e).__name__}: {e}"}

    tests = {}
    for name in tested:
        se = full.se.get(name)
        if se is not None:
            tests[name] = wald_test(float(full.theta.as_named()[name]), se, 0.0, parameter=name)
    combined_se = float(np.hypot(ll_full.mc_se, ll_red.mc_se))
    tests["joint"] = lrt(ll_full.loglik, ll_red.loglik, len(tested), mc_se=combined_se,
                         parameter=",".join(tested))
    return {"rep": rep, "tests": tests}


def type1_study(spec, fit_config, n_reps, levels=(0.05, 0.01), tested=("alpha_1", "beta_1"),
                parallelism=1, theta0=None, is_config=None, progress=False, chains=None):
    """
    Empirical rejection rates under true-zero coefficients

    Every replicate fits the full model and the model with the tested
    coefficients pinned to 0, then runs a Wald test per coefficient and the
    joint LRT. Fits use spec.chains unless chains is given.

    Returns:
        DataFrame with columns test, level, rejection_rate, n_valid
    """
    truth = spec.theta_true.as_named()
    nonzero = [name for name in tested if truth[name] != 0.0]
    if nonzero:
        raise ContractError(f"tested coefficients must be zero in the setting, not {nonzero}")
    theta0 = theta0 or default_theta0(spec.setting_id)
    is_config = is_config or ISConfig()
    chains = chains or spec.chains
    args = [(spec, fit_config, theta0, rep, tuple(tested), is_config, chains) for rep in range(n_reps)]
    outcomes = _run_parallel(_one_type1_replicate, args, parallelism, "type I", progress)

    failures = [o for o in outcomes if "error" in o]
    _check_failures(failures, n_reps)
    rows = []
    for test_name in list(tested) + ["joint"]:
        results = [o["tests"][test_name] for o in outcomes if "tests" in o and test_name in o["tests"]]
        for level in levels:
            rate = float(np.mean([r.rejects(level) for r in results])) if results else float("nan")
            rows.append({"test": test_name, "level": level, "rejection_rate": rate, "n_valid": len(results)})
    return pd.DataFrame(rows, columns=["test", "level", "rejection_rate", "n_valid"])
