"""
Configuration module for the ZIBBMR estimator.

Defaults follow the simulation-study settings of the reference analysis:
5 chains, K1=750 exploration iterations followed by K2=250 convergence
iterations, and a t_5 importance sampler with 500 draws per subject.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import jsonschema

from src.utils.exceptions import UsageError

# SAEM defaults
DEFAULT_CHAINS = 5
DEFAULT_K1 = 750
DEFAULT_K2 = 250
DEFAULT_KERNEL_SCHEDULE = (2, 2, 2)
DEFAULT_TARGET_ACCEPT = 0.3
DEFAULT_SEED = 20240601

# Importance sampling defaults
DEFAULT_IS_NU = 5.0
DEFAULT_IS_K = 500

# Numerical floors and clamps
PROB_CLAMP = 1e-12
VARIANCE_FLOOR = 1e-8
PHI_FLOOR = 1e-6
OMEGA_EIGEN_BOUNDS = (1e-6, 1e4)
BETABIN_MAX_ITER = 200
LOGISTIC_RIDGE = 1e-4
DRIFT_WINDOW = 50

SAMPLER_MODES = ("original", "augmented")
SE_METHODS = ("louis", "none")
MOMENT_PHASES = ("all", "k2")

# Stream ids reserved outside the per-chain range
IS_STREAM_ID = 10_000
SIMULATION_STREAM_ID = 20_000

RESULT_SCHEMA_NAME = "zibbmr-result/1"

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "chains": {"type": "integer", "minimum": 1},
        "k1": {"type": "integer", "minimum": 0},
        "k2": {"type": "integer", "minimum": 0},
        "m1": {"type": "integer", "minimum": 0},
        "m2": {"type": "integer", "minimum": 0},
        "m3": {"type": "integer", "minimum": 0},
        "mode": {"enum": list(SAMPLER_MODES)},
        "is_nu": {"type": "number", "exclusiveMinimum": 0},
        "is_k": {"type": "integer", "minimum": 1},
        "target_accept": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "se_method": {"enum": list(SE_METHODS)},
        "moments_phase": {"enum": list(MOMENT_PHASES)},
        "threads": {"type": "integer", "minimum": 1},
        "x_columns": {"type": "array", "items": {"type": "string"}},
        "z_columns": {"type": "array", "items": {"type": "string"}},
        "init_theta": {
            "type": "object",
            "additionalProperties": False,
            "required": ["phi", "a", "b", "alpha", "beta", "sigma1", "sigma2"],
            "properties": {
                "phi": {"type": "number", "exclusiveMinimum": 0},
                "a": {"type": "number"},
                "b": {"type": "number"},
                "alpha": {"type": "array", "items": {"type": "number"}},
                "beta": {"type": "array", "items": {"type": "number"}},
                "sigma1": {"type": "number", "exclusiveMinimum": 0},
                "sigma2": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}


_NUMBER_OR_NULL = {"type": ["number", "null"]}

RESULT_SCHEMA = {
    "type": "object",
    "required": ["schema", "version", "command", "seed"],
    "properties": {
        "schema": {"const": RESULT_SCHEMA_NAME},
        "version": {"type": "string"},
        "command": {"enum": ["fit", "loglik", "test"]},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "estimates": {"type": "object", "additionalProperties": {"type": "number"}},
        "se": {"type": "object", "additionalProperties": _NUMBER_OR_NULL},
        "coefficients": {"type": "array"},
        "loglik": {
            "type": ["object", "null"],
            "properties": {"value": {"type": "number"}, "mc_se": _NUMBER_OR_NULL,
                           "aic": {"type": "number"}, "bic": {"type": "number"}},
        },
        "acceptance": {"type": "object", "additionalProperties": _NUMBER_OR_NULL},
        "trajectory": {"type": "object"},
        "random_effects": {"type": "object"},
        "flags": {"type": "array", "items": {"type": "string"}},
        "elapsed": {"type": "number"},
        "tests": {"type": "array"},
    },
}


@dataclass(frozen=True)
class FitConfig:
    """
    Knobs of a single SAEM fit

    Args:
        chains: Number of parallel Markov chains (m)
        k1: Exploration iterations with step size 1
        k2: Convergence iterations with step size 1/(q-K1)
        m1, m2, m3: MH sweeps per iteration for the prior, multivariate
            random-walk and univariate random-walk kernels
        mode: "original" or "augmented" simulation step
        seed: Root seed; chain l draws from stream (seed, l)
        target_accept: Target acceptance rate of the multivariate random walk
        se_method: "louis" or "none"
        moments_phase: Iterations feeding the conditional moments, "all" or "k2"
        threads: Worker threads for the simulation step (never changes results)
        fixed: Parameter names pinned to zero (reduced models)
        log_every: Iteration interval of progress log records
    """
    chains: int = DEFAULT_CHAINS
    k1: int = DEFAULT_K1
    k2: int = DEFAULT_K2
    m1: int = DEFAULT_KERNEL_SCHEDULE[0]
    m2: int = DEFAULT_KERNEL_SCHEDULE[1]
    m3: int = DEFAULT_KERNEL_SCHEDULE[2]
    mode: str = "original"
    seed: int = DEFAULT_SEED
    target_accept: float = DEFAULT_TARGET_ACCEPT
    se_method: str = "louis"
    moments_phase: str = "all"
    threads: int = 1
    fixed: tuple = ()
    log_every: int = 100

    def __post_init__(self):
        if self.chains < 1:
            raise UsageError("chains must be at least 1")
        if self.k1 < 0 or self.k2 < 0:
            raise UsageError("k1 and k2 must be non-negative")
        if min(self.m1, self.m2, self.m3) < 0 or self.m1 + self.m2 + self.m3 < 1:
            raise UsageError("kernel sweep counts must be non-negative with a positive sum")
        if self.mode not in SAMPLER_MODES:
            raise UsageError(f"mode must be one of {SAMPLER_MODES}, got {self.mode!r}")
        if self.se_method not in SE_METHODS:
            raise UsageError(f"se_method must be one of {SE_METHODS}, got {self.se_method!r}")
        if self.moments_phase not in MOMENT_PHASES:
            raise UsageError(f"moments_phase must be one of {MOMENT_PHASES}")
        if self.moments_phase == "k2" and self.k2 == 0:
            raise UsageError("moments_phase \"k2\" needs k2 >= 1 convergence iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise UsageError("target_accept must lie in (0, 1)")
        if self.threads < 1:
            raise UsageError("threads must be at least 1")
        object.__setattr__(self, "fixed", tuple(self.fixed))

    def with_overrides(self, **changes):
        """Copy with the given fields replaced, skipping None values"""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


@dataclass(frozen=True)
class ISConfig:
    """Importance-sampling settings: t_nu proposals and K draws per subject"""
    nu: float = DEFAULT_IS_NU
    k_samples: int = DEFAULT_IS_K

    def __post_init__(self):
        if self.nu <= 0:
            raise UsageError("is_nu must be positive")
        if self.k_samples < 1:
            raise UsageError("is_k must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a CLI run needs

    init_theta is kept on the sigma scale exactly as written in the config
    file; the model converts it to variances.
    chains_explicit records whether the config file named a chain count, so
    that simulation settings with their own default can tell the two apart.
    """
    fit: FitConfig = field(default_factory=FitConfig)
    importance: ISConfig = field(default_factory=ISConfig)
    init_theta: dict = None
    x_columns: tuple = None
    z_columns: tuple = None
    chains_explicit: bool = False

    def to_dict(self):
        """Flat JSON-ready view embedded in result files"""
        out = {k: v for k, v in asdict(self.fit).items() if k != "log_every"}
        out["fixed"] = list(self.fit.fixed)
        out["is_nu"] = self.importance.nu
        out["is_k"] = self.importance.k_samples
        out["init_theta"] = self.init_theta
        out["x_columns"] = list(self.x_columns) if self.x_columns is not None else None
        out["z_columns"] = list(self.z_columns) if self.z_columns is not None else None
        return out


def run_config_from_dict(raw):
    """
    Build a RunConfig from a parsed JSON document

    Args:
        raw: Mapping with the keys of CONFIG_SCHEMA

    Returns:
        RunConfig
    """
    try:
        jsonschema.validate(instance=raw, schema=CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise UsageError(f"invalid config: {e.message}") from e

    fit_keys = ("seed", "chains", "k1", "k2", "m1", "m2", "m3", "mode",
                "target_accept", "se_method", "moments_phase", "threads")
    fit = FitConfig(**{k: raw[k] for k in fit_keys if k in raw})
    importance = ISConfig(nu=raw.get("is_nu", DEFAULT_IS_NU), k_samples=raw.get("is_k", DEFAULT_IS_K))
    x_cols = tuple(raw["x_columns"]) if "x_columns" in raw else None
    z_cols = tuple(raw["z_columns"]) if "z_columns" in raw else None
    return RunConfig(fit=fit, importance=importance, init_theta=raw.get("init_theta"),
                     x_columns=x_cols, z_columns=z_cols, chains_explicit="chains" in raw)


def load_config(path):
    """Read and validate a JSON config file"""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from e
    return run_config_from_dict(raw)


def setup_logging(level=logging.INFO):
    """Configure the root handler once; library modules only create loggers"""
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
