"""
Command-line interface of the ZIBBMR estimator.

Subcommands:
    simulate  draw a dataset from a built-in setting and write it as CSV
    fit       run SAEM on a CSV dataset and write a JSON result file
    loglik    importance-sampling (or quadrature) log-likelihood of a fit
    test      Wald and likelihood-ratio tests of coefficients pinned to 0
    bench     simulation study of a built-in setting, metrics as CSV

Exit status is 0 on success, 1 on usage or input errors and 2 on numerical
failures.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from src import __version__
from src.components.inference import coefficient_table, lrt, wald_test
from src.components.likelihood import (
    ProposalMoments,
    information_criteria,
    loglik_importance,
    loglik_quadrature,
)
from src.components.model import Theta, param_names
from src.components.saem import fit
from src.components.simstudy import builtin_setting, default_theta0, generate_dataset, run_replications, type1_study
from src.utils.config import (
    IS_STREAM_ID,
    RESULT_SCHEMA,
    RESULT_SCHEMA_NAME,
    SIMULATION_STREAM_ID,
    RunConfig,
    load_config,
    setup_logging,
)
from src.utils.data_processing import load_dataset_csv, write_dataset_csv
from src.utils.exceptions import (
    DecompositionError,
    NoInformationError,
    NumericalFailure,
    ParseError,
    UsageError,
    ZibbmrError,
)
from src.utils.numerics import RngStream, clamp_probability, logit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route those to EXIT_USAGE instead
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="zibbmr", description="Zero-inflated beta-binomial mixed regression via SAEM")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        if data:
            p.add_argument("--data", required=True, help="CSV dataset")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--mode", choices=["original", "augmented"], help="simulation step variant")
        p.add_argument("--threads", type=int, help="worker threads/processes")
        p.add_argument("--out", required=True, help="output file")

    p = sub.add_parser("simulate", help="simulate a dataset from a built-in setting")
    p.add_argument("--setting", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--t-per-subject", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit the model to a dataset")
    common(p)
    p.add_argument("--null", help="comma-separated coefficients pinned to 0")

    p = sub.add_parser("loglik", help="log-likelihood of a fitted model")
    common(p)
    p.add_argument("--fit", required=True, help="result file written by the fit subcommand")
    p.add_argument("--quadrature", type=int, metavar="NODES",
                   help="use Gauss-Hermite quadrature with this many nodes per dimension")

    p = sub.add_parser("test", help="Wald and likelihood-ratio tests")
    common(p)
    p.add_argument("--null", required=True, help="comma-separated coefficients tested against 0")

    p = sub.add_parser("bench", help="simulation study of a built-in setting")
    common(p, data=False)
    p.add_argument("--setting", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--t-per-subject", type=int)
    p.add_argument("--type1", action="store_true", help="also run the Type-I error study")
    return parser


def _run_config(args):
    run = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    fit_cfg = run.fit.with_overrides(seed=args.seed, mode=getattr(args, "mode", None),
                                     threads=getattr(args, "threads", None))
    return replace(run, fit=fit_cfg)


def _null_list(text):
    return tuple(name.strip() for name in text.split(",") if name.strip()) if text else ()


def initial_theta(run, data):
    """
    Starting values: init_theta from the config, otherwise crude moment
    estimates (share of positive counts for a, pooled proportion for b)
    """
    if run.init_theta is not None:
        theta = Theta.from_dict(run.init_theta)
        theta.check_dims(data.dim_x, data.dim_z)
        return theta
    share = float(clamp_probability(data.positive.mean(), 1e-3))
    pos = data.positive
    prop = float(clamp_probability(data.y[pos].sum() / data.s[pos].sum(), 1e-3)) if pos.any() else 0.5
    return Theta(10.0, logit(share), logit(prop), np.zeros(data.dim_x), np.zeros(data.dim_z), 1.0, 1.0)


def _load_data(args, run):
    return load_dataset_csv(args.data, run.x_columns, run.z_columns)


def _finite_or_none(value):
    return float(value) if value is not None and np.isfinite(value) else None


def fit_payload(result, data, ll, run, every=None):
    """JSON-ready description of a FitResult"""
    names = result.names
    n_free = len(result.free_names)
    loglik = None
    if ll is not None:
        aic, bic = information_criteria(ll.loglik, n_free, data.n_subjects)
        loglik = {"value": ll.loglik, "mc_se": ll.mc_se, "aic": aic, "bic": bic}
    every = every or run.fit.log_every
    traj = result.trajectory
    sampled = traj[::every] if len(traj) else traj
    return {
        "estimates": {n: float(v) for n, v in zip(names, result.theta.to_vector())},
        "se": {n: _finite_or_none(result.se.get(n)) for n in names},
        "coefficients": coefficient_table(result),
        "loglik": loglik,
        "acceptance": result.acceptance,
        "trajectory": {
            "iterations": int(len(traj) - 1),
            "final_drift": result.drift,
            "every_k": every,
            "samples": [[float(v) for v in row] for row in sampled],
        },
        "random_effects": {
            sid: {"mean": [float(v) for v in result.moments.mean[i]],
                  "var": [float(v) for v in result.moments.var[i]]}
            for i, sid in enumerate(data.subject_ids)
        },
        "flags": list(result.flags),
        "elapsed": float(result.elapsed),
    }


def write_result(path, command, run, body):
    """Validate against RESULT_SCHEMA and write a self-describing JSON result"""
    doc = {
        "schema": RESULT_SCHEMA_NAME,
        "version": __version__,
        "command": command,
        "seed": run.fit.seed,
        "config": run.to_dict(),
    }
    doc.update(body)
    jsonschema.validate(instance=doc, schema=RESULT_SCHEMA)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    logger.info("Wrote %s result to %s", command, path)


def cmd_simulate(args):
    spec = builtin_setting(args.setting, args.n_subjects, args.t_per_subject)
    seed = args.seed if args.seed is not None else RunConfig().fit.seed
    data, truth = generate_dataset(spec, RngStream(seed, SIMULATION_STREAM_ID))
    write_dataset_csv(data, args.out)
    logger.info("Simulated setting %d (N=%d, T=%d) with truth %s",
                args.setting, spec.n_subjects, spec.t_per_subject, truth.to_sigma_dict())
    return EXIT_OK


def cmd_fit(args):
    run = _run_config(args)
    null = _null_list(args.null)
    if null:
        run = replace(run, fit=run.fit.with_overrides(fixed=null))
    data = _load_data(args, run)
    result = fit(data, initial_theta(run, data), run.fit)
    ll = loglik_importance(data, result.theta, result.moments, run.importance,
                           RngStream(run.fit.seed, IS_STREAM_ID))
    write_result(args.out, "fit", run, fit_payload(result, data, ll, run))
    return EXIT_OK


def _read_fit(path, data):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        jsonschema.validate(instance=doc, schema=RESULT_SCHEMA)
    except FileNotFoundError as e:
        raise UsageError(f"fit result not found: {path}") from e
    except (json.JSONDecodeError, jsonschema.ValidationError) as e:
        raise UsageError(f"{path} is not a valid result file: {e}") from e
    names = param_names(data.dim_x, data.dim_z)
    try:
        theta = Theta.from_vector([doc["estimates"][n] for n in names], data.dim_x, data.dim_z)
        effects = [doc["random_effects"][sid] for sid in data.subject_ids]
    except KeyError as e:
        raise UsageError(f"{path} does not match the dataset: missing {e}") from e
    moments = ProposalMoments(mean=np.array([r["mean"] for r in effects]),
                              sd=np.sqrt(np.array([r["var"] for r in effects])))
    return doc, theta, moments


def cmd_loglik(args):
    run = _run_config(args)
    data = _load_data(args, run)
    doc, theta, moments = _read_fit(args.fit, data)
    seed = doc["seed"] if args.seed is None else args.seed
    n_free = sum(1 for n in doc["estimates"] if n not in doc["config"].get("fixed", []))
    if args.quadrature:
        value, mc_se = loglik_quadrature(data, theta, args.quadrature, moments), None
    else:
        ll = loglik_importance(data, theta, moments, run.importance, RngStream(seed, IS_STREAM_ID))
        value, mc_se = ll.loglik, ll.mc_se
    aic, bic = information_criteria(value, n_free, data.n_subjects)
    run = replace(run, fit=run.fit.with_overrides(seed=seed))
    write_result(args.out, "loglik", run,
                 {"estimates": doc["estimates"], "loglik": {"value": value, "mc_se": mc_se, "aic": aic, "bic": bic}})
    return EXIT_OK


def cmd_test(args):
    run = _run_config(args)
    null = _null_list(args.null)
    if not null:
        raise UsageError("--null needs at least one parameter")
    data = _load_data(args, run)
    theta0 = initial_theta(run, data)
    full = fit(data, theta0, run.fit)
    reduced = fit(data, theta0, run.fit.with_overrides(fixed=null))
    ll_full = loglik_importance(data, full.theta, full.moments, run.importance,
                                RngStream(run.fit.seed, IS_STREAM_ID))
    ll_red = loglik_importance(data, reduced.theta, reduced.moments, run.importance,
                               RngStream(run.fit.seed, IS_STREAM_ID + 1))

    tests = []
    estimates = full.theta.as_named()
    for name in null:
        se = full.se.get(name)
        if se is None:
            logger.warning("no standard error for %s; Wald test skipped", name)
            continue
        tests.append(wald_test(float(estimates[name]), se, 0.0, parameter=name).to_dict())
    tests.append(lrt(ll_full.loglik, ll_red.loglik, len(null),
                     mc_se=float(np.hypot(ll_full.mc_se, ll_red.mc_se)), parameter=",".join(null)).to_dict())
    write_result(args.out, "test", run, {"tests": tests, "flags": list(full.flags)})
    return EXIT_OK


def cmd_bench(args):
    run = _run_config(args)
    spec = builtin_setting(args.setting, args.n_subjects, args.t_per_subject)
    theta0 = Theta.from_dict(run.init_theta) if run.init_theta else default_theta0(args.setting)
    parallelism = run.fit.threads
    # each setting has its own chain count unless the config file names one
    chains = run.fit.chains if run.chains_explicit else None
    report = run_replications(spec, run.fit, args.reps, parallelism=parallelism, theta0=theta0,
                              with_loglik=args.setting == 3, is_config=run.importance, chains=chains)
    report.metrics.to_csv(args.out, index=False, float_format="%.10g")
    logger.info("Setting %d: %d fits, %d failures, mean %.2fs per fit",
                args.setting, len(report.estimates), len(report.failures), report.mean_fit_seconds)
    if report.logliks:
        valid = [ll for ll in report.logliks if ll is not None]
        logger.info("Mean IS log-likelihood %.3f over %d fits (%d failed)",
                    np.mean([v for v, _ in valid]) if valid else float("nan"), len(valid), report.loglik_failures)
    if args.type1:
        table = type1_study(spec, run.fit, args.reps, parallelism=parallelism, theta0=theta0,
                            is_config=run.importance, chains=chains)
        out = Path(args.out)
        table.to_csv(out.with_name(out.stem + "_type1.csv"), index=False, float_format="%.10g")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "loglik": cmd_loglik,
    "test": cmd_test,
    "bench": cmd_bench,
}


def main(argv=None):
    """Parse argv, dispatch the subcommand and map errors to exit statuses"""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"zibbmr: {e}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(getattr(logging, args.log_level))
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ParseError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except (NumericalFailure, NoInformationError, DecompositionError) as e:
        logger.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    except ZibbmrError as e:
        logger.error("invalid input: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
