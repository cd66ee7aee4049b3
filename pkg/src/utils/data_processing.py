"""
Data processing functions for longitudinal count data.

CSV layout: a header row, then columns subject_id (string), time (integer),
y (integer), s (integer), followed by wide-format covariates x_1..x_k and
z_1..z_m (decimal).
"""
import logging
import re

import numpy as np
import pandas as pd

from src.components.model import Dataset, Observation
from src.utils.exceptions import ContractError, ParseError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("subject_id", "time", "y", "s")
_X_PATTERN = re.compile(r"^x_(\d+)$")
_Z_PATTERN = re.compile(r"^z_(\d+)$")


def _covariate_columns(columns, pattern):
    found = [(int(m.group(1)), c) for c in columns if (m := pattern.match(c))]
    return tuple(c for _, c in sorted(found))


def _as_integer(series, name):
    """Convert a column to integers, reporting the first offending row"""
    numeric = pd.to_numeric(series, errors="coerce")
    bad = numeric.isna() | (numeric != np.floor(numeric))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise ParseError(f"column {name!r} must hold integers, got {series.iloc[row - 1]!r}", row=row)
    return numeric.astype(np.int64)


def row_to_observation(row, x_columns, z_columns):
    """Convert one validated CSV row to an Observation"""
    return Observation(
        y=int(row["y"]),
        s=int(row["s"]),
        x=tuple(float(row[c]) for c in x_columns),
        z=tuple(float(row[c]) for c in z_columns),
        occasion=int(row["time"]),
    )


def load_dataset_csv(path, x_columns=None, z_columns=None):
    """
    Load a longitudinal dataset from CSV

    Args:
        path: CSV file path
        x_columns: Zero-component covariate columns; default all x_<k> columns
        z_columns: Mean-component covariate columns; default all z_<k> columns

    Returns:
        Dataset with rows grouped by subject_id (first-appearance order) and
        ordered by time within subject
    """
    try:
        df = pd.read_csv(path, dtype={"subject_id": str})
    except FileNotFoundError as e:
        raise ParseError(f"data file not found: {path}") from e
    except pd.errors.ParserError as e:
        raise ParseError(f"could not parse {path}: {e}") from e

    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ParseError(f"missing required column(s): {', '.join(missing)}")

    x_columns = tuple(x_columns) if x_columns is not None else _covariate_columns(df.columns, _X_PATTERN)
    z_columns = tuple(z_columns) if z_columns is not None else _covariate_columns(df.columns, _Z_PATTERN)
    missing = [c for c in x_columns + z_columns if c not in df.columns]
    if missing:
        raise ParseError(f"missing covariate column(s): {', '.join(missing)}")

    if df["subject_id"].isna().any():
        row = int(np.flatnonzero(df["subject_id"].isna().to_numpy())[0]) + 1
        raise ParseError("empty subject_id", row=row)
    for name in ("time", "y", "s"):
        df[name] = _as_integer(df[name], name)
    for name in x_columns + z_columns:
        values = pd.to_numeric(df[name], errors="coerce")
        if values.isna().any():
            row = int(np.flatnonzero(values.isna().to_numpy())[0]) + 1
            raise ParseError(f"column {name!r} must be numeric", row=row)
        df[name] = values.astype(float)

    bad = (df["s"] < 1) | (df["y"] < 0) | (df["y"] > df["s"])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        y, s = df["y"].iloc[row - 1], df["s"].iloc[row - 1]
        raise ParseError(f"count y={y} must satisfy 0 <= y <= s with s={s} >= 1", row=row)

    subjects = []
    for sid, group in df.groupby("subject_id", sort=False):
        group = group.sort_values("time", kind="stable")
        obs = [row_to_observation(row, x_columns, z_columns) for _, row in group.iterrows()]
        subjects.append((sid, obs))

    try:
        data = Dataset(tuple(subjects), len(x_columns), len(z_columns))
    except ContractError as e:
        raise ParseError(str(e)) from e
    logger.info("Loaded %d observations for %d subjects from %s", data.n_obs, data.n_subjects, path)
    return data


def dataset_to_frame(data):
    """Flat DataFrame in the CSV layout"""
    frame = pd.DataFrame({
        "subject_id": [sid for sid, obs in data.subjects for _ in obs],
        "time": data.occasion,
        "y": data.y.astype(np.int64),
        "s": data.s.astype(np.int64),
    })
    for j in range(data.dim_x):
        frame[f"x_{j + 1}"] = data.x[:, j]
    for j in range(data.dim_z):
        frame[f"z_{j + 1}"] = data.z[:, j]
    return frame


def write_dataset_csv(data, path):
    """Write a dataset in the CSV layout read by load_dataset_csv"""
    dataset_to_frame(data).to_csv(path, index=False)
