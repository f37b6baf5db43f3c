"""CSV reading and writing for profiles, traces and metrics.

Floats are written with ``repr`` so a write/read round trip is exact.
Reader errors carry the file name and 1-based line number.
"""

from __future__ import annotations

import csv
import math
import os
from collections.abc import Mapping, Sequence

import numpy as np

from .profiles import Profile

METRICS_COLUMNS = ("scenario", "irr_rmse", "temp_rmse", "tracking_error", "max_ripple", "rst_iters_max")

# accepted header names for single-valued profile files
PROFILE_COLUMNS = {
    "irradiance": "irradiance_w_per_m2",
    "temperature": "temperature_kelvin",
    "frequency": "frequency_hz",
    "setpoint": "pref_watts",
}


class CsvFormatError(ValueError):
    """Malformed CSV content."""


class SchemaError(CsvFormatError):
    """Header does not match the expected columns."""


class EmptySeriesError(CsvFormatError):
    """File holds no data rows."""


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_columns(path: str | os.PathLike, columns: Mapping[str, Sequence], order: Sequence[str] | None = None) -> None:
    """Write equal-length columns as CSV with a header row."""
    names = list(order) if order is not None else list(columns)
    data = [np.asarray(columns[n]) if not isinstance(columns[n], list) else columns[n] for n in names]
    n = len(data[0]) if data else 0
    if any(len(c) != n for c in data):
        raise ValueError("columns have different lengths")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for k in range(n):
            w.writerow([_fmt(c[k]) for c in data])


def _data_lines(path):
    """Yield (line_no, row) skipping blank lines and '#' comments."""
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row[0].lstrip().startswith("#"):
                continue
            yield line_no, [c.strip() for c in row]


def read_columns(
    path: str | os.PathLike,
    required: Sequence[str] = (),
    text_columns: Sequence[str] = (),
) -> dict[str, np.ndarray | list[str]]:
    """Read a headed CSV into named columns.

    Numeric columns become float arrays; names in ``text_columns`` stay
    strings.  Missing required columns raise :class:`SchemaError`, a file
    without data rows raises :class:`EmptySeriesError`.
    """
    lines = _data_lines(path)
    try:
        header_no, header = next(lines)
    except StopIteration:
        raise EmptySeriesError(f"{path}: empty file") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}:{header_no}: missing column(s) {', '.join(missing)}; header is {header}")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}:{header_no}: duplicate column names in {header}")
    cols: dict[str, list] = {h: [] for h in header}
    text = set(text_columns)
    for line_no, row in lines:
        if len(row) != len(header):
            raise CsvFormatError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
        for h, cell in zip(header, row):
            if h in text:
                cols[h].append(cell)
                continue
            try:
                cols[h].append(float(cell))
            except ValueError:
                raise CsvFormatError(f"{path}:{line_no}: column {h!r}: not a number: {cell!r}") from None
    if not cols[header[0]]:
        raise EmptySeriesError(f"{path}: no data rows")
    return {h: (v if h in text else np.asarray(v, dtype=float)) for h, v in cols.items()}


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------


def read_profile(path: str | os.PathLike, column: str | None = None) -> Profile:
    """Two-column time series ``t_seconds,<value>``.

    With ``column`` omitted the single non-time column is used.
    """
    cols = read_columns(path, ["t_seconds"] + ([column] if column else []))
    if column is None:
        others = [c for c in cols if c != "t_seconds"]
        if len(others) != 1:
            raise SchemaError(f"{path}: expected exactly one value column besides t_seconds, got {others}")
        column = others[0]
    name = next((k for k, v in PROFILE_COLUMNS.items() if v == column), column)
    t = cols["t_seconds"]
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise CsvFormatError(f"{path}: time column not strictly increasing at data row {bad[0] + 2}")
    return Profile(t, cols[column], name)


def write_profile(path: str | os.PathLike, profile: Profile, column: str) -> None:
    write_columns(path, {"t_seconds": profile.t, column: profile.values})


def read_setpoints(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    cols = read_columns(path, ["t_seconds", "pref_watts"])
    return cols["t_seconds"], cols["pref_watts"]


def write_setpoints(path: str | os.PathLike, t: Sequence[float], pref: Sequence[float]) -> None:
    write_columns(path, {"t_seconds": t, "pref_watts": pref})


def read_frequency(path: str | os.PathLike) -> Profile:
    return read_profile(path, "frequency_hz")


# ---------------------------------------------------------------------------
# Traces and metrics
# ---------------------------------------------------------------------------


def write_trace(path, trace) -> None:
    from .sim import TRACE_COLUMNS

    write_columns(path, trace.columns, TRACE_COLUMNS)


def read_trace(path) -> dict[str, np.ndarray]:
    from .sim import TRACE_COLUMNS

    return read_columns(path, TRACE_COLUMNS)


def write_controller_trace(path, trace) -> None:
    from .sim import CONTROLLER_COLUMNS

    write_columns(path, trace.controller, CONTROLLER_COLUMNS)


def read_controller_trace(path) -> dict[str, np.ndarray]:
    from .sim import CONTROLLER_COLUMNS

    return read_columns(path, CONTROLLER_COLUMNS)


def write_estimator_trace(path, trace) -> None:
    from .sim import ESTIMATOR_COLUMNS

    write_columns(path, trace.estimator_view(), ESTIMATOR_COLUMNS)


def read_estimator_trace(path) -> dict[str, np.ndarray]:
    from .sim import ESTIMATOR_COLUMNS

    return read_columns(path, ESTIMATOR_COLUMNS)


def write_metrics(path, rows: Sequence[Mapping]) -> None:
    """Metrics CSV, one row per scenario.  Absent values are written as ``nan``."""
    cols = {c: [r[c] for r in rows] for c in METRICS_COLUMNS}
    write_columns(path, cols, METRICS_COLUMNS)


def read_metrics(path) -> list[dict]:
    cols = read_columns(path, METRICS_COLUMNS, text_columns=("scenario",))
    out = []
    for k in range(len(cols["scenario"])):
        row = {c: cols[c][k] for c in METRICS_COLUMNS}
        row["scenario"] = cols["scenario"][k]
        row["rst_iters_max"] = int(row["rst_iters_max"]) if math.isfinite(row["rst_iters_max"]) else 0
        for c in METRICS_COLUMNS[1:5]:
            row[c] = float(row[c])
        out.append(row)
    return out
