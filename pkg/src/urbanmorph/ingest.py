"""Census-tract panel ingestion: schema checks, cleaning, windowed split.

The pipeline is load -> zero_row_drop -> IQR outlier screen -> z-score ->
sliding windows split chronologically at a boundary year.  Outlier fences
and standardization statistics are computed on training-period rows only
and then applied everywhere, so nothing after the boundary leaks into
preprocessing.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("urbanmorph.ingest")

CSV_COLUMNS = [
    "tract_id", "year",
    "pop", "pct_25_34", "pct_35_50", "pct_over_65", "pct_white", "pct_nonwhite",
    "pct_black", "pct_college", "income",
    "travel_time", "auto_users", "active_users", "transit_users", "other_users",
]
DEMOGRAPHIC_FEATURES = CSV_COLUMNS[2:11]
TRAVEL_FEATURES = CSV_COLUMNS[11:]
FEATURE_NAMES = DEMOGRAPHIC_FEATURES + TRAVEL_FEATURES
_PCT_FEATURES = {name for name in FEATURE_NAMES if name.startswith("pct_")}


class IngestError(ValueError):
    """Schema violation or unusable data (CLI exit code 3)."""


@dataclass
class TractRecord:
    """One tract-year observation; features align with FEATURE_NAMES."""

    tract_id: str
    year: int
    features: np.ndarray

    def value(self, name: str) -> float:
        return float(self.features[FEATURE_NAMES.index(name)])


@dataclass
class LoadReport:
    rows_read: int = 0
    rows_rejected: int = 0
    reasons: list = field(default_factory=list)  # (line_no, reason), first 20

    def reject(self, line_no: int, reason: str) -> None:
        self.rows_rejected += 1
        if len(self.reasons) < 20:
            self.reasons.append((line_no, reason))


def _validate_row(features: np.ndarray) -> str | None:
    for i, name in enumerate(FEATURE_NAMES):
        v = features[i]
        if not np.isfinite(v):
            return f"{name} not finite"
        if name in _PCT_FEATURES and not (0.0 <= v <= 100.0):
            return f"{name}={v} outside [0, 100]"
        if name not in _PCT_FEATURES and v < 0.0:
            return f"{name}={v} negative"
    return None


def load_csv(path):
    """Parse a tract panel CSV; returns (records, LoadReport).

    The header must match CSV_COLUMNS exactly (missing or reordered
    columns are a schema error).  Rows with unparseable cells, out-of-range
    values or duplicate (tract_id, year) keys are rejected and counted,
    never silently patched.
    """
    path = Path(path)
    report = LoadReport()
    records: list[TractRecord] = []
    seen: set = set()
    with path.open(newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if header != CSV_COLUMNS:
            raise IngestError(
                f"{path}: header mismatch; expected {CSV_COLUMNS}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            report.rows_read += 1
            if len(row) != len(CSV_COLUMNS):
                report.reject(line_no, f"{len(row)} cells, expected {len(CSV_COLUMNS)}")
                continue
            tract_id = row[0].strip()
            try:
                year = int(row[1])
                features = np.array([float(cell) for cell in row[2:]], dtype=np.float64)
            except ValueError:
                report.reject(line_no, "unparseable numeric cell")
                continue
            problem = _validate_row(features)
            if problem:
                report.reject(line_no, problem)
                continue
            key = (tract_id, year)
            if key in seen:
                report.reject(line_no, f"duplicate key {key}")
                continue
            seen.add(key)
            records.append(TractRecord(tract_id, year, features))
    return records, report


def write_csv(path, records) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow([rec.tract_id, rec.year]
                            + [f"{v:.6f}" for v in rec.features])


# ---------------------------------------------------------------------------
# cleaning ops


def zero_row_drop(records):
    """Remove records with zero population or all travel features zero."""
    pop_idx = FEATURE_NAMES.index("pop")
    travel_idx = [FEATURE_NAMES.index(n) for n in TRAVEL_FEATURES]
    kept = [r for r in records
            if r.features[pop_idx] != 0.0 and np.any(r.features[travel_idx] != 0.0)]
    return kept, len(records) - len(kept)


def iqr_fences(values, multiplier: float = 1.5):
    """Tukey fences with linearly interpolated quartiles."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise IngestError("iqr_fences: no values")
    q1, q3 = np.percentile(values, [25.0, 75.0], method="linear")
    iqr = q3 - q1
    return q1 - multiplier * iqr, q3 + multiplier * iqr


def iqr_filter(values, multiplier: float = 1.5):
    """Keep mask for values inside the Tukey fences of their own column."""
    lo, hi = iqr_fences(values, multiplier)
    values = np.asarray(values, dtype=np.float64)
    return (values >= lo) & (values <= hi)


class ConstantFeatureError(IngestError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"constant feature(s): {self.names}")


def zscore(matrix, mu=None, sigma=None):
    """Standardize columns; returns (z, mu, sigma) with population sigma.

    Stats are computed from the input when not supplied.  A zero-variance
    column cannot be standardized and raises ConstantFeatureError; the
    caller decides whether to drop the feature or keep raw values.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if mu is None:
        mu = matrix.mean(axis=0)
        sigma = matrix.std(axis=0)  # population: divides by n
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    zero = np.atleast_1d(sigma) == 0
    if zero.any():
        names = [FEATURE_NAMES[i] if len(zero) == len(FEATURE_NAMES) else str(i)
                 for i in np.flatnonzero(zero)]
        raise ConstantFeatureError(names)
    return (matrix - mu) / sigma, mu, sigma


# ---------------------------------------------------------------------------
# windowing


def classify_window(target_years, boundary: int) -> str:
    """train / test / straddle by where the target span falls."""
    if target_years[-1] <= boundary:
        return "train"
    if target_years[0] > boundary:
        return "test"
    return "straddle"


def enumerate_windows(years, input_len: int, horizon: int, boundary: int):
    """Sliding windows over the contiguous runs of a sorted year list.

    Yields (input_years, target_years, label).  Windows never span a gap
    in the year sequence; windows whose target span straddles the boundary
    are labelled for exclusion so neither split sees mixed-era targets.
    """
    years = list(years)
    runs: list[list[int]] = [[years[0]]] if years else []
    for y in years[1:]:
        if y == runs[-1][-1] + 1:
            runs[-1].append(y)
        else:
            runs.append([y])
    for run in runs:
        span = input_len + horizon
        for start in range(len(run) - span + 1):
            input_years = tuple(run[start:start + input_len])
            target_years = tuple(run[start + input_len:start + span])
            yield input_years, target_years, classify_window(target_years, boundary)


@dataclass
class Window:
    """One training example: standardized inputs x and targets y."""

    tract_id: str
    input_years: tuple
    target_years: tuple
    x: np.ndarray  # (input_len, n_inputs)
    y: np.ndarray  # (horizon, n_targets) standardized
    y_raw: np.ndarray  # (horizon, n_targets) original units


@dataclass
class SplitDataset:
    train: list
    test: list
    boundary_year: int
    input_len: int
    horizon: int
    input_features: list
    target_features: list
    input_mu: np.ndarray
    input_sigma: np.ndarray
    target_mu: np.ndarray
    target_sigma: np.ndarray
    report: dict

    def destandardize_targets(self, y: np.ndarray) -> np.ndarray:
        return y * self.target_sigma + self.target_mu


def chronological_split(records, boundary: int = 2017, input_len: int = 3,
                        horizon: int = 3, iqr_multiplier: float = 1.5) -> SplitDataset:
    """Clean records and split sliding windows at the boundary year.

    Train-period rows (year <= boundary) define the IQR fences and the
    z-score statistics; both are then applied to all rows.  A window is
    train iff its last target year is <= boundary, test iff its first
    target year is > boundary; windows straddling the boundary are dropped
    so no window crosses it.  Constant demographic inputs are dropped with
    a warning; a constant travel target is an error.
    """
    records, n_zero_dropped = zero_row_drop(records)
    if not records:
        raise IngestError("no records left after zero-row drop")
    train_rows = np.array([r.features for r in records if r.year <= boundary])
    if train_rows.size == 0:
        raise IngestError(f"no training rows at or before boundary {boundary}")

    fences = [iqr_fences(train_rows[:, i], iqr_multiplier)
              for i in range(len(FEATURE_NAMES))]
    lo = np.array([f[0] for f in fences])
    hi = np.array([f[1] for f in fences])
    kept = [r for r in records if np.all((r.features >= lo) & (r.features <= hi))]
    n_outlier_dropped = len(records) - len(kept)
    if not kept:
        raise IngestError("all rows rejected by IQR screen")

    train_kept = np.array([r.features for r in kept if r.year <= boundary])
    mu = train_kept.mean(axis=0)
    sigma = train_kept.std(axis=0)

    input_idx = [FEATURE_NAMES.index(n) for n in DEMOGRAPHIC_FEATURES]
    target_idx = [FEATURE_NAMES.index(n) for n in TRAVEL_FEATURES]
    constant_targets = [TRAVEL_FEATURES[j] for j, i in enumerate(target_idx)
                        if sigma[i] == 0]
    if constant_targets:
        raise IngestError(f"target feature(s) constant in training rows: {constant_targets}")
    dropped_inputs = [DEMOGRAPHIC_FEATURES[j] for j, i in enumerate(input_idx)
                      if sigma[i] == 0]
    if dropped_inputs:
        log.warning("dropping constant input feature(s): %s", dropped_inputs)
        input_idx = [i for i in input_idx if sigma[i] != 0]
    input_features = [FEATURE_NAMES[i] for i in input_idx]

    by_tract: dict = {}
    for r in kept:
        by_tract.setdefault(r.tract_id, {})[r.year] = r

    counts = {"train": 0, "test": 0, "straddle": 0}
    n_short_series = 0
    train_windows: list[Window] = []
    test_windows: list[Window] = []
    in_mu, in_sigma = mu[input_idx], sigma[input_idx]
    tg_mu, tg_sigma = mu[target_idx], sigma[target_idx]
    for tract_id in sorted(by_tract):
        rows = by_tract[tract_id]
        years = sorted(rows)
        if len(years) < input_len + horizon:
            n_short_series += 1
            continue
        made_any = False
        for input_years, target_years, label in enumerate_windows(
                years, input_len, horizon, boundary):
            made_any = True
            counts[label] += 1
            if label == "straddle":
                continue
            x = np.stack([rows[y].features[input_idx] for y in input_years])
            y_raw = np.stack([rows[y].features[target_idx] for y in target_years])
            win = Window(tract_id, input_years, target_years,
                         x=(x - in_mu) / in_sigma,
                         y=(y_raw - tg_mu) / tg_sigma,
                         y_raw=y_raw)
            (train_windows if label == "train" else test_windows).append(win)
        if not made_any:
            n_short_series += 1
    if n_short_series:
        log.info("skipped %d series shorter than input_len + horizon", n_short_series)

    report = {
        "records_in": len(records) + n_zero_dropped,
        "dropped_zero_rows": n_zero_dropped,
        "dropped_outlier_rows": n_outlier_dropped,
        "records_used": len(kept),
        "series_too_short": n_short_series,
        "windows_train": counts["train"],
        "windows_test": counts["test"],
        "windows_straddle_dropped": counts["straddle"],
        "dropped_constant_inputs": dropped_inputs,
        "boundary_year": boundary,
    }
    return SplitDataset(
        train=train_windows, test=test_windows, boundary_year=boundary,
        input_len=input_len, horizon=horizon,
        input_features=input_features, target_features=list(TRAVEL_FEATURES),
        input_mu=in_mu, input_sigma=in_sigma,
        target_mu=tg_mu, target_sigma=tg_sigma, report=report)


def split_report_text(dataset: SplitDataset) -> str:
    rep = dataset.report
    lines = ["split summary:"]
    for key in ("records_in", "dropped_zero_rows", "dropped_outlier_rows",
                "records_used", "series_too_short", "windows_train",
                "windows_test", "windows_straddle_dropped", "boundary_year"):
        lines.append(f"  {key:28s} {rep[key]}")
    if rep["dropped_constant_inputs"]:
        lines.append(f"  dropped_constant_inputs      {rep['dropped_constant_inputs']}")
    return "\n".join(lines) + "\n"
