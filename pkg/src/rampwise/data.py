"""Dataset ingestion, normalisation and chronological splitting.

Power is stored in MW alongside the rated capacity; everything downstream of
:func:`normalize` works on the unit-scale series.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

DEFAULT_SPLIT = (0.70, 0.15, 0.15)
MAX_IMPUTE_STEPS = 3


class DataError(ValueError):
    """Base class for ingestion and validation failures."""


class MissingColumn(DataError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class EmptyFile(DataError):
    pass


class ZeroRatedPower(DataError):
    pass


class TooShort(DataError):
    pass


@dataclass(frozen=True)
class PowerSeries:
    timestamps: np.ndarray  # epoch seconds
    values: np.ndarray  # MW
    rated_power: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if ts.shape != vals.shape or ts.ndim != 1:
            raise DataError("timestamps and values must be 1-D and equally long")
        if not np.all(np.isfinite(vals)):
            raise DataError("power values must be finite")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise NonMonotonicTimestamps("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    @property
    def step(self) -> int:
        """Sampling interval in seconds (hourly when undetermined)."""
        if len(self.timestamps) < 2:
            return 3600
        return int(np.median(np.diff(self.timestamps)))


@dataclass(frozen=True)
class NormalizedSeries:
    timestamps: np.ndarray
    values: np.ndarray  # fraction of rated power, in [0, 1]
    violations: int = 0

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class CovariateTable:
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def slice(self, start: int, stop: int) -> "CovariateTable":
        return CovariateTable({k: v[start:stop] for k, v in self.columns.items()})

    def as_array(self) -> np.ndarray:
        if not self.columns:
            return np.zeros((0, 0))
        return np.column_stack([self.columns[k] for k in self.names])


@dataclass(frozen=True)
class DatasetBundle:
    power: PowerSeries
    covariates: CovariateTable = field(default_factory=CovariateTable)
    split: tuple[float, float, float] = DEFAULT_SPLIT
    imputed: np.ndarray | None = None  # boolean flag per row
    segments: tuple[tuple[int, int], ...] = ()  # half-open uniform ranges

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {self.split}")
        n = len(self.power)
        if self.covariates.columns and len(self.covariates) != n:
            raise DataError("covariate rows must match the power series length")
        for name, col in self.covariates.columns.items():
            if np.isnan(col).any():
                raise DataError(f"covariate {name!r} contains NaN after imputation")
        if self.imputed is None:
            object.__setattr__(self, "imputed", np.zeros(n, dtype=bool))
        if not self.segments:
            object.__setattr__(self, "segments", ((0, n),))

    def __len__(self):
        return len(self.power)

    def slice(self, start: int, stop: int) -> "DatasetBundle":
        p = self.power
        return DatasetBundle(
            PowerSeries(p.timestamps[start:stop], p.values[start:stop], p.rated_power),
            self.covariates.slice(start, stop),
            self.split,
            self.imputed[start:stop],
        )

    def longest_segment(self) -> "DatasetBundle":
        start, stop = max(self.segments, key=lambda s: s[1] - s[0])
        if (start, stop) == (0, len(self)):
            return self
        log.warning("using longest uniform segment [%d, %d) of %d rows", start, stop, len(self))
        return self.slice(start, stop)


def _parse_timestamps(col: pd.Series) -> np.ndarray:
    if pd.api.types.is_numeric_dtype(col):
        return col.to_numpy(dtype=np.int64)
    parsed = pd.to_datetime(col, utc=True)
    return (parsed.astype("int64") // 10**9).to_numpy()


def load_csv(path, schema: dict | None = None) -> DatasetBundle:
    """Read a ``timestamp,power[,covariate...]`` CSV into a validated bundle.

    ``schema`` keys: ``rated_power`` (required), ``timestamp`` and ``power``
    column names, and ``covariates`` (list of column names; default: all
    remaining columns). Gaps of up to three sampling steps are linearly
    imputed and flagged; longer gaps split the series into segments.
    """
    schema = dict(schema or {})
    ts_col = schema.get("timestamp", "timestamp")
    p_col = schema.get("power", "power")
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        raise EmptyFile(f"{path} is empty or missing")
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise EmptyFile(str(path)) from exc
    if df.empty:
        raise EmptyFile(f"{path} has a header but no rows")
    for col in (ts_col, p_col):
        if col not in df.columns:
            raise MissingColumn(f"column {col!r} not found in {path}")
    cov_names = schema.get("covariates")
    if cov_names is None:
        cov_names = [c for c in df.columns if c not in (ts_col, p_col)]
    missing = [c for c in cov_names if c not in df.columns]
    if missing:
        raise MissingColumn(f"covariate columns {missing} not found")

    ts = _parse_timestamps(df[ts_col])
    if np.any(np.diff(ts) <= 0):
        raise NonMonotonicTimestamps(f"{path}: timestamps are not strictly increasing")
    power = pd.to_numeric(df[p_col], errors="coerce").to_numpy(dtype=float)
    rated = float(schema.get("rated_power", np.nanmax(power) if len(power) else 0.0))
    if "rated_power" not in schema:
        log.warning("rated_power not configured; falling back to the observed maximum")
    covs = {c: pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float) for c in cov_names}
    return assemble_bundle(ts, power, rated, covs, step=schema.get("step"))


def _modal_step(ts) -> int:
    # most frequent spacing, smallest on ties: a few gaps cannot shift it
    if len(ts) < 2:
        return 3600
    vals, counts = np.unique(np.diff(ts), return_counts=True)
    return int(vals[np.argmax(counts)])


def assemble_bundle(ts, power, rated_power, covariates=None, step=None) -> DatasetBundle:
    """Regularise raw arrays: impute short gaps, clamp power, split long gaps."""
    ts = np.asarray(ts, dtype=np.int64)
    power = np.asarray(power, dtype=float)
    covariates = {k: np.asarray(v, dtype=float) for k, v in (covariates or {}).items()}
    keep = np.isfinite(power)
    if not keep.all():
        log.warning("dropping %d rows with non-numeric power", int((~keep).sum()))
        ts, power = ts[keep], power[keep]
        covariates = {k: v[keep] for k, v in covariates.items()}
    if len(power) == 0:
        raise EmptyFile("no valid power rows")
    if step is None:
        step = _modal_step(ts)

    out_ts, out_p, out_flag = [ts[:1]], [power[:1]], [np.zeros(1, bool)]
    out_cov = {k: [v[:1]] for k, v in covariates.items()}
    segments, seg_start, pos = [], 0, 1
    for i in range(1, len(ts)):
        gap = ts[i] - ts[i - 1]
        k = int(round(gap / step))
        if k > 1 and k <= MAX_IMPUTE_STEPS:
            frac = np.arange(1, k) / k
            out_ts.append(ts[i - 1] + np.arange(1, k) * step)
            out_p.append(power[i - 1] + frac * (power[i] - power[i - 1]))
            out_flag.append(np.ones(k - 1, bool))
            for name, v in covariates.items():
                out_cov[name].append(v[i - 1] + frac * (v[i] - v[i - 1]))
            pos += k - 1
        elif k > MAX_IMPUTE_STEPS:
            log.warning("gap of %d steps at row %d splits the series", k, i)
            segments.append((seg_start, pos))
            seg_start = pos
        out_ts.append(ts[i : i + 1])
        out_p.append(power[i : i + 1])
        out_flag.append(np.zeros(1, bool))
        for name, v in covariates.items():
            out_cov[name].append(v[i : i + 1])
        pos += 1
    segments.append((seg_start, pos))

    values = np.concatenate(out_p)
    if rated_power > 0:
        bad = (values < 0) | (values > rated_power)
        if bad.any():
            log.warning("clamping %d power values into [0, %g]", int(bad.sum()), rated_power)
            values = np.clip(values, 0.0, rated_power)
    cov_table = {}
    for name, parts in out_cov.items():
        col = pd.Series(np.concatenate(parts)).interpolate(limit_direction="both")
        cov_table[name] = col.fillna(0.0).to_numpy()
    return DatasetBundle(
        PowerSeries(np.concatenate(out_ts), values, float(rated_power)),
        CovariateTable(cov_table),
        imputed=np.concatenate(out_flag),
        segments=tuple(segments),
    )


def normalize(series: PowerSeries) -> NormalizedSeries:
    if series.rated_power <= 0:
        raise ZeroRatedPower("rated_power must be positive")
    raw = series.values / series.rated_power
    violations = int(np.count_nonzero((raw < 0) | (raw > 1)))
    return NormalizedSeries(series.timestamps, np.clip(raw, 0.0, 1.0), violations)


def split_lengths(n: int, split=DEFAULT_SPLIT) -> tuple[int, int, int]:
    # integer percent arithmetic avoids 0.7 * n landing just below an integer
    n_train = int(np.floor(split[0] * n + 1e-9))
    n_val = int(np.floor(split[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def chronological_split(bundle: DatasetBundle):
    n = len(bundle)
    if n < 10:
        raise TooShort(f"need at least 10 rows to split, got {n}")
    n_train, n_val, _ = split_lengths(n, bundle.split)
    return (
        bundle.slice(0, n_train),
        bundle.slice(n_train, n_train + n_val),
        bundle.slice(n_train + n_val, n),
    )


def with_power(bundle: DatasetBundle, values: np.ndarray) -> DatasetBundle:
    """Copy of ``bundle`` with the power values replaced (same timestamps)."""
    p = bundle.power
    return replace(bundle, power=PowerSeries(p.timestamps, values, p.rated_power))
