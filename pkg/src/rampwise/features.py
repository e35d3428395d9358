"""Candidate feature matrix, Hawkes excitation and multi-horizon labels.

Every column at row t is computed from data at rows <= t only. Wavelet
columns use the one-sided MODWT coefficients and event columns come from an
online tracker (backward differences, trailing thresholds) rather than from
the offline, two-sided event extraction, which would leak future samples.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import DatasetBundle, normalize
from .rba import EventKind, EventSet
from .wavelet import WaveletConfig, causal_coefficients

CATEGORIES = ("RBA", "DWT", "weather", "power", "temporal", "nonlinear")
BANDS = ("approx", "d4", "d3", "d2", "d1")
TYPE_CODES = {EventKind.UP: 0, EventKind.DOWN: 1, EventKind.STATIONARY: 2}


class UnsortedEvents(ValueError):
    pass


class AlignmentError(ValueError):
    pass


# -- Hawkes -----------------------------------------------------------------

@dataclass(frozen=True)
class HawkesParams:
    mu: float = 0.05
    alpha: float = 0.3
    beta: float = 0.2

    def __post_init__(self):
        if self.mu < 0 or self.alpha < 0 or self.beta <= 0:
            raise ValueError("need mu >= 0, alpha >= 0, beta > 0")
        if self.alpha / self.beta >= 1:
            warnings.warn(f"branching ratio alpha/beta = {self.alpha / self.beta:.3g} >= 1: "
                          "the process is not stationary", RuntimeWarning, stacklevel=3)


def hawkes_intensity(event_times, params: HawkesParams, grid) -> np.ndarray:
    """lambda(t) = mu + sum_{t_i < t} alpha exp(-beta (t - t_i)) on ``grid``.

    O(len(events) + len(grid)) via the exponential-decay recursion; the grid
    may be in any order.
    """
    ev = np.asarray(event_times, dtype=float)
    if ev.size > 1 and np.any(np.diff(ev) < 0):
        raise UnsortedEvents("event times must be sorted")
    grid = np.asarray(grid, dtype=float)
    order = np.argsort(grid, kind="stable")
    out = np.empty(len(grid))
    a, beta = params.alpha, params.beta
    excite, ref, i = 0.0, -np.inf, 0  # excite = sum of kernels evaluated at ref
    ev_list, m = ev.tolist(), len(ev)
    for k in order.tolist():
        t = grid[k]
        while i < m and ev_list[i] < t:
            ti = ev_list[i]
            excite = (excite * np.exp(-beta * (ti - ref)) if excite else 0.0) + a
            ref = ti
            i += 1
        out[k] = params.mu + (excite * np.exp(-beta * (t - ref)) if excite else 0.0)
    return out


def hawkes_brute_force(event_times, params: HawkesParams, grid) -> np.ndarray:
    ev = np.asarray(event_times, dtype=float)
    grid = np.asarray(grid, dtype=float)
    dt = grid[:, None] - ev[None, :]
    kern = np.where(dt > 0, params.alpha * np.exp(-params.beta * np.where(dt > 0, dt, 0.0)), 0.0)
    return params.mu + kern.sum(axis=1)


# -- online event tracker -----------------------------------------------------

@dataclass(frozen=True)
class TrackerConfig:
    rolling_window: int = 168
    k_sigma: float = 2.0
    stat_mult: float = 0.5
    d_min: int = 3
    stat_window: int = 6
    max_range: float = 0.05


def track_events(series, cfg: TrackerConfig | None = None) -> dict[str, np.ndarray]:
    """Causal event state from backward differences and trailing thresholds.

    A run of same-sign threshold exceedances is confirmed as an event once it
    reaches ``d_min`` samples; its onset is the first sample of the run.
    Returns per-sample arrays plus ``confirm_times`` (sample at which each
    event became known).
    """
    cfg = cfg or TrackerConfig()
    x = np.asarray(series, dtype=float)
    n = len(x)
    g = np.diff(x, prepend=x[:1])
    s = pd.Series(g)
    mu = s.rolling(cfg.rolling_window, min_periods=1).mean().to_numpy()
    sd = s.rolling(cfg.rolling_window, min_periods=1).std(ddof=0).fillna(0.0).to_numpy()
    tau = np.abs(mu) + cfg.k_sigma * sd
    tau_stat = np.abs(mu) + cfg.stat_mult * cfg.k_sigma * sd
    xs = pd.Series(x).rolling(cfg.stat_window, min_periods=1)
    rng_ = (xs.max() - xs.min()).to_numpy()

    sign = np.where(g > tau, 1, np.where(g < -tau, -1, 0))
    stat = ((np.abs(g) <= tau_stat) & (rng_ <= cfg.max_range)).astype(float)
    ratio = np.abs(g) / np.maximum(tau, 1e-12)

    run = np.zeros(n)
    since = np.zeros(n)
    since_up = np.zeros(n)
    since_down = np.zeros(n)
    last_mag = np.zeros(n)
    last_dur = np.zeros(n)
    last_dir = np.zeros(n)
    onset_flag = np.zeros(n)
    confirms = []
    sign_l, x_l = sign.tolist(), x.tolist()
    cur, length, start = 0, 0, 0
    last_on = last_up = last_down = None
    mag = dur = direction = 0.0
    for t in range(n):
        sg = sign_l[t]
        if sg != 0 and sg == cur:
            length += 1
        elif sg != 0:
            cur, length, start = sg, 1, t
        else:
            cur, length = 0, 0
        if length == cfg.d_min:
            last_on = start
            if cur > 0:
                last_up = start
            else:
                last_down = start
            onset_flag[t] = 1.0
            confirms.append(t)
        if length >= cfg.d_min:
            base = x_l[start - 1] if start > 0 else x_l[start]
            mag, dur, direction = x_l[t] - base, float(length), float(cur)
        run[t] = cur * length
        since[t] = t - last_on if last_on is not None else t + 1
        since_up[t] = t - last_up if last_up is not None else t + 1
        since_down[t] = t - last_down if last_down is not None else t + 1
        last_mag[t], last_dur[t], last_dir[t] = mag, dur, direction
    return {
        "up": (sign > 0).astype(float),
        "down": (sign < 0).astype(float),
        "stat": stat,
        "run": run,
        "since": since,
        "since_up": since_up,
        "since_down": since_down,
        "last_mag": last_mag,
        "last_dur": last_dur,
        "last_dir": last_dir,
        "ratio": ratio,
        "onset": onset_flag,
        "confirm_times": np.asarray(confirms, dtype=float),
    }


# -- feature matrix ---------------------------------------------------------

DEFAULT_SHORTLIST = (
    "p_lag0", "p_lag1", "p_diff1", "p_diff3", "p_diff6", "p_std6", "p_std24", "p_mean24",
    "p_z24", "p_max6", "p_min6",
    "dwt_approx_lag0", "dwt_d4_lag0", "dwt_d3_lag0", "dwt_d2_lag0", "dwt_d1_lag0",
    "dwt_d3_energy24", "dwt_d4_energy24", "dwt_d3_var24", "dwt_d4_var24",
    "rba_p_run", "rba_p_since", "rba_p_dens24", "rba_p_dens72", "rba_p_ratio",
    "rba_d3_ratio", "rba_d4_ratio", "rba_approx_ratio", "rba_p_last_mag", "rba_d3_run",
    "wind_speed_lag0", "wind_speed_diff1", "wind_speed_diff3", "wind_speed_std6",
    "pressure_lag0", "pressure_diff3",
    "hour_sin", "hour_cos", "hawkes", "hawkes_lag6",
)


@dataclass(frozen=True)
class FeatureConfig:
    power_lags: int = 48
    windows: tuple[int, ...] = (3, 6, 12, 24, 48, 72, 168)
    power_diffs: int = 24
    ema_spans: tuple[int, ...] = (3, 6, 12, 24, 48)
    band_lags: int = 24
    band_windows: tuple[int, ...] = (6, 12, 24, 48, 168)
    band_diffs: tuple[int, ...] = (1, 3, 6)
    cov_lags: int = 24
    cov_diffs: tuple[int, ...] = (1, 3, 6, 12, 24)
    cov_windows: tuple[int, ...] = (6, 24, 72)
    density_windows: tuple[int, ...] = (24, 72, 168)
    state_lags: tuple[int, ...] = (1, 2, 3, 6, 12, 24)
    hawkes_lags: tuple[int, ...] = (1, 2, 3, 6, 12, 24)
    shortlist: tuple[str, ...] = DEFAULT_SHORTLIST
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)


@dataclass
class FeatureMatrix:
    values: np.ndarray  # N x F
    names: list[str]
    categories: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise AlignmentError("values and column metadata disagree")
        if len(self.names) != len(self.categories):
            raise AlignmentError("every column needs exactly one category")
        bad = set(self.categories) - set(CATEGORIES)
        if bad:
            raise ValueError(f"unknown categories {sorted(bad)}")

    @property
    def shape(self):
        return self.values.shape

    def __len__(self):
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def category_index(self) -> dict[str, list[int]]:
        out = {c: [] for c in CATEGORIES}
        for i, c in enumerate(self.categories):
            out[c].append(i)
        return out

    def select(self, cols) -> "FeatureMatrix":
        idx = [self.names.index(c) if isinstance(c, str) else int(c) for c in cols]
        return FeatureMatrix(self.values[:, idx], [self.names[i] for i in idx],
                             [self.categories[i] for i in idx])

    def rows(self, start: int, stop: int) -> "FeatureMatrix":
        return FeatureMatrix(self.values[start:stop], list(self.names), list(self.categories))

    def save(self, path) -> None:
        """CSV of values plus ``<path>.json`` with the column metadata."""
        path = Path(path)
        pd.DataFrame(self.values, columns=self.names).to_csv(path, index=False, float_format="%.17g")
        meta = [{"name": n, "category": c} for n, c in zip(self.names, self.categories)]
        path.with_suffix(path.suffix + ".json").write_text(json.dumps({"columns": meta}, indent=1))

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())["columns"]
        df = pd.read_csv(path)
        names = [m["name"] for m in meta]
        if list(df.columns) != names:
            raise AlignmentError("CSV header does not match the sidecar metadata")
        return cls(df.to_numpy(dtype=float), names, [m["category"] for m in meta])


def _lag(a: np.ndarray, k: int) -> np.ndarray:
    # fill the first k rows with the first value: still causal, no NaN
    if k == 0:
        return a.copy()
    out = np.empty_like(a)
    out[k:] = a[:-k]
    out[:k] = a[0]
    return out


def _roll(a, w):
    return pd.Series(a).rolling(w, min_periods=1)


def _power_block(p, cfg, cols):
    for k in range(cfg.power_lags + 1):
        cols[f"p_lag{k}"] = ("power", _lag(p, k))
    for w in cfg.windows:
        r = _roll(p, w)
        mean, std = r.mean().to_numpy(), r.std(ddof=0).fillna(0.0).to_numpy()
        cols[f"p_mean{w}"] = ("power", mean)
        cols[f"p_std{w}"] = ("power", std)
        cols[f"p_min{w}"] = ("power", r.min().to_numpy())
        cols[f"p_max{w}"] = ("power", r.max().to_numpy())
        cols[f"p_z{w}"] = ("power", (p - mean) / (std + 1e-6))
    for k in range(1, cfg.power_diffs + 1):
        cols[f"p_diff{k}"] = ("power", p - _lag(p, k))
    for s in cfg.ema_spans:
        cols[f"p_ema{s}"] = ("power", pd.Series(p).ewm(span=s, adjust=False).mean().to_numpy())


def _band_block(coef, cfg, cols):
    energy = {}
    for b in BANDS:
        c = coef[b]
        for k in range(cfg.band_lags + 1):
            cols[f"dwt_{b}_lag{k}"] = ("DWT", _lag(c, k))
        for k in cfg.band_diffs:
            cols[f"dwt_{b}_diff{k}"] = ("DWT", c - _lag(c, k))
        for w in cfg.band_windows:
            cols[f"dwt_{b}_var{w}"] = ("DWT", _roll(c, w).var(ddof=0).fillna(0.0).to_numpy())
            e = _roll(c * c, w).sum().to_numpy()
            cols[f"dwt_{b}_energy{w}"] = ("DWT", e)
            energy[b, w] = e
    for w in cfg.band_windows:
        for i, b1 in enumerate(BANDS):
            for b2 in BANDS[i + 1 :]:
                cols[f"dwt_ratio_{b1}_{b2}_{w}"] = ("DWT", energy[b1, w] / (energy[b2, w] + 1e-9))


def _weather_block(covs: dict, cfg, cols):
    for name in sorted(covs):
        c = np.asarray(covs[name], dtype=float)
        for k in range(cfg.cov_lags + 1):
            cols[f"{name}_lag{k}"] = ("weather", _lag(c, k))
        for k in cfg.cov_diffs:
            cols[f"{name}_diff{k}"] = ("weather", c - _lag(c, k))
        for w in cfg.cov_windows:
            r = _roll(c, w)
            cols[f"{name}_mean{w}"] = ("weather", r.mean().to_numpy())
            cols[f"{name}_std{w}"] = ("weather", r.std(ddof=0).fillna(0.0).to_numpy())


def _temporal_block(ts, cols):
    when = pd.to_datetime(np.asarray(ts, dtype=np.int64), unit="s", utc=True)
    hour = (np.asarray(ts, dtype=np.int64) % 86400) / 3600.0
    doy = when.dayofyear.to_numpy(dtype=float) - 1.0
    dow = when.dayofweek.to_numpy(dtype=float)
    month = when.month.to_numpy(dtype=float) - 1.0
    for name, v, period in (("hour", hour, 24.0), ("doy", doy, 365.25), ("dow", dow, 7.0),
                            ("month", month, 12.0)):
        cols[f"{name}_sin"] = ("temporal", np.sin(2 * np.pi * v / period))
        cols[f"{name}_cos"] = ("temporal", np.cos(2 * np.pi * v / period))
    for h in (2, 3):
        cols[f"hour{h}_sin"] = ("temporal", np.sin(2 * np.pi * h * hour / 24.0))
        cols[f"hour{h}_cos"] = ("temporal", np.cos(2 * np.pi * h * hour / 24.0))
        cols[f"doy{h}_sin"] = ("temporal", np.sin(2 * np.pi * h * doy / 365.25))
        cols[f"doy{h}_cos"] = ("temporal", np.cos(2 * np.pi * h * doy / 365.25))


def _rba_block(series: dict, cfg, cols):
    tracked = {}
    for key, s in series.items():
        tr = track_events(s, cfg.tracker)
        tracked[key] = tr
        for f in ("up", "down", "stat", "run", "since", "since_up", "since_down",
                  "last_mag", "last_dur", "last_dir", "ratio"):
            cols[f"rba_{key}_{f}"] = ("RBA", tr[f])
        for w in cfg.density_windows:
            cols[f"rba_{key}_dens{w}"] = ("RBA", _roll(tr["onset"], w).sum().to_numpy())
    p = tracked["p"]
    for k in cfg.state_lags:
        for f in ("up", "down", "stat"):
            cols[f"rba_p_{f}_lag{k}"] = ("RBA", _lag(p[f], k))
    return tracked


def build_features(bundle: DatasetBundle, config: FeatureConfig | None = None,
                   hawkes: HawkesParams | None = None) -> FeatureMatrix:
    """Six-category causal feature matrix for every row of ``bundle``.

    Columns are ordered by (category, name).
    """
    cfg = config or FeatureConfig()
    hawkes = hawkes or HawkesParams()
    p = normalize(bundle.power).values
    n = len(p)
    if bundle.covariates.columns and len(bundle.covariates) != n:
        raise AlignmentError("covariates are not row-aligned with power")
    cols: dict[str, tuple[str, np.ndarray]] = {}
    _power_block(p, cfg, cols)
    coef = causal_coefficients(p, cfg.wavelet)
    if set(coef) != set(BANDS):
        raise AlignmentError("feature bands expect a level-4 decomposition")
    _band_block(coef, cfg, cols)
    _weather_block(bundle.covariates.columns, cfg, cols)
    _temporal_block(bundle.power.timestamps, cols)
    tracked = _rba_block({"p": p, **coef}, cfg, cols)

    lam = hawkes_intensity(tracked["p"]["confirm_times"], hawkes, np.arange(n))
    cols["hawkes"] = ("nonlinear", lam)
    for k in cfg.hawkes_lags:
        cols[f"hawkes_lag{k}"] = ("nonlinear", _lag(lam, k))
    short = [c for c in cfg.shortlist if c in cols]
    for i, a in enumerate(short):
        va = cols[a][1]
        cols[f"sq_{a}"] = ("nonlinear", va * va)
        for b in short[i + 1 :]:
            cols[f"x_{a}__{b}"] = ("nonlinear", va * cols[b][1])
    for w in cfg.band_windows:
        for b1, b2 in (("d3", "d4"), ("d2", "d3"), ("d4", "approx")):
            e1 = cols[f"dwt_{b1}_energy{w}"][1]
            e2 = cols[f"dwt_{b2}_energy{w}"][1]
            cols[f"ratio_{b1}_{b2}_energy{w}"] = ("nonlinear", e1 / (e2 + 1e-9))

    order = sorted(cols, key=lambda k: (cols[k][0], k))
    values = np.column_stack([cols[k][1] for k in order])
    values = np.nan_to_num(values, nan=0.0, posinf=0.0, neginf=0.0)
    return FeatureMatrix(values, order, [cols[k][0] for k in order])


# -- labels -----------------------------------------------------------------

@dataclass
class HorizonLabels:
    horizons: tuple[int, ...]
    occurrence: np.ndarray  # N x H, {0, 1}
    type: np.ndarray  # N x H, codes 0 up / 1 down / 2 stationary
    time_to_event: np.ndarray  # N, steps to next onset (0 while an event is active), capped
    magnitude: np.ndarray  # N x H x bands
    duration: np.ndarray  # N x H x bands
    active: np.ndarray  # N x H, significant event active at t + H
    bands: tuple[str, ...] = BANDS
    cap: int = 168

    @property
    def mask(self) -> np.ndarray:
        return self.occurrence.astype(bool)

    def rows(self, start: int, stop: int) -> "HorizonLabels":
        return HorizonLabels(self.horizons, self.occurrence[start:stop], self.type[start:stop],
                             self.time_to_event[start:stop], self.magnitude[start:stop],
                             self.duration[start:stop], self.active[start:stop], self.bands, self.cap)


def _earliest_fill(n, events, H, fill, values):
    # later onsets first so the earliest event overwrites
    for ev, val in sorted(zip(events, values), key=lambda ev_v: -ev_v[0].onset):
        lo, hi = max(ev.onset - H, 0), min(ev.end + 1, n)
        if lo < hi:
            fill[lo:hi] = val


def label_horizons(fused: EventSet, per_band: dict[str, EventSet] | None = None,
                   horizons=(1, 6, 12, 24), cap: int = 168, n: int | None = None) -> HorizonLabels:
    """Occurrence/type/time/magnitude/duration targets per horizon.

    occurrence(t, H) = 1 iff a significant event is active at t or has its
    onset in (t, t + H]; the earliest such event supplies the type.
    """
    horizons = tuple(int(h) for h in horizons)
    if any(h <= 0 for h in horizons) or list(horizons) != sorted(horizons):
        raise ValueError("horizons must be positive and sorted")
    n = n if n is not None else fused.length
    if n is None:
        raise ValueError("series length unknown")
    per_band = per_band or {}
    sig = [e for e in fused.events if e.kind.significant]
    nh = len(horizons)
    occ = np.zeros((n, nh), dtype=np.int8)
    typ = np.full((n, nh), TYPE_CODES[EventKind.STATIONARY], dtype=np.int8)
    active = np.zeros((n, nh), dtype=np.int8)
    mag = np.zeros((n, nh, len(BANDS)))
    dur = np.zeros((n, nh, len(BANDS)))
    act_now = fused.active_mask(n, kinds={EventKind.UP, EventKind.DOWN})
    for j, H in enumerate(horizons):
        col = np.full(n, -1, dtype=np.int64)
        _earliest_fill(n, sig, H, col, [TYPE_CODES[e.kind] for e in sig])
        occ[:, j] = col >= 0
        typ[col >= 0, j] = col[col >= 0]
        active[: max(n - H, 0), j] = act_now[H:]
        for b, band in enumerate(BANDS):
            bev = [e for e in per_band.get(band, EventSet()).events if e.kind.significant]
            m = np.zeros(n)
            d = np.zeros(n)
            _earliest_fill(n, bev, H, m, [e.magnitude for e in bev])
            _earliest_fill(n, bev, H, d, [float(e.duration) for e in bev])
            mag[:, j, b] = m
            dur[:, j, b] = d
    onsets = np.array(sorted(e.onset for e in sig), dtype=np.int64)
    t = np.arange(n)
    pos = np.searchsorted(onsets, t, side="right")
    if len(onsets):
        nxt = np.where(pos < len(onsets), onsets[np.minimum(pos, len(onsets) - 1)] - t, cap)
    else:
        nxt = np.full(n, cap)
    tte = np.minimum(np.where(act_now, 0, nxt), cap).astype(float)
    return HorizonLabels(horizons, occ, typ, tte, mag, dur, active, BANDS, cap)

